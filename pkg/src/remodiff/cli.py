"""Command-line interface: ``remodiff <command> --config run.json ...``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 numeric failure.
Every artifact is written atomically and gets a ``.json`` sidecar echoing the
resolved config, the seed and ``git describe`` of the source tree.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import subprocess
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .conditioning import ConditionBuilder
from .config import ConfigError, RunConfig, load_config
from .diffusion import MixtureWeights, make_schedule, sample, train
from .metrics import (
    Evaluator,
    MetricReport,
    diversity,
    fid,
    histogram_bars,
    mm_dist,
    multimodality,
    r_precision,
    rareness_records,
    stratified_mm,
    train_evaluator,
)
from .mixture import EvalPrompt, MixtureDivergence, TailProblem, finetune_tail, grid_search, report_json, sampling_objective
from .motion import MotionFormatError, SchemaError, compute_norm_stats, load_dataset, normalize_frames, write_dataset, write_motion
from .nn import CheckpointError
from .retrieval import FingerprintMismatch, IndexFormatError, build_index, load_index, save_index
from .smt import SMT
from .synthetic import all_combos, heldout_combos, make_synthetic_dataset
from .text import TransportError, UnknownCaptionError, make_provider

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers


@contextlib.contextmanager
def atomic_path(path: Path):
    """Yield a temporary sibling path; it replaces ``path`` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text_atomic(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def sidecar(path: Path, cfg: RunConfig | None, command: str, extra: dict) -> None:
    doc = {"command": command, "git": git_describe(), "config": None if cfg is None else cfg.to_dict(), **extra}
    write_text_atomic(Path(f"{path}.json"), json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# shared loading


def _dataset(path: str):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory {path!r} does not exist")
    return load_dataset(path)


class Context:
    """Lazily loaded pieces shared by the commands."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.sequences = _dataset(cfg.dataset)
        self.stats = compute_norm_stats(self.sequences)
        if self.stats.dim != cfg.smt.pose_dim:
            raise SchemaError(f"dataset pose dim {self.stats.dim} != smt pose dim {cfg.smt.pose_dim} (n_joints={cfg.smt.n_joints})")
        self.provider = make_provider(cfg.provider)
        self.schedule = make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        self._builder = None

    def index(self):
        path = self.out / "index.rmix"
        if path.is_file():
            return load_index(path, self.provider.fingerprint, strict=True)
        return build_index(self.sequences, self.provider, self.cfg.lam)

    def builder(self) -> ConditionBuilder:
        if self._builder is None:
            self._builder = ConditionBuilder(self.provider, self.stats, self.index(), self.sequences, self.cfg.k)
        return self._builder

    def model(self, path: str | None) -> SMT:
        return SMT.load(path or self.out / "smt.rmck")

    def evaluator(self, path: str | None) -> Evaluator:
        p = Path(path or self.out / "evaluator.rmck")
        if not p.is_file():
            raise UsageError(f"evaluator checkpoint {p} not found; run `train evaluator` first")
        return Evaluator.load(p)

    def normalized(self, sequences) -> list[np.ndarray]:
        return [normalize_frames(s.frames, self.stats) for s in sequences]


def parse_weights(text: str | None) -> MixtureWeights:
    """``w1,w2,w3,w4`` or a mixture report (finetuned weights preferred over the grid best)."""
    if text is None:
        return MixtureWeights(1.0, 0.0, 0.0, 0.0)
    if Path(text).is_file():
        doc = json.loads(Path(text).read_text())
        w = doc.get("finetuned") or doc["best"]
        return MixtureWeights(w["w1"], w["w2"], w["w3"], w["w4"])
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"--weights: cannot parse {text!r}") from exc
    if len(vals) != 4:
        raise UsageError("--weights needs four comma-separated numbers or a mixture report path")
    try:
        return MixtureWeights(*vals)
    except ValueError as exc:
        raise UsageError(f"--weights: {exc}") from exc


# --------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(args) -> int:
    combos = {"all": all_combos(), "heldout": heldout_combos()}.get(args.split)
    if combos is None:
        held = set(heldout_combos())
        combos = [c for c in all_combos() if c not in held]
    length_range = None if args.min_len is None else (args.min_len, args.max_len or args.frames)
    seqs = make_synthetic_dataset(args.seed, args.frames, args.joints, combos, args.instances, args.jitter, length_range)
    out = Path(args.out)
    if out.exists() and not (out / "manifest.json").is_file():
        raise UsageError(f"{out} exists and is not a dataset directory; refusing to overwrite")
    tmp = out.with_name(f".{out.name}.tmp")
    shutil.rmtree(tmp, ignore_errors=True)
    try:
        write_dataset(tmp, seqs)
        shutil.rmtree(out, ignore_errors=True)
        os.replace(tmp, out)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_build_index(args) -> int:
    cfg = load_config(args.config)
    ctx = Context(cfg)
    lam = cfg.lam if args.lam is None else args.lam
    index = build_index(ctx.sequences, ctx.provider, lam)
    path = Path(args.out or ctx.out / "index.rmix")
    with atomic_path(path) as tmp:
        save_index(index, tmp)
    sidecar(path, cfg, "build-index", {"entries": len(index), "lambda": lam, "fingerprint": index.fingerprint})
    print(f"{len(index)} entries, lambda={lam}, written to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ctx = Context(cfg)
    if args.what == "smt":
        tc = cfg.train
        if args.steps is not None or args.no_retrieval:
            tc = replace(tc, steps=tc.steps if args.steps is None else args.steps, use_retrieval=tc.use_retrieval and not args.no_retrieval)
        model = SMT(cfg.smt)
        report = train(model, ctx.sequences, ctx.builder(), ctx.schedule, tc)
        path = Path(args.out or ctx.out / "smt.rmck")
        with atomic_path(path) as tmp:
            model.save(tmp)
        extra = {"train": asdict(tc), "probe_before": report.probe_before, "probe_after": report.probe_after, "final_loss": report.losses[-1] if report.losses else None, "checksum": model.checksum()}
        print(f"probe loss {report.probe_before:.5f} -> {report.probe_after:.5f}; checkpoint {path}")
    else:
        ecfg = cfg.evaluator_config(ctx.stats.dim)
        if args.steps is not None:
            ecfg = replace(ecfg, steps=args.steps)
        pairs = [(m, c) for s, m in zip(ctx.sequences, ctx.normalized(ctx.sequences)) for c in s.captions]
        ev, losses = train_evaluator([m for m, _ in pairs], [c for _, c in pairs], ctx.provider, ecfg)
        path = Path(args.out or ctx.out / "evaluator.rmck")
        with atomic_path(path) as tmp:
            ev.save(tmp)
        extra = {"evaluator": asdict(ecfg), "first_loss": losses[0] if losses else None, "final_loss": losses[-1] if losses else None, "checksum": ev.checksum()}
        print(f"evaluator loss {extra['first_loss']} -> {extra['final_loss']}; checkpoint {path}")
    sidecar(path, cfg, f"train {args.what}", extra)
    return EXIT_OK


def planted_objective(w1: float, w2: float):
    """Convex quadratic surrogate with its minimum at (w1, w2)."""

    def objective(w: MixtureWeights) -> float:
        a, b = w.w1 - w1, w.w2 - w2
        return a * a + 2.0 * b * b + 0.5 * a * b

    return objective


def cmd_mixture_search(args) -> int:
    cfg = load_config(args.config)
    mc = cfg.mixture
    path = Path(args.out or Path(cfg.output_dir) / "mixture.json")
    if args.planted is not None:
        try:
            w1, w2 = (float(v) for v in args.planted.split(","))
        except ValueError as exc:
            raise UsageError("--planted needs W1,W2") from exc
        grid = grid_search(planted_objective(w1, w2), mc.grid_lo, mc.grid_hi, mc.grid_step)
        text = report_json(grid)
        write_text_atomic(path, text + "\n")
        sidecar(path, cfg, "mixture-search", {"planted": [w1, w2]})
        print(f"planted ({w1}, {w2}); best {grid.best.to_dict()}")
        return EXIT_OK
    ctx = Context(cfg)
    model = ctx.model(args.checkpoint)
    ev = ctx.evaluator(args.evaluator)
    builder = ctx.builder()
    n_infer = args.steps or cfg.n_infer
    real = ev.embed_motions(ctx.normalized(ctx.sequences))
    evals = [EvalPrompt(s.captions[0], s.length, frozenset({s.id})) for s in ctx.sequences[: mc.eval_size]]
    objective = sampling_objective(model, builder, evals, ctx.schedule, ev.embed_motions, real, n_infer, cfg.seed)
    grid = grid_search(objective, mc.grid_lo, mc.grid_hi, mc.grid_step)
    finetuned = None
    if not args.skip_finetune and mc.finetune_steps > 0:
        problem = TailProblem(model, builder, evals, ctx.schedule, grid.best, n_infer, mc.n_tail, cfg.seed)
        finetuned = finetune_tail(problem, grid.best, ev.feature_fn(), real, mc.finetune_steps, mc.finetune_lr)
    write_text_atomic(path, report_json(grid, finetuned) + "\n")
    sidecar(path, cfg, "mixture-search", {"n_infer": n_infer, "eval_size": len(evals)})
    print(f"grid best {grid.best.to_dict()}" + ("" if finetuned is None else f"; finetuned {finetuned.weights.to_dict()}"))
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    ctx = Context(cfg)
    if args.length < 1:
        raise UsageError("--length must be >= 1")
    weights = parse_weights(args.weights)
    seed = cfg.seed if args.seed is None else args.seed
    model = ctx.model(args.checkpoint)
    res = sample(model, ctx.builder(), args.prompt, args.length, ctx.schedule, args.steps, weights, seed, exclude=frozenset(args.exclude))
    if not np.all(np.isfinite(res.frames)):
        raise FloatingPointError("sampler produced non-finite frames")
    path = Path(args.out or ctx.out / "sample.rmdf")
    with atomic_path(path) as tmp:
        write_motion(tmp, res.frames)
    sidecar(
        path,
        cfg,
        "sample",
        {"prompt": args.prompt, "length": args.length, "steps": args.steps, "seed": seed, "weights": weights.to_dict(), "exclude": sorted(args.exclude), "retrieved": res.retrieved_ids, "model_checksum": model.checksum()},
    )
    print(f"wrote {args.length} frames to {path}; retrieved {res.retrieved_ids}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ctx = Context(cfg)
    model = ctx.model(args.checkpoint)
    ev = ctx.evaluator(args.evaluator)
    builder = ctx.builder()
    tests = ctx.sequences if args.test_dataset is None else _dataset(args.test_dataset)
    weights = parse_weights(args.weights)
    seed = cfg.seed if args.seed is None else args.seed
    if args.reps < 2:
        raise UsageError("--reps must be >= 2 for multimodality")
    prompts, gens = [], []
    for s in tests:
        for r in range(args.reps):
            res = sample(model, builder, s.captions[0], s.length, ctx.schedule, args.steps, weights, seed + len(gens), exclude=frozenset({s.id}))
            prompts.append(s.captions[0])
            gens.append(res.normalized)
    gen_feats = ev.embed_motions(gens)
    text_feats = ev.embed_texts([builder.tokens(p) for p in prompts])
    real_feats = ev.embed_motions(ctx.normalized(tests))
    rng = np.random.default_rng(seed)
    per_prompt: dict[str, list] = {}
    for p, f in zip(prompts, gen_feats):
        per_prompt.setdefault(p, []).append(f)
    train_caps = sorted({c for s in ctx.sequences for c in s.captions})
    rare = {r.prompt: r for r in rareness_records(sorted(set(prompts)), train_caps, ctx.provider)}
    dists = np.linalg.norm(gen_feats - text_feats, axis=1)
    tail, balanced, hist = stratified_mm([(rare[p].r_p, d, p) for p, d in zip(prompts, dists)])
    report = MetricReport(
        fid=fid(real_feats, gen_feats),
        r_precision=r_precision(gen_feats, text_feats, rng=rng),
        mm_dist=mm_dist(gen_feats, text_feats),
        diversity=diversity(gen_feats, rng=rng),
        multimodality=multimodality({k: np.stack(v) for k, v in per_prompt.items()}, rng=rng),
        rareness={"tail5_mm": tail, "balanced_mm": balanced, "histogram": hist},
    )
    path = Path(args.out or ctx.out / "metrics.json")
    write_text_atomic(path, report.to_json() + "\n")
    sidecar(path, cfg, "eval", {"steps": args.steps, "reps": args.reps, "seed": seed, "weights": weights.to_dict(), "n_generated": len(gens)})
    print(report.to_json())
    print("rareness histogram (bin lower edge | count):")
    print(histogram_bars(hist))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remodiff", description="Retrieval-augmented text-to-motion diffusion at toy scale.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--joints", type=int, default=4)
    g.add_argument("--instances", type=int, default=1)
    g.add_argument("--jitter", type=float, default=0.0)
    g.add_argument("--split", choices=("all", "train", "heldout"), default="all", help="train excludes the held-out verb/adverb combos")
    g.add_argument("--min-len", type=int, default=None)
    g.add_argument("--max-len", type=int, default=None)
    g.set_defaults(fn=cmd_gen_synthetic)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--out", default=None, help="output path (default under output_dir)")
        sp.set_defaults(fn=fn)
        return sp

    b = with_config("build-index", cmd_build_index, "build the retrieval index")
    b.add_argument("--lambda", dest="lam", type=float, default=None)

    t = with_config("train", cmd_train, "train the denoiser or the evaluator")
    t.add_argument("what", choices=("smt", "evaluator"))
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--no-retrieval", action="store_true", help="train with the retrieval condition always masked")

    m = with_config("mixture-search", cmd_mixture_search, "grid search and tail finetuning of mixture weights")
    m.add_argument("--planted", default=None, metavar="W1,W2", help="search a quadratic surrogate with this planted optimum")
    m.add_argument("--checkpoint", default=None)
    m.add_argument("--evaluator", default=None)
    m.add_argument("--steps", type=int, default=None, help="inference steps (default from config)")
    m.add_argument("--skip-finetune", action="store_true")

    s = with_config("sample", cmd_sample, "generate one motion")
    s.add_argument("--prompt", required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--weights", default=None, help="w1,w2,w3,w4 or a mixture report")
    s.add_argument("--exclude", action="append", default=[], help="sequence id to drop from retrieval")
    s.add_argument("--checkpoint", default=None)

    e = with_config("eval", cmd_eval, "generate for test captions and compute the metric suite")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--evaluator", default=None)
    e.add_argument("--test-dataset", default=None)
    e.add_argument("--reps", type=int, default=2)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--weights", default=None)
    return p


DATA_ERRORS = (MotionFormatError, SchemaError, IndexFormatError, FingerprintMismatch, CheckpointError, UnknownCaptionError, TransportError, FileNotFoundError, KeyError)
NUMERIC_ERRORS = (FloatingPointError, MixtureDivergence, np.linalg.LinAlgError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
