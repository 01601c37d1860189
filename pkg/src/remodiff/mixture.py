"""Condition-mixture optimisation: a (w1, w2) grid over the whole sampler, then
gradient finetuning of (w1, w2, w3) through the last inference steps.

Both stages minimise FID between generated and real evaluator features.
"""

from __future__ import annotations

import contextlib
import json
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conditioning import ConditionBuilder
from .diffusion import (
    DiffusionSchedule,
    MixtureWeights,
    classifier_free_estimates,
    mix_estimates,
    p_sample_step,
    respace,
    sample,
)
from .metrics import fid, fid_tensor
from .nn import Adam, Module, frozen
from .tensor import Tensor

__all__ = [
    "EvalPrompt",
    "FinetuneReport",
    "GridSearchReport",
    "MixtureDivergence",
    "MixtureWeights",
    "TailProblem",
    "fid_objective",
    "finetune_tail",
    "grid_points",
    "grid_search",
    "sampling_objective",
    "report_json",
]


class MixtureDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalPrompt:
    prompt: str
    length: int
    exclude: frozenset[str] = frozenset()


def fid_objective(generated_feats, real_feats):
    """FID of generated against real features; a Tensor input gives a differentiable Tensor."""
    if isinstance(generated_feats, Tensor):
        return fid_tensor(np.asarray(real_feats), generated_feats)
    return fid(np.asarray(real_feats), np.asarray(generated_feats))


# --------------------------------------------------------------------------
# grid search


def grid_points(lo: float = -5.0, hi: float = 5.0, step: float = 0.5) -> list[MixtureWeights]:
    """(w1, w2) on the grid with w4 = 0 and w3 = 1 - w1 - w2."""
    n = int(round((hi - lo) / step)) + 1
    axis = [float(lo + i * step) for i in range(n)]
    return [MixtureWeights(w1, w2, 1.0 - w1 - w2, 0.0) for w1 in axis for w2 in axis]


@dataclass
class GridSearchReport:
    points: list[tuple[MixtureWeights, float]]
    best: MixtureWeights
    grid: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "grid_spec": self.grid,
            "grid": [{"w1": w.w1, "w2": w.w2, "fid": v} for w, v in self.points],
            "best": self.best.to_dict(),
        }


def grid_search(
    objective: Callable[[MixtureWeights], float], lo: float = -5.0, hi: float = 5.0, step: float = 0.5
) -> GridSearchReport:
    """Evaluate ``objective`` at every grid point; ties go to the smallest (w1, w2)."""
    points = []
    for w in grid_points(lo, hi, step):
        if w.w4 != 0.0 or abs(sum(w.as_tuple()) - 1.0) > 1e-9:
            raise AssertionError(f"grid produced an invalid weight tuple {w}")
        v = float(objective(w))
        if not np.isfinite(v):
            raise MixtureDivergence(f"objective is not finite at {w}")
        points.append((w, v))
    best = min(points, key=lambda p: (p[1], p[0].w1, p[0].w2))[0]
    return GridSearchReport(points, best, {"lo": lo, "hi": hi, "step": step, "n_points": len(points)})


def sampling_objective(
    model,
    builder: ConditionBuilder,
    eval_set: list[EvalPrompt],
    schedule: DiffusionSchedule,
    features: Callable[[list[np.ndarray]], np.ndarray],
    real_feats: np.ndarray,
    n_infer: int = 50,
    seed: int = 0,
) -> Callable[[MixtureWeights], float]:
    """FID of samples drawn with constant weights; item i always uses seed + i."""
    if not eval_set:
        raise ValueError("eval_set is empty")
    if features is None:
        raise ValueError("an evaluator is required for the mixture search")

    def objective(w: MixtureWeights) -> float:
        gen = [sample(model, builder, e.prompt, e.length, schedule, n_infer, w, seed + i, exclude=e.exclude).normalized for i, e in enumerate(eval_set)]
        return fid(real_feats, features(gen))

    return objective


# --------------------------------------------------------------------------
# tail finetuning


def _scalar_weight(w: Tensor, shape) -> list[Tensor]:
    """The four mixture coefficients as Tensors expanded to ``shape``; w4 = 1 - sum(w)."""
    coeffs = [T.getitem(w, i) for i in range(3)]
    coeffs.append(T.sub(Tensor(np.array(1.0)), T.sum(w)))
    return [T.expand(T.reshape(c, (1,) * len(shape)), shape) for c in coeffs]


class TailProblem:
    """Sampler state after the frozen head steps, with the tail noise fixed.

    ``final(w)`` runs the tail steps with learnable free weights ``w`` (a (3,)
    Tensor) and returns the generated normalised motions as Tensors.
    """

    def __init__(
        self,
        model,
        builder: ConditionBuilder,
        eval_set: list[EvalPrompt],
        schedule: DiffusionSchedule,
        w_head: MixtureWeights,
        n_infer: int = 50,
        n_tail: int = 10,
        seed: int = 0,
        posterior: str = "standard",
    ):
        if not eval_set:
            raise ValueError("eval_set is empty")
        pairs = respace(schedule, n_infer).pairs()
        if not 1 <= n_tail <= len(pairs):
            raise ValueError(f"n_tail must be in [1, {len(pairs)}]")
        self.model, self.schedule, self.posterior = model, schedule, posterior
        self.head, self.tail = pairs[: len(pairs) - n_tail], pairs[len(pairs) - n_tail :]
        self.items = []
        needed = tuple(wi != 0.0 for wi in w_head.as_tuple())
        with T.no_grad():
            for i, e in enumerate(eval_set):
                cond, _ = builder.build(e.prompt, e.length, exclude=e.exclude)
                if not cond.has_retr or not cond.has_text:
                    raise ValueError("tail finetuning needs both text and retrieval conditions")
                prep = model.prepare(cond)
                # same draw order as ``sample`` so constant weights reproduce it
                rng = np.random.default_rng(seed + i)
                x = rng.standard_normal((e.length, builder.stats.dim))
                for t, t_prev in self.head:
                    ests = classifier_free_estimates(model, x, t, cond, prep, needed)
                    s_hat = mix_estimates(tuple(None if v is None else v.data for v in ests), w_head)
                    x = p_sample_step(x, t, t_prev, s_hat, schedule, rng, posterior=posterior)
                noise = [rng.standard_normal(x.shape) if t_prev > 0 else None for _, t_prev in self.tail]
                self.items.append((cond, prep, x, noise))

    def final(self, w: Tensor) -> list[Tensor]:
        out = []
        for cond, prep, x_head, noise in self.items:
            x = Tensor(x_head)
            for (t, t_prev), eps in zip(self.tail, noise):
                ests = classifier_free_estimates(self.model, x, t, cond, prep)
                coeffs = _scalar_weight(w, x.shape)
                s_hat = None
                for c, est in zip(coeffs, ests):
                    term = T.mul(est, c)
                    s_hat = term if s_hat is None else T.add(s_hat, term)
                x = p_sample_step(x, t, t_prev, s_hat, self.schedule, noise=eps, posterior=self.posterior)
            out.append(x)
        return out


@dataclass
class FinetuneReport:
    weights: MixtureWeights
    objective: list[float]
    initial: float

    def to_dict(self) -> dict:
        return {**self.weights.to_dict(), "initial_fid": self.initial, "final_fid": self.objective[-1] if self.objective else self.initial}


def finetune_tail(
    problem: TailProblem,
    w_init: MixtureWeights,
    features: Callable[[list[Tensor]], Tensor],
    real_feats: np.ndarray,
    n_steps: int = 1000,
    lr: float = 0.05,
    divergence_factor: float = 10.0,
) -> FinetuneReport:
    """Adam on (w1, w2, w3) through the unrolled tail; the model stays frozen."""
    w = Tensor(np.array([w_init.w1, w_init.w2, w_init.w3], dtype=np.float64), requires_grad=True)
    start = w.data.copy()
    model = problem.model
    before = model.checksum() if isinstance(model, Module) else None
    opt = Adam([w], lr=lr)
    history = []
    initial = None
    guard = frozen(model) if isinstance(model, Module) else contextlib.nullcontext()
    with guard:
        for step in range(n_steps + 1):
            loss = fid_objective(features(problem.final(w)), real_feats)
            value = loss.item()
            if not np.isfinite(value):
                raise MixtureDivergence(f"FID became non-finite at step {step}")
            if initial is None:
                initial = value
            elif value > divergence_factor * max(initial, 1e-12):
                raise MixtureDivergence(f"FID {value:.4g} exceeds {divergence_factor}x the initial {initial:.4g}")
            history.append(value)
            if step == n_steps:
                break
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    if before is not None and model.checksum() != before:
        raise AssertionError("model parameters changed during tail finetuning")
    if np.array_equal(w.data, start):
        return FinetuneReport(w_init, history, initial)
    return FinetuneReport(MixtureWeights.from_free(*map(float, w.data)), history, initial)


def report_json(grid: GridSearchReport, finetuned: FinetuneReport | None = None) -> str:
    """JSON text with the grid, the best grid point and the finetuned weights."""
    doc = grid.to_dict()
    doc["finetuned"] = None if finetuned is None else finetuned.to_dict()
    return json.dumps(doc, indent=2, sort_keys=True)
