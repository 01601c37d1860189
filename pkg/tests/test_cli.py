import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from remodiff.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_weights
from remodiff.config import ConfigError, load_config, parse_config
from remodiff.motion import read_motion

CFG = {
    "dataset": "data",
    "output_dir": "out",
    "seed": 0,
    "provider": {"backend": "stub", "d_text": 16},
    "smt": {"n_joints": 2, "latent_dim": 16, "n_decoder_layers": 1, "n_retr_encoder_layers": 1, "n_prompt_layers": 1},
    "train": {"steps": 5, "batch_size": 4, "lr": 0.001},
    "evaluator": {"steps": 5, "d_model": 16, "d_eval": 8, "n_motion_layers": 1, "n_text_layers": 1},
    "mixture": {"eval_size": 3, "grid_lo": -1, "grid_hi": 1, "grid_step": 1, "n_tail": 2, "finetune_steps": 2},
    "n_infer": 5,
}


def digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert main(["gen-synthetic", "--out", str(d / "data"), "--joints", "2", "--frames", "8"]) == EXIT_OK
    (d / "cfg.json").write_text(json.dumps(CFG))
    return d


def test_config_defaults_and_strictness(tmp_path, monkeypatch):
    cfg = parse_config({}, tmp_path, env={})
    assert cfg.smt.latent_dim == 64 and cfg.n_infer == 50 and cfg.train.steps == 2000 and cfg.lam == 0.1
    for bad in ({"nope": 1}, {"smt": {"bogus": 1}}, {"smt": {"seed": 3}}, {"seed": "x"}, {"train": {"steps": -1}}, {"provider": {"backend": "x"}}, {"evaluator": {"pose_dim": 3}}):
        with pytest.raises(ConfigError):
            parse_config(bad, tmp_path, env={})
    assert parse_config({"seed": 3}, tmp_path, env={"REMODIFF_SEED": "9"}).train.seed == 9
    assert parse_config({"seed": 3}, tmp_path, env={}).smt.seed == 3
    (tmp_path / "c.json").write_text("{bad json")
    with pytest.raises(ConfigError, match="byte"):
        load_config(tmp_path / "c.json")


def test_parse_weights(tmp_path):
    assert parse_weights(None).as_tuple() == (1.0, 0.0, 0.0, 0.0)
    assert parse_weights("2,-1,0,0").w1 == 2.0
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"best": {"w1": 1, "w2": 0, "w3": 0, "w4": 0}, "finetuned": None}))
    assert parse_weights(str(p)).w1 == 1


def test_usage_errors(workdir, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["build-index", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE
    (tmp_path / "c.json").write_text(json.dumps({**CFG, "dataset": "nowhere"}))
    assert main(["build-index", "--config", str(tmp_path / "c.json")]) == EXIT_USAGE
    cfg = str(workdir / "cfg.json")
    assert main(["sample", "--config", cfg, "--prompt", "a person", "--length", "4", "--weights", "1,1,0,0"]) == EXIT_USAGE


def test_data_error_exit(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "manifest.json").write_text("[{")
    (tmp_path / "c.json").write_text(json.dumps(CFG))
    assert main(["build-index", "--config", str(tmp_path / "c.json")]) == EXIT_DATA


def test_gen_synthetic_refuses_foreign_dir(tmp_path):
    (tmp_path / "keep").mkdir()
    (tmp_path / "keep" / "file.txt").write_text("x")
    assert main(["gen-synthetic", "--out", str(tmp_path / "keep")]) == EXIT_USAGE
    assert (tmp_path / "keep" / "file.txt").exists()


def test_pipeline_is_byte_reproducible(workdir):
    cfg = str(workdir / "cfg.json")
    commands = [
        ["build-index", "--config", cfg, "--lambda", "0.1"],
        ["train", "smt", "--config", cfg],
        ["train", "evaluator", "--config", cfg],
        ["sample", "--config", cfg, "--prompt", "a person walks slowly", "--length", "6", "--seed", "3", "--steps", "5"],
        ["mixture-search", "--config", cfg, "--steps", "4"],
        ["mixture-search", "--config", cfg, "--planted", "0,1", "--out", str(workdir / "out" / "planted.json")],
        ["eval", "--config", cfg, "--steps", "3"],
    ]
    for c in commands:
        assert main(c) == EXIT_OK, c
    first = digest(workdir / "out")
    for c in commands:
        assert main(c) == EXIT_OK, c
    assert digest(workdir / "out") == first
    out = workdir / "out"
    assert not any(p.name.endswith(".tmp") for p in out.iterdir())
    side = json.loads((out / "index.rmix.json").read_text())
    assert side["lambda"] == 0.1 and side["config"]["seed"] == 0 and "git" in side
    assert read_motion(out / "sample.rmdf").shape == (6, 4 + 12 * 2)
    assert json.loads((out / "planted.json").read_text())["best"]["w1"] == 0.0
    metrics = json.loads((out / "metrics.json").read_text())
    flat = [metrics["fid"], metrics["mm_dist"], metrics["diversity"], metrics["multimodality"], *metrics["r_precision"].values()]
    assert all(np.isfinite(flat)) and len(metrics["rareness"]["histogram"]) == 100
    mixture = json.loads((out / "mixture.json").read_text())
    assert len(mixture["grid"]) == 9 and mixture["finetuned"] is not None


def test_sample_seed_changes_output(workdir):
    cfg = str(workdir / "cfg.json")
    if not (workdir / "out" / "smt.rmck").exists():
        assert main(["train", "smt", "--config", cfg]) == EXIT_OK
    a, b = workdir / "a.rmdf", workdir / "b.rmdf"
    assert main(["sample", "--config", cfg, "--prompt", "a person waves", "--length", "5", "--seed", "1", "--steps", "4", "--out", str(a)]) == EXIT_OK
    assert main(["sample", "--config", cfg, "--prompt", "a person waves", "--length", "5", "--seed", "2", "--steps", "4", "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() != b.read_bytes()


def test_missing_evaluator_is_usage_error(tmp_path):
    assert main(["gen-synthetic", "--out", str(tmp_path / "data"), "--joints", "2", "--frames", "8"]) == EXIT_OK
    (tmp_path / "c.json").write_text(json.dumps(CFG))
    cfg = str(tmp_path / "c.json")
    assert main(["train", "smt", "--config", cfg]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--steps", "2"]) == EXIT_USAGE
