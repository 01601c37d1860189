"""Strictly validated JSON run configuration.

Schema (every key optional, unknown keys rejected)::

    {
      "dataset": "data/train",            # relative paths resolve against the config file
      "output_dir": "out",
      "seed": 0,                          # REMODIFF_SEED overrides; feeds every RNG below
      "lambda": 0.1, "k": 2, "n_infer": 50,
      "provider":  {"backend", "seed", "d_text", "fixture_path", "endpoint"},
      "smt":       SmtConfig fields except seed and k,
      "schedule":  {"T", "beta_start", "beta_end"},
      "train":     TrainConfig fields except seed,
      "evaluator": EvaluatorConfig fields except pose_dim, d_text and seed,
      "mixture":   {"eval_size", "grid_lo", "grid_hi", "grid_step", "n_tail", "finetune_steps", "finetune_lr"}
    }
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import TrainConfig
from .metrics import EvaluatorConfig
from .smt import SmtConfig
from .text import ProviderConfig

SEED_ENV = "REMODIFF_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000  # noqa: N815
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class MixtureConfig:
    eval_size: int = 64
    grid_lo: float = -5.0
    grid_hi: float = 5.0
    grid_step: float = 0.5
    n_tail: int = 10
    finetune_steps: int = 1000
    finetune_lr: float = 0.05

    def __post_init__(self):
        if self.eval_size < 2 or self.grid_step <= 0 or self.grid_hi < self.grid_lo or self.n_tail < 1 or self.finetune_steps < 0:
            raise ValueError("invalid mixture configuration")


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "data"
    output_dir: str = "out"
    seed: int = 0
    lam: float = 0.1
    k: int = 2
    n_infer: int = 50
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    smt: SmtConfig = field(default_factory=SmtConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluator: dict = field(default_factory=dict)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)

    def evaluator_config(self, pose_dim: int) -> EvaluatorConfig:
        return EvaluatorConfig(pose_dim=pose_dim, d_text=self.provider.d_text, seed=self.seed, **self.evaluator)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


_TOP = {"dataset", "output_dir", "seed", "lambda", "k", "n_infer", "provider", "smt", "schedule", "train", "evaluator", "mixture"}


def _section(name: str, obj, cls, forbidden=(), **fixed):
    if not isinstance(obj, dict):
        raise ConfigError(f"{name}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)} - set(forbidden) - set(fixed)
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {unknown}; allowed {sorted(allowed)}")
    try:
        return cls(**obj, **fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def _typed(name: str, value, kind):
    ok = isinstance(value, kind) and not (kind is not bool and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{name}: expected {kind.__name__ if isinstance(kind, type) else kind}, got {value!r}")
    return value


def parse_config(obj: dict, base_dir: str | Path = ".", env: dict | None = None) -> RunConfig:
    """Validate a decoded config object; paths are resolved against ``base_dir``."""
    env = os.environ if env is None else env
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - _TOP)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed {sorted(_TOP)}")
    seed = _typed("seed", obj.get("seed", 0), int)
    if SEED_ENV in env:
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    k = _typed("k", obj.get("k", 2), int)
    lam = float(_typed("lambda", obj.get("lambda", 0.1), (int, float)))
    n_infer = _typed("n_infer", obj.get("n_infer", 50), int)
    if k < 1 or lam < 0 or n_infer < 1:
        raise ConfigError("need k >= 1, lambda >= 0, n_infer >= 1")
    base = Path(base_dir)
    provider = _section("provider", obj.get("provider", {}), ProviderConfig)
    if provider.fixture_path is not None:
        provider = dataclasses.replace(provider, fixture_path=str(base / provider.fixture_path))
    try:
        provider.validate()
    except ValueError as exc:
        raise ConfigError(f"provider: {exc}") from exc
    smt = _section("smt", {"d_text": provider.d_text, **obj.get("smt", {})}, SmtConfig, seed=seed, k=k)
    if smt.d_text != provider.d_text:
        raise ConfigError(f"smt.d_text={smt.d_text} differs from provider.d_text={provider.d_text}")
    ev = obj.get("evaluator", {})
    _section("evaluator", ev, EvaluatorConfig, pose_dim=smt.pose_dim, d_text=provider.d_text, seed=seed)
    return RunConfig(
        dataset=str(base / _typed("dataset", obj.get("dataset", "data"), str)),
        output_dir=str(base / _typed("output_dir", obj.get("output_dir", "out"), str)),
        seed=seed,
        lam=lam,
        k=k,
        n_infer=n_infer,
        provider=provider,
        smt=smt,
        schedule=_section("schedule", obj.get("schedule", {}), ScheduleConfig),
        train=_section("train", obj.get("train", {}), TrainConfig, seed=seed),
        evaluator=dict(ev),
        mixture=_section("mixture", obj.get("mixture", {}), MixtureConfig),
    )


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    p = Path(path)
    try:
        obj = json.loads(p.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {p} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at byte {exc.pos}") from exc
    return parse_config(obj, p.parent, env)
