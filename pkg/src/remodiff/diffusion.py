"""DDPM schedule, x_0-parameterised training objective and respaced sampling.

Timesteps run 1..T; ``alpha_bar(0) = 1`` by convention so the final sampling
step lands on t_prev = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

import numpy as np

from . import tensor as T
from .conditioning import ConditionBuilder
from .motion import MotionSequence, denormalize_frames, normalize_frames
from .nn import Adam
from .smt import Conditions, apply_condition_mask
from .tensor import Tensor

POSTERIORS = ("standard", "literal")


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = self.betas
        if b.ndim != 1 or b.size < 1 or not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must be a non-empty vector in (0, 1)")

    @property
    def T(self) -> int:  # noqa: N802
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """alpha_bar[t - 1] for t = 1..T."""
        return np.cumprod(self.alphas)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 0..{self.T}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:  # noqa: N803
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start < beta_end < 1:
        raise ValueError("need 0 < beta_start < beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T))


@dataclass(frozen=True)
class RespacedSchedule:
    """A strictly increasing subset of timesteps with recomputed betas."""

    base: DiffusionSchedule
    kept: np.ndarray
    betas: np.ndarray

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.array([self.base.alpha_bar_at(int(t)) for t in self.kept])

    def cumulative_alpha_bar(self) -> np.ndarray:
        """Running product of the recomputed alphas."""
        return np.cumprod(1.0 - self.betas)

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) for each sampling step, from most to least noisy."""
        prev = np.concatenate([[0], self.kept[:-1]])
        return [(int(t), int(p)) for t, p in zip(self.kept[::-1], prev[::-1])]


def respace(schedule: DiffusionSchedule, n_infer: int = 50) -> RespacedSchedule:
    """Uniform-stride subset of 1..T that always keeps T."""
    if not 1 <= n_infer <= schedule.T:
        raise ValueError(f"n_infer must lie in 1..{schedule.T}")
    kept = np.unique(np.round(np.linspace(1, schedule.T, n_infer)).astype(int))
    if n_infer == 1:
        kept = np.array([schedule.T])
    ab = np.array([schedule.alpha_bar_at(int(t)) for t in kept])
    prev = np.concatenate([[1.0], ab[:-1]])
    return RespacedSchedule(schedule, kept, 1.0 - ab / prev)


def q_sample(x0, t: int, eps, schedule: DiffusionSchedule):
    if not 1 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside 1..{schedule.T}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def posterior_mean(x_t, s_hat, t: int, t_prev: int, schedule: DiffusionSchedule, posterior: str = "standard"):
    """Mean of x_{t_prev} given x_t and an x_0 estimate; works on arrays and Tensors."""
    ab_t, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    if posterior == "standard":
        beta = 1.0 - ab_t / ab_prev
        c_s = np.sqrt(ab_prev) * beta / (1.0 - ab_t)
        c_x = np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab_t)
        return s_hat * c_s + x_t * c_x
    if posterior == "literal":
        # mu = sqrt(ab) S + sqrt(1 - ab) eps_theta, eps_theta = (x / sqrt(ab) - S) sqrt(1/ab - 1)
        eps_theta = (x_t * (1.0 / np.sqrt(ab_t)) - s_hat) * np.sqrt(1.0 / ab_t - 1.0)
        return s_hat * np.sqrt(ab_t) + eps_theta * np.sqrt(1.0 - ab_t)
    raise ValueError(f"unknown posterior {posterior!r}; choose from {POSTERIORS}")


def p_sample_step(
    x_t,
    t: int,
    t_prev: int,
    s_hat,
    schedule: DiffusionSchedule,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
    posterior: str = "standard",
):
    """One ancestral step t -> t_prev with variance beta_hat; no noise when t_prev = 0.

    Noise comes from ``noise`` if given, else from ``rng``; with neither the
    step returns the posterior mean.
    """
    if not 0 <= t_prev < t <= schedule.T:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    mean = posterior_mean(x_t, s_hat, t, t_prev, schedule, posterior)
    if t_prev == 0:
        return mean
    if noise is None:
        if rng is None:
            return mean
        noise = rng.standard_normal(np.shape(x_t.data if isinstance(x_t, Tensor) else x_t))
    ab_t, ab_prev = schedule.alpha_bar_at(t), schedule.alpha_bar_at(t_prev)
    sigma = np.sqrt(1.0 - ab_t / ab_prev)
    return mean + Tensor(sigma * noise) if isinstance(mean, Tensor) else mean + sigma * noise


# --------------------------------------------------------------------------
# condition mixture


@dataclass(frozen=True)
class MixtureWeights:
    """Coefficients of (S_rt, S_t, S_r, S_none); must sum to one."""

    w1: float
    w2: float
    w3: float
    w4: float

    def __post_init__(self):
        total = self.w1 + self.w2 + self.w3 + self.w4
        if not np.isfinite(total) or abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {total!r}")

    @classmethod
    def from_free(cls, w1: float, w2: float, w3: float) -> "MixtureWeights":
        return cls(w1, w2, w3, 1.0 - w1 - w2 - w3)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def to_dict(self) -> dict:
        return {"w1": self.w1, "w2": self.w2, "w3": self.w3, "w4": self.w4}


SUBSETS = ((True, True), (True, False), (False, True), (False, False))


class Denoiser(Protocol):
    def prepare(self, cond: Conditions) -> Any: ...

    def denoise(self, x_t, t: int, prep: Any, text: bool = True, retr: bool = True) -> Tensor: ...


def classifier_free_estimates(model: Denoiser, x_t, t: int, cond: Conditions, prep=None, needed=(True, True, True, True)):
    """(S_rt, S_t, S_r, S_none); entries not ``needed`` are None."""
    prep = model.prepare(cond) if prep is None else prep
    x = T.as_tensor(x_t)
    return tuple(model.denoise(x, t, prep, text, retr) if want else None for (text, retr), want in zip(SUBSETS, needed))


def mix_estimates(estimates, w: MixtureWeights):
    if not isinstance(w, MixtureWeights):
        raise TypeError("weights must be MixtureWeights")
    out = None
    for wi, est in zip(w.as_tuple(), estimates):
        if wi == 0.0:
            continue
        if est is None:
            raise ValueError("estimate with non-zero weight is missing")
        term = est * wi
        out = term if out is None else out + term
    return out


def _data(x):
    return x.data if isinstance(x, Tensor) else x


@dataclass(frozen=True)
class SampleResult:
    frames: np.ndarray
    normalized: np.ndarray
    retrieved_ids: list[str]


def sample(
    model,
    builder: ConditionBuilder,
    prompt: str,
    length: int,
    schedule: DiffusionSchedule,
    n_infer: int = 50,
    weights: MixtureWeights = MixtureWeights(1.0, 0.0, 0.0, 0.0),
    seed: int = 0,
    posterior: str = "standard",
    exclude: frozenset[str] = frozenset(),
) -> SampleResult:
    """Retrieve once, then run the respaced ancestral sampler from x_T ~ N(0, I).

    ``exclude`` drops database motions from retrieval, e.g. a training
    sequence when its own caption is used as the prompt (leave-one-out, the
    same protocol as training).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    cond, result = builder.build(prompt, length, exclude=frozenset(exclude))
    needed = tuple(wi != 0.0 for wi in weights.as_tuple())
    if (needed[0] or needed[2]) and not cond.has_retr:
        raise ValueError("weights use the retrieval condition but no index is available")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((length, builder.stats.dim))
    with T.no_grad():
        prep = model.prepare(cond)
        for t, t_prev in respace(schedule, n_infer).pairs():
            ests = classifier_free_estimates(model, x, t, cond, prep, needed)
            s_hat = mix_estimates(tuple(None if e is None else e.data for e in ests), weights)
            x = p_sample_step(x, t, t_prev, s_hat, schedule, rng, posterior=posterior)
    return SampleResult(denormalize_frames(x, builder.stats), x, [] if result is None else result.ids)


# --------------------------------------------------------------------------
# training


def training_loss(
    model,
    x0: np.ndarray,
    conds: list[Conditions],
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    frame_valid: np.ndarray | None = None,
    p_text: float = 0.1,
    p_retr: float = 0.1,
) -> Tensor:
    """Masked MSE between x_0 and the model's estimate at t ~ U{1..T}.

    ``x0`` is (B, F, D); the model must expose ``forward_batch``.
    """
    b, f, d = x0.shape
    valid = np.ones((b, f), dtype=bool) if frame_valid is None else frame_valid
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    ab = schedule.alpha_bar[t - 1][:, None, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    masked = [apply_condition_mask(c, rng, p_text, p_retr) for c in conds]
    s = model.forward_batch(Tensor(x_t), t, masked, None if frame_valid is None else valid)
    weight = np.repeat(valid[..., None], d, axis=-1) / (valid.sum() * d)
    return T.sum(T.mul(T.square(T.sub(s, Tensor(x0))), Tensor(weight)))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    p_text: float = 0.1
    p_retr: float = 0.1
    use_retrieval: bool = True
    exclude_same_caption: bool = False  # also hide other sequences sharing the caption
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("invalid training configuration")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    probe_before: float = float("nan")
    probe_after: float = float("nan")


@dataclass(frozen=True)
class _Item:
    x0: np.ndarray
    cond: Conditions


def _items(
    model, sequences: list[MotionSequence], builder: ConditionBuilder, use_retrieval: bool, exclude_same_caption: bool = False
) -> list[list[_Item]]:
    """Per sequence, one item per caption; retrieval excludes the sequence itself.

    With ``exclude_same_caption`` every sequence carrying the caption is hidden,
    so training retrieval looks like retrieval for an unseen prompt.
    """
    max_f = model.cfg.max_frames
    by_caption: dict[str, set[str]] = {}
    for seq in sequences:
        for caption in seq.captions:
            by_caption.setdefault(caption, set()).add(seq.id)
    out = []
    for seq in sorted(sequences, key=lambda s: s.id):
        x0 = normalize_frames(seq.frames[:max_f], builder.stats)
        caps = []
        for caption in seq.captions:
            hidden = by_caption[caption] if exclude_same_caption else {seq.id}
            cond, _ = builder.build(caption, x0.shape[0], exclude=frozenset(hidden), retr=use_retrieval)
            caps.append(_Item(x0, cond))
        out.append(caps)
    return out


def _collate(items: list[_Item]) -> tuple[np.ndarray, np.ndarray | None]:
    f = max(it.x0.shape[0] for it in items)
    x0 = np.zeros((len(items), f, items[0].x0.shape[1]))
    valid = np.zeros((len(items), f), dtype=bool)
    for i, it in enumerate(items):
        x0[i, : it.x0.shape[0]] = it.x0
        valid[i, : it.x0.shape[0]] = True
    return x0, None if valid.all() else valid


def probe_loss(model, items: list[_Item], schedule: DiffusionSchedule, seed: int = 12345) -> float:
    """Loss on a fixed batch with fixed t and noise and no condition dropout."""
    x0, valid = _collate(items)
    with T.no_grad():
        loss = training_loss(model, x0, [it.cond for it in items], schedule, np.random.default_rng(seed), valid, 0.0, 0.0)
    return loss.item()


def train(
    model,
    sequences: list[MotionSequence],
    builder: ConditionBuilder,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    callback: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Adam on the masked x_0 objective; retrieval may be disabled for a text-only baseline."""
    grouped = _items(model, sequences, builder, cfg.use_retrieval, cfg.exclude_same_caption)
    probe = [caps[0] for caps in grouped]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr)
    report = TrainReport(probe_before=probe_loss(model, probe, schedule))
    for step in range(cfg.steps):
        picks = rng.integers(len(grouped), size=cfg.batch_size)
        batch = [grouped[i][int(rng.integers(len(grouped[i])))] for i in picks]
        x0, valid = _collate(batch)
        loss = training_loss(model, x0, [it.cond for it in batch], schedule, rng, valid, cfg.p_text, cfg.p_retr)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite loss at step {step}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        report.losses.append(loss.item())
        if callback is not None:
            callback(step, loss.item())
    report.probe_after = probe_loss(model, probe, schedule)
    return report
