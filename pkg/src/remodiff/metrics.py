"""Contrastive text/motion evaluator and the metric suite computed on its features.

FID uses the symmetric form Tr((S1^1/2 S2 S1^1/2)^1/2) for the cross term,
which equals Tr((S1 S2)^1/2) and only needs eigendecompositions of symmetric
matrices.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .nn import Adam, Linear, Module, load_checkpoint, save_checkpoint
from .smt import EncoderLayer, _bias, _pad_stack, encode_token_batch, sinusoidal
from .tensor import Tensor
from .text import TextProvider

SHRINKAGE = 1e-6
N_BINS = 100
BIN_RANGE = 0.25


# --------------------------------------------------------------------------
# evaluator


@dataclass(frozen=True)
class EvaluatorConfig:
    pose_dim: int
    d_text: int = 64
    d_model: int = 32
    d_eval: int = 32
    n_motion_layers: int = 4
    n_text_layers: int = 2
    ffn_multiplier: int = 2
    margin: float = 3.0
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0


class Evaluator(Module):
    """Motion and text encoders mapping into one d_eval space."""

    def __init__(self, cfg: EvaluatorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, m = cfg.d_model, cfg.ffn_multiplier
        self.motion_in = Linear(cfg.pose_dim, d, rng)
        self.motion_layers = [EncoderLayer(d, m, rng) for _ in range(cfg.n_motion_layers)]
        self.motion_out = Linear(d, cfg.d_eval, rng)
        self.text_in = Linear(cfg.d_text, d, rng)
        self.text_layers = [EncoderLayer(d, m, rng) for _ in range(cfg.n_text_layers)]
        self.text_out = Linear(d, cfg.d_eval, rng)

    def motion_features(self, motions: list[np.ndarray]) -> Tensor:
        """(n, d_eval): masked mean over frames of the encoded sequence."""
        x, valid = _pad_stack([np.asarray(mo, dtype=np.float64) for mo in motions], self.cfg.pose_dim)
        return self.motion_features_padded(Tensor(x), valid)

    def motion_features_padded(self, x: Tensor, valid: np.ndarray) -> Tensor:
        """Same as ``motion_features`` for a padded (n, F, pose_dim) Tensor; differentiable in ``x``."""
        n, f, _ = x.shape
        d = self.cfg.d_model
        h = T.add(self.motion_in(x), Tensor(np.broadcast_to(sinusoidal(np.arange(f), d), (n, f, d)).copy()))
        bias = _bias(valid, d)
        for layer in self.motion_layers:
            h = layer(h, bias)
        weights = np.repeat((valid / valid.sum(axis=1, keepdims=True))[..., None], d, axis=-1)
        pooled = T.sum(T.mul(h, Tensor(weights)), axis=1)
        return self.motion_out(pooled)

    def text_features(self, tokens: list[np.ndarray]) -> Tensor:
        """(n, d_eval) from the last token of each encoded caption."""
        h, _ = encode_token_batch(self.text_in, self.text_layers, tokens, self.cfg.d_model)
        last = np.array([t.shape[0] - 1 for t in tokens])
        return self.text_out(h[np.arange(len(tokens)), last])

    def embed_motions(self, motions: list[np.ndarray], chunk: int = 64) -> np.ndarray:
        with T.no_grad():
            parts = [self.motion_features(motions[i : i + chunk]).data for i in range(0, len(motions), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.cfg.d_eval))

    def embed_texts(self, tokens: list[np.ndarray], chunk: int = 64) -> np.ndarray:
        with T.no_grad():
            parts = [self.text_features(tokens[i : i + chunk]).data for i in range(0, len(tokens), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.cfg.d_eval))

    def save(self, path) -> None:
        save_checkpoint(path, json.dumps(asdict(self.cfg), sort_keys=True), self.state_dict())

    @classmethod
    def load(cls, path) -> "Evaluator":
        cfg_json, state = load_checkpoint(path)
        ev = cls(EvaluatorConfig(**json.loads(cfg_json)))
        ev.load_state_dict(state)
        return ev

    def feature_fn(self):
        """Callable mapping a list of (F_i, pose_dim) Tensors to (n, d_eval) features."""

        def fn(xs: list[Tensor]) -> Tensor:
            f = max(x.shape[0] for x in xs)
            rows, valid = [], np.zeros((len(xs), f), dtype=bool)
            for i, x in enumerate(xs):
                valid[i, : x.shape[0]] = True
                if x.shape[0] < f:
                    x = T.concat([x, Tensor(np.zeros((f - x.shape[0], x.shape[1])))], axis=0)
                rows.append(T.reshape(x, (1, *x.shape)))
            return self.motion_features_padded(T.concat(rows, axis=0), valid)

        return fn


def contrastive_loss(motion: Tensor, text: Tensor, negatives: np.ndarray, margin: float) -> Tensor:
    """Matched pairs are pulled together; each motion is pushed at least ``margin``
    away from the text at index ``negatives[i]`` (entries of -1 are skipped)."""
    n, d = motion.shape
    pos = T.sum(T.square(T.sub(motion, text)), axis=1)
    keep = negatives >= 0
    loss = T.mean(pos)
    if keep.any():
        rows = np.nonzero(keep)[0]
        m_neg = T.index_select(motion, rows, axis=0)
        t_neg = T.index_select(text, negatives[rows], axis=0)
        dist = T.sqrt(T.add(T.sum(T.square(T.sub(m_neg, t_neg)), axis=1), Tensor(np.full(len(rows), 1e-12))))
        gap = T.relu(T.sub(Tensor(np.full(len(rows), margin)), dist))
        loss = T.add(loss, T.mean(T.square(gap)))
    return loss


def train_evaluator(
    motions: list[np.ndarray], captions: list[str], provider: TextProvider, cfg: EvaluatorConfig
) -> tuple[Evaluator, list[float]]:
    """Train on (normalised motion, caption) pairs; steps=0 returns the initial model."""
    if len(motions) != len(captions) or not motions:
        raise ValueError("need equally many motions and captions")
    ev = Evaluator(cfg)
    tokens = {c: provider.embed_tokens(c).matrix for c in set(captions)}
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(ev.parameters(), lr=cfg.lr)
    losses = []
    n = len(motions)
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        b = len(idx)
        shift = int(rng.integers(1, b)) if b > 1 else 0
        neg = (np.arange(b) + shift) % b
        same = np.array([captions[idx[i]] == captions[idx[j]] for i, j in enumerate(neg)])
        neg = np.where(same | (shift == 0), -1, neg)
        m = ev.motion_features([motions[i] for i in idx])
        t = ev.text_features([tokens[captions[i]] for i in idx])
        loss = contrastive_loss(m, t, neg, cfg.margin)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        losses.append(loss.item())
    return ev, losses


# --------------------------------------------------------------------------
# FID


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    n, d = feats.shape
    if n < 2:
        raise ValueError("need at least 2 samples for covariance")
    cov = np.cov(feats, rowvar=False).reshape(d, d)
    if n < d:
        warnings.warn(f"{n} samples < feature dim {d}; adding {SHRINKAGE} * I to the covariance", RuntimeWarning)
        cov = cov + SHRINKAGE * np.eye(d)
    return feats.mean(axis=0), cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    s1h = _sqrtm_psd(cov1)
    cross = np.trace(_sqrtm_psd(s1h @ cov2 @ s1h))
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)


def fid(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    real_feats, gen_feats = np.asarray(real_feats), np.asarray(gen_feats)
    if real_feats.shape[1] != gen_feats.shape[1]:
        raise ValueError(f"feature dims differ: {real_feats.shape[1]} vs {gen_feats.shape[1]}")
    return frechet_distance(*gaussian_stats(real_feats), *gaussian_stats(gen_feats))


def fid_tensor(real_feats: np.ndarray, gen: Tensor) -> Tensor:
    """FID differentiable in the generated features; the real side is constant."""
    mu1, cov1 = gaussian_stats(real_feats)
    m, d = gen.shape
    if m < 2:
        raise ValueError("need at least 2 generated samples")
    mu2 = T.mean(gen, axis=0)
    centred = T.sub(gen, T.expand(T.reshape(mu2, (1, d)), (m, d)))
    cov2 = T.scale(T.matmul(T.transpose(centred), centred), 1.0 / (m - 1))
    if m < d:
        cov2 = T.add(cov2, Tensor(SHRINKAGE * np.eye(d)))
    s1h = Tensor(_sqrtm_psd(cov1))
    cross = T.trace(T.sqrtm_psd(T.matmul(T.matmul(s1h, cov2), s1h)))
    diff = T.sub(mu2, Tensor(mu1))
    return T.add(T.sum(T.square(diff)), T.add(Tensor(np.array(np.trace(cov1))), T.sub(T.trace(cov2), T.scale(cross, 2.0))))


# --------------------------------------------------------------------------
# retrieval-style metrics


def true_text_ranks(motion: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Rank (0-based) of each motion's own text by Euclidean distance; ties go to the lower index."""
    dist = np.linalg.norm(motion[:, None, :] - text[None, :, :], axis=-1)
    own = np.diag(dist)
    idx = np.arange(len(dist))
    closer = (dist < own[:, None]).sum(axis=1)
    tied_before = ((dist == own[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return closer + tied_before


def r_precision(motion_feats, text_feats, batch: int = 32, top_k=(1, 2, 3), rng: np.random.Generator | None = None):
    """Fraction of motions whose own caption ranks within top k among ``batch`` candidates."""
    motion_feats, text_feats = np.asarray(motion_feats), np.asarray(text_feats)
    n = len(motion_feats)
    if n < batch:
        raise ValueError(f"r_precision needs at least {batch} pairs, got {n}")
    order = np.arange(n) if rng is None else rng.permutation(n)
    ranks = []
    for start in range(0, n - batch + 1, batch):
        sel = order[start : start + batch]
        ranks.append(true_text_ranks(motion_feats[sel], text_feats[sel]))
    ranks = np.concatenate(ranks)
    return tuple(float(np.mean(ranks < k)) for k in top_k)


def mm_dist(motion_feats, text_feats) -> float:
    motion_feats, text_feats = np.asarray(motion_feats), np.asarray(text_feats)
    if len(motion_feats) == 0:
        raise ValueError("mm_dist of no pairs")
    return float(np.mean(np.linalg.norm(motion_feats - text_feats, axis=1)))


def diversity(feats, n_pairs: int = 300, rng: np.random.Generator | None = None) -> float:
    """Mean distance over ``n_pairs`` random pairs of distinct samples."""
    feats = np.asarray(feats)
    n = len(feats)
    if n < 2:
        raise ValueError("diversity needs at least 2 features")
    rng = np.random.default_rng(0) if rng is None else rng
    i = rng.integers(n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return float(np.mean(np.linalg.norm(feats[i] - feats[j], axis=1)))


def multimodality(per_prompt: dict[str, np.ndarray], reps: int = 10, rng: np.random.Generator | None = None) -> float:
    """Mean within-prompt pairwise distance, averaged over prompts.

    With at most ``reps`` distinct pairs all of them are used; otherwise
    ``reps`` random distinct pairs.
    """
    if not per_prompt:
        raise ValueError("multimodality of no prompts")
    rng = np.random.default_rng(0) if rng is None else rng
    means = []
    for prompt in sorted(per_prompt):
        feats = np.asarray(per_prompt[prompt])
        g = len(feats)
        if g < 2:
            raise T.ContractError(f"prompt {prompt!r} has {g} generation(s); need >= 2")
        if g * (g - 1) // 2 <= reps:
            i, j = np.triu_indices(g, 1)
        else:
            i = rng.integers(g, size=reps)
            j = (i + rng.integers(1, g, size=reps)) % g
        means.append(np.mean(np.linalg.norm(feats[i] - feats[j], axis=1)))
    return float(np.mean(means))


# --------------------------------------------------------------------------
# rareness and stratified MM Dist


@dataclass(frozen=True)
class RarenessRecord:
    prompt: str
    r_p: float
    quantile: float | None = None


def rareness_from_embeddings(query: np.ndarray, corpus: np.ndarray) -> float:
    """1 - max cosine (cosines clipped to [-1, 1], so r_p lies in [0, 2])."""
    if len(corpus) == 0:
        raise ValueError("rareness needs a non-empty training caption set")
    cos = np.clip((corpus * query).sum(axis=-1), -1.0, 1.0)
    return float(1.0 - cos.max())


def rareness(prompt: str, train_prompts: list[str], provider: TextProvider) -> RarenessRecord:
    corpus = np.stack([provider.embed_sentence(c).vector for c in train_prompts]) if train_prompts else np.zeros((0, 1))
    return RarenessRecord(prompt, rareness_from_embeddings(provider.embed_sentence(prompt).vector, corpus))


def rareness_records(prompts: list[str], train_prompts: list[str], provider: TextProvider) -> list[RarenessRecord]:
    """Rareness of several prompts with their quantile among the set."""
    corpus = np.stack([provider.embed_sentence(c).vector for c in train_prompts])
    rs = [rareness_from_embeddings(provider.embed_sentence(p).vector, corpus) for p in prompts]
    order = np.argsort(rs, kind="stable")
    q = np.empty(len(rs))
    q[order] = (np.arange(len(rs)) + 1) / len(rs)
    return [RarenessRecord(p, r, float(qi)) for p, r, qi in zip(prompts, rs, q)]


def bin_index(r: float, n_bins: int = N_BINS, r_range: float = BIN_RANGE) -> int:
    """Equal-width bin over [0, r_range]; the top edge is closed and values past it clamp to the last bin."""
    return int(min(max(math.floor(n_bins * r / r_range), 0), n_bins - 1))


def stratified_mm(records, tail: float = 0.05, n_bins: int = N_BINS, r_range: float = BIN_RANGE):
    """(tail_mm, balanced_mm, histogram) from (r_p, value) or (r_p, value, prompt) records."""
    recs = [(float(r[0]), float(r[1]), str(r[2]) if len(r) > 2 else "") for r in records]
    if not recs:
        raise ValueError("stratified_mm of no records")
    recs.sort(key=lambda r: (r[0], r[2]))
    count = math.ceil(len(recs) * tail)
    tail_mm = float(np.mean([v for _, v, _ in recs[-count:]]))
    sums = np.zeros(n_bins)
    hist = np.zeros(n_bins, dtype=int)
    for r, v, _ in recs:
        b = bin_index(r, n_bins, r_range)
        sums[b] += v
        hist[b] += 1
    filled = hist > 0
    balanced = float(np.mean(sums[filled] / hist[filled]))
    return tail_mm, balanced, hist.tolist()


# --------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    fid: float
    r_precision: tuple[float, float, float]
    mm_dist: float
    diversity: float
    multimodality: float | None = None
    rareness: dict | None = field(default=None)

    def __post_init__(self):
        vals = [self.fid, *self.r_precision, self.mm_dist, self.diversity]
        if self.multimodality is not None:
            vals.append(self.multimodality)
        if not all(np.isfinite(vals)):
            raise FloatingPointError(f"non-finite metric in report: {vals}")

    def to_json(self) -> str:
        d = asdict(self)
        d["r_precision"] = {f"top{k}": v for k, v in zip((1, 2, 3), self.r_precision)}
        return json.dumps(d, indent=2, sort_keys=True)


def histogram_bars(hist: list[int], width: int = 40) -> str:
    """Plain-text bar plot of non-empty bins."""
    top = max(hist) if hist and max(hist) > 0 else 1
    lines = []
    for i, c in enumerate(hist):
        if c:
            lo = i * BIN_RANGE / len(hist)
            lines.append(f"{lo:6.4f} | {'#' * max(1, round(width * c / top))} {c}")
    return "\n".join(lines)
