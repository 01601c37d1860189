"""Semantics-modulated transformer (SMT) denoiser.

The denoiser predicts the clean motion x_0 from a noised motion x_t, a
timestep t and two optional conditions:

* text: prompt token features, refined by a small transformer encoder;
* retr: k retrieved (motion, caption) pairs.  Motions pass through a timed
  encoder and are downsampled by ``stride`` (R^m); each caption contributes
  the encoder feature of its last token (R^t).

Each decoder layer is a semantics-modulated attention (SMA) block followed by
an FFN, both closed by a stylization block that injects the timestep.  In
SMA the queries come from the motion features alone, while

    K = [f ; f_prompt ; fuse(R^m, R^t)]      V = [f ; f_prompt ; R^m]

and attention is the linear (efficient) form.  An absent condition simply
drops its rows from K and V.

Everything is batched over a leading axis; padding is handled with key
masks so a batch of one with no padding evaluates exactly the unpadded rows.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .motion import pose_dim
from .nn import LayerNorm, Linear, Module, load_checkpoint, save_checkpoint
from .tensor import Tensor

MASK_NEG = -1e9


@dataclass(frozen=True)
class SmtConfig:
    n_joints: int = 4
    latent_dim: int = 64
    n_decoder_layers: int = 2
    n_retr_encoder_layers: int = 4
    n_prompt_layers: int = 2
    ffn_multiplier: int = 2
    k: int = 2
    stride: int = 4
    max_frames: int = 32
    d_text: int = 64
    zero_init_style: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("n_joints", "latent_dim", "n_decoder_layers", "ffn_multiplier", "k", "stride", "max_frames", "d_text"):
            if getattr(self, name) < 1:
                raise ValueError(f"SmtConfig.{name} must be positive")
        if self.n_retr_encoder_layers < 0 or self.n_prompt_layers < 0:
            raise ValueError("layer counts must be non-negative")

    @property
    def pose_dim(self) -> int:
        return pose_dim(self.n_joints)


# --------------------------------------------------------------------------
# conditions


@dataclass(frozen=True)
class Conditions:
    """Raw conditioning inputs for one example; ``None`` means ABSENT.

    ``retr_motions`` and ``retr_texts`` are jointly present or absent: the
    retrieved motions (normalised, F_j x D_pose) and their caption token
    features (n_j x d_text).
    """

    text: np.ndarray | None = None
    retr_motions: tuple[np.ndarray, ...] | None = None
    retr_texts: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if (self.retr_motions is None) != (self.retr_texts is None):
            raise ValueError("retrieved motions and texts must be jointly present or absent")
        if self.retr_motions is not None:
            if len(self.retr_motions) == 0:
                raise ValueError("retr condition marked present with no samples")
            if len(self.retr_motions) != len(self.retr_texts):
                raise ValueError("one caption per retrieved motion required")

    @property
    def has_text(self) -> bool:
        return self.text is not None

    @property
    def has_retr(self) -> bool:
        return self.retr_motions is not None

    def subset(self, text: bool, retr: bool) -> "Conditions":
        return Conditions(
            self.text if text else None,
            self.retr_motions if retr else None,
            self.retr_texts if retr else None,
        )


def apply_condition_mask(cond: Conditions, rng: np.random.Generator, p_text: float = 0.1, p_retr: float = 0.1) -> Conditions:
    """Independently drop the text / retrieval condition with the given rates.

    Two uniforms are always drawn, so RNG consumption does not depend on the
    input.
    """
    if not (0.0 <= p_text <= 1.0 and 0.0 <= p_retr <= 1.0):
        raise ValueError("mask probabilities must lie in [0, 1]")
    u_text, u_retr = rng.random(2)
    return cond.subset(text=cond.has_text and u_text >= p_text, retr=cond.has_retr and u_retr >= p_retr)


# --------------------------------------------------------------------------
# helpers


def sinusoidal(positions: np.ndarray, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = positions[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


def _bias(valid: np.ndarray, d: int) -> np.ndarray | None:
    """Additive key bias (B, m, d) for a (B, m) validity mask; None if all valid."""
    if valid.all():
        return None
    return np.repeat(np.where(valid, 0.0, MASK_NEG)[..., None], d, axis=-1)


def _cat_bias(parts: list[tuple[int, np.ndarray | None]], batch: int, d: int) -> Tensor | None:
    if all(b is None for _, b in parts):
        return None
    blocks = [np.zeros((batch, n, d)) if b is None else b for n, b in parts]
    return Tensor(np.concatenate(blocks, axis=1))


def _pad_stack(mats: list[np.ndarray], width: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length row blocks into (N, n_max, width) plus validity."""
    n_max = max(m.shape[0] for m in mats)
    out = np.zeros((len(mats), n_max, width))
    valid = np.zeros((len(mats), n_max), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        valid[i, : m.shape[0]] = True
    return out, valid


# --------------------------------------------------------------------------
# layers


class StylizationBlock(Module):
    """Residual timestep injection: Y = R + W_out silu(LN(X) * (1 + scale) + shift).

    ``scale`` and ``shift`` are per-channel projections of the timestep
    embedding; R defaults to X.  With a zero ``W_out`` the block is the
    identity on R.
    """

    def __init__(self, d: int, rng: np.random.Generator, zero: bool = True):
        self.d = d
        self.emb_proj = Linear(d, 2 * d, rng)
        self.norm = LayerNorm(d)
        self.out = Linear(d, d, rng, zero=zero)

    def __call__(self, x: Tensor, emb: Tensor, residual: Tensor | None = None) -> Tensor:
        b, n, d = x.shape
        e = self.emb_proj(T.silu(emb))
        scale = T.expand(T.reshape(e[:, :d], (b, 1, d)), (b, n, d))
        shift = T.expand(T.reshape(e[:, d:], (b, 1, d)), (b, n, d))
        h = T.add(T.mul(self.norm(x), T.add(scale, Tensor(np.ones((b, n, d))))), shift)
        return T.add(x if residual is None else residual, self.out(T.silu(h)))


@dataclass
class Context:
    """Encoded conditions for a batch, ready to be appended to K and V."""

    prompt: Tensor | None = None
    prompt_bias: np.ndarray | None = None
    retr_key: Tensor | None = None
    retr_value: Tensor | None = None
    retr_bias: np.ndarray | None = None


class SMALayer(Module):
    def __init__(self, d: int, rng: np.random.Generator, zero: bool = True):
        self.d = d
        self.norm = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.text_norm = LayerNorm(d)
        self.k_text = Linear(d, d, rng)
        self.v_text = Linear(d, d, rng)
        self.retr_norm = LayerNorm(d)
        self.k_retr = Linear(d, d, rng)
        self.v_retr = Linear(d, d, rng)
        self.style = StylizationBlock(d, rng, zero)

    def keys_values(self, f: Tensor, self_bias: np.ndarray | None, ctx: Context | None):
        """Query, key, value and key-bias tensors; keys and values share row order."""
        h = self.norm(f)
        q, ks, vs = self.q(h), [self.k(h)], [self.v(h)]
        parts = [(f.shape[1], self_bias)]
        if ctx is not None and ctx.prompt is not None:
            p = self.text_norm(ctx.prompt)
            ks.append(self.k_text(p))
            vs.append(self.v_text(p))
            parts.append((ctx.prompt.shape[1], ctx.prompt_bias))
        if ctx is not None and ctx.retr_key is not None:
            ks.append(self.k_retr(self.retr_norm(ctx.retr_key)))
            vs.append(self.v_retr(self.retr_norm(ctx.retr_value)))
            parts.append((ctx.retr_key.shape[1], ctx.retr_bias))
        key, value = T.concat(ks, axis=1), T.concat(vs, axis=1)
        if key.shape[1] != value.shape[1]:
            raise T.ContractError(f"SMA: K has {key.shape[1]} rows, V has {value.shape[1]}")
        return q, key, value, _cat_bias(parts, f.shape[0], self.d)

    def __call__(self, f: Tensor, emb: Tensor, self_bias: np.ndarray | None = None, ctx: Context | None = None) -> Tensor:
        q, key, value, bias = self.keys_values(f, self_bias, ctx)
        h = T.linear_attention(q, key, value, key_bias=bias)
        return self.style(h, emb, residual=f)


class FFNLayer(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, zero: bool = True):
        self.norm = LayerNorm(d)
        self.w1 = Linear(d, d * mult, rng)
        self.w2 = Linear(d * mult, d, rng)
        self.style = StylizationBlock(d, rng, zero)

    def __call__(self, f: Tensor, emb: Tensor) -> Tensor:
        h = self.w2(T.gelu(self.w1(self.norm(f))))
        return self.style(h, emb, residual=f)


class DecoderLayer(Module):
    def __init__(self, d: int, mult: int, rng: np.random.Generator, zero: bool = True):
        self.sma = SMALayer(d, rng, zero)
        self.ffn = FFNLayer(d, mult, rng, zero)

    def __call__(self, f, emb, self_bias=None, ctx=None):
        return self.ffn(self.sma(f, emb, self_bias, ctx), emb)


class EncoderLayer(Module):
    """Pre-norm self-attention + FFN block without timestep input."""

    def __init__(self, d: int, mult: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.w1 = Linear(d, d * mult, rng)
        self.w2 = Linear(d * mult, d, rng)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        a = T.linear_attention(self.q(h), self.k(h), self.v(h), None if key_bias is None else Tensor(key_bias))
        x = T.add(x, self.o(a))
        return T.add(x, self.w2(T.gelu(self.w1(self.norm2(x)))))


def encode_token_batch(proj: Linear, layers: list[EncoderLayer], mats: list[np.ndarray], d: int):
    """Project, position-encode and run ``layers`` over padded token matrices."""
    tokens, valid = _pad_stack(mats, mats[0].shape[1])
    n = tokens.shape[1]
    h = T.add(proj(Tensor(tokens)), Tensor(np.broadcast_to(sinusoidal(np.arange(n), d), (len(mats), n, d)).copy()))
    bias = _bias(valid, d)
    for layer in layers:
        h = layer(h, bias)
    return h, valid


# --------------------------------------------------------------------------
# model


@dataclass
class Prepared:
    """Timestep-independent encodings for a batch of conditions."""

    batch: int
    prompt: Tensor | None = None
    prompt_valid: np.ndarray | None = None
    retr_text: Tensor | None = None  # (B*k, D)
    retr_motions: np.ndarray | None = None  # (B*k, Fr, Dp)
    retr_frame_valid: np.ndarray | None = None  # (B*k, Fr)
    retr_lengths: np.ndarray | None = None  # (B*k,)
    retr_present: np.ndarray | None = None  # (B*k,) bool
    k: int = 0

    def without(self, text: bool = True, retr: bool = True) -> "Prepared":
        """Keep only the requested conditions (rows of dropped ones vanish)."""
        out = replace(self)
        if not text:
            out.prompt = out.prompt_valid = None
        if not retr:
            out.retr_text = out.retr_motions = out.retr_frame_valid = None
            out.retr_lengths = out.retr_present = None
            out.k = 0
        return out


class SMT(Module):
    def __init__(self, cfg: SmtConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, dp, mult, z = cfg.latent_dim, cfg.pose_dim, cfg.ffn_multiplier, cfg.zero_init_style
        self.in_proj = Linear(dp, d, rng)
        self.time1 = Linear(d, d, rng)
        self.time2 = Linear(d, d, rng)
        self.text_proj = Linear(cfg.d_text, d, rng)
        self.prompt_layers = [EncoderLayer(d, mult, rng) for _ in range(cfg.n_prompt_layers)]
        self.retr_text_proj = Linear(d, d, rng)
        self.retr_in = Linear(dp, d, rng)
        self.retr_layers = [DecoderLayer(d, mult, rng, z) for _ in range(cfg.n_retr_encoder_layers)]
        self.fuse = Linear(2 * d, d, rng)
        self.layers = [DecoderLayer(d, mult, rng, z) for _ in range(cfg.n_decoder_layers)]
        self.out = Linear(d, dp, rng)

    # -- pieces ---------------------------------------------------------

    def timestep_embedding(self, t) -> Tensor:
        """Sinusoid of t through a two-layer MLP: (D,) for scalar t, else (B, D)."""
        scalar = np.ndim(t) == 0
        base = Tensor(sinusoidal(np.atleast_1d(np.asarray(t, dtype=np.float64)), self.cfg.latent_dim))
        emb = self.time2(T.silu(self.time1(base)))
        return emb[0] if scalar else emb

    def encode_prompts(self, mats: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
        return encode_token_batch(self.text_proj, self.prompt_layers, mats, self.cfg.latent_dim)

    def encode_prompt(self, tokens: np.ndarray) -> Tensor:
        """n_tok x D features for a single prompt."""
        h, _ = self.encode_prompts([np.asarray(tokens, dtype=np.float64)])
        return h[0]

    def _last_token(self, mats: list[np.ndarray]) -> Tensor:
        h, _ = self.encode_prompts(mats)
        last = np.array([m.shape[0] - 1 for m in mats])
        return self.retr_text_proj(h[np.arange(len(mats)), last])

    def prepare(self, conds: list[Conditions] | Conditions) -> Prepared:
        if isinstance(conds, Conditions):
            conds = [conds]
        b, d, dp = len(conds), self.cfg.latent_dim, self.cfg.pose_dim
        prep = Prepared(batch=b)
        texted = [c.text for c in conds if c.has_text]
        if texted:
            width = texted[0].shape[1]
            mats = [c.text if c.has_text else np.zeros((1, width)) for c in conds]
            prep.prompt, valid = self.encode_prompts(mats)
            for i, c in enumerate(conds):
                if not c.has_text:
                    valid[i] = False
            prep.prompt_valid = valid
        with_retr = [c for c in conds if c.has_retr]
        if with_retr:
            k = max(len(c.retr_motions) for c in with_retr)
            width = with_retr[0].retr_texts[0].shape[1]
            motions, texts, present, lengths = [], [], [], []
            for c in conds:
                for j in range(k):
                    ok = c.has_retr and j < len(c.retr_motions)
                    motions.append(c.retr_motions[j] if ok else np.zeros((1, dp)))
                    texts.append(c.retr_texts[j] if ok else np.zeros((1, width)))
                    present.append(ok)
                    lengths.append(c.retr_motions[j].shape[0] if ok else 1)
            prep.retr_motions, prep.retr_frame_valid = _pad_stack(motions, dp)
            prep.retr_text = self._last_token(texts)
            prep.retr_present = np.array(present)
            prep.retr_lengths = np.array(lengths)
            prep.k = k
        return prep

    def encode_retrieval(self, prep: Prepared, emb: Tensor) -> tuple[Tensor, Tensor, np.ndarray]:
        """R^m (B, k*F', D), the fused key source (same shape) and row validity."""
        cfg = self.cfg
        d, b, k = cfg.latent_dim, prep.batch, prep.k
        motions = prep.retr_motions
        n, fr, _ = motions.shape
        h = T.add(self.retr_in(Tensor(motions)), Tensor(np.broadcast_to(sinusoidal(np.arange(fr), d), (n, fr, d)).copy()))
        emb_rep = T.index_select(emb, np.repeat(np.arange(b), k), axis=0)
        bias = _bias(prep.retr_frame_valid, d)
        for layer in self.retr_layers:
            h = layer(h, emb_rep, bias, None)
        idx = np.arange(0, fr, cfg.stride)
        rm = T.index_select(h, idx, axis=1)
        fp = len(idx)
        valid = (idx[None, :] < prep.retr_lengths[:, None]) & prep.retr_present[:, None]
        rt = T.expand(T.reshape(prep.retr_text, (n, 1, d)), (n, fp, d))
        fused = self.fuse(T.concat([rm, rt], axis=-1))
        rm = T.reshape(rm, (b, k * fp, d))
        fused = T.reshape(fused, (b, k * fp, d))
        return rm, fused, valid.reshape(b, k * fp)

    def context(self, prep: Prepared, emb: Tensor) -> Context:
        d = self.cfg.latent_dim
        ctx = Context()
        if prep.prompt is not None:
            ctx.prompt, ctx.prompt_bias = prep.prompt, _bias(prep.prompt_valid, d)
        if prep.retr_motions is not None:
            rm, fused, valid = self.encode_retrieval(prep, emb)
            ctx.retr_value, ctx.retr_key, ctx.retr_bias = rm, fused, _bias(valid, d)
        return ctx

    # -- forward --------------------------------------------------------

    def forward_prepared(self, x: Tensor, t, prep: Prepared, frame_valid: np.ndarray | None = None) -> Tensor:
        """Batched x_0 estimate for x of shape (B, F, D_pose)."""
        b, f, _ = x.shape
        if f > self.cfg.max_frames:
            raise ValueError(f"{f} frames exceed max_frames={self.cfg.max_frames}")
        d = self.cfg.latent_dim
        t = np.broadcast_to(np.asarray(t), (b,))
        emb = self.timestep_embedding(np.asarray(t))
        h = T.add(self.in_proj(x), Tensor(np.broadcast_to(sinusoidal(np.arange(f), d), (b, f, d)).copy()))
        self_bias = None if frame_valid is None else _bias(frame_valid, d)
        ctx = self.context(prep, emb)
        for layer in self.layers:
            h = layer(h, emb, self_bias, ctx)
        return self.out(h)

    def forward_batch(self, x: Tensor, t, conds: list[Conditions], frame_valid: np.ndarray | None = None) -> Tensor:
        return self.forward_prepared(x, t, self.prepare(conds), frame_valid)

    def denoise(self, x_t: Tensor, t: int, prep: Prepared, text: bool = True, retr: bool = True) -> Tensor:
        """Single-example estimate using a subset of the prepared conditions."""
        x = T.reshape(T.as_tensor(x_t), (1,) + tuple(x_t.shape))
        return self.forward_prepared(x, t, prep.without(text, retr))[0]

    def __call__(self, x_t, t: int, cond: Conditions) -> Tensor:
        """model_forward: x_0 estimate for one F x D_pose motion."""
        return self.denoise(T.as_tensor(x_t), t, self.prepare(cond), cond.has_text, cond.has_retr)

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, json.dumps(asdict(self.cfg), sort_keys=True), self.state_dict())

    @classmethod
    def load(cls, path) -> "SMT":
        cfg_json, state = load_checkpoint(path)
        model = cls(SmtConfig(**json.loads(cfg_json)))
        model.load_state_dict(state)
        return model


def zero_output_projections(model: SMT) -> None:
    """Zero every stylization output projection (identity layers)."""
    for layer in model.layers + model.retr_layers:
        for style in (layer.sma.style, layer.ffn.style):
            style.out.weight.data = np.zeros_like(style.out.weight.data)
            style.out.bias.data = np.zeros_like(style.out.bias.data)
