"""Seeded synthetic motion corpus with compositional captions.

Captions read "a person <verb> <adverb>".  The verb picks which joints swing
and at what base frequency, the adverb sets tempo, amplitude and root drift,
so unseen verb/adverb pairs are recombinations of seen words.
"""

from __future__ import annotations

import itertools

import numpy as np

from .motion import MotionSequence, PoseVector

VERBS = ("walks", "waves", "jumps", "kicks")
ADVERBS = ("slowly", "quickly", "forward", "sideways")

# verb -> (moving joint indices mod J, base cycles per clip, swing axis)
_VERB_STYLE = {
    "walks": ((0, 1), 1.0, 0),
    "waves": ((2,), 2.0, 1),
    "jumps": ((0, 1, 2, 3), 1.0, 1),
    "kicks": ((1, 3), 1.5, 2),
}
# adverb -> (tempo multiplier, amplitude, root vx, root vz)
_ADVERB_STYLE = {
    "slowly": (0.5, 0.6, 0.01, 0.0),
    "quickly": (2.0, 1.0, 0.04, 0.0),
    "forward": (1.0, 0.8, 0.08, 0.0),
    "sideways": (1.0, 0.8, 0.0, 0.06),
}


def caption_for(verb: str, adverb: str) -> str:
    return f"a person {verb} {adverb}"


def all_combos() -> list[tuple[str, str]]:
    return list(itertools.product(VERBS, ADVERBS))


def heldout_combos() -> list[tuple[str, str]]:
    """A Latin-square diagonal: every verb and adverb still appears in training."""
    return [(v, ADVERBS[(i + 1) % len(ADVERBS)]) for i, v in enumerate(VERBS)]


def _rot6d(angle: np.ndarray, axis: int) -> np.ndarray:
    """First two columns of the rotation about ``axis``; shape (F, 6)."""
    c, s = np.cos(angle), np.sin(angle)
    one, zero = np.ones_like(angle), np.zeros_like(angle)
    if axis == 0:
        cols = [one, zero, zero, zero, c, s]
    elif axis == 1:
        cols = [c, zero, -s, zero, one, zero]
    else:
        cols = [c, s, zero, -s, c, zero]
    return np.stack(cols, axis=-1)


def synth_motion(verb: str, adverb: str, n_frames: int, n_joints: int, rng: np.random.Generator, jitter: float = 0.0) -> np.ndarray:
    joints, cycles, axis = _VERB_STYLE[verb]
    tempo, amp, vx, vz = _ADVERB_STYLE[adverb]
    t = np.arange(n_frames) / 16.0
    phase0 = jitter * rng.normal()
    amp_j = amp * (1.0 + 0.1 * jitter * rng.normal())
    rest = np.stack([np.linspace(-0.3, 0.3, n_joints), np.linspace(0.2, 1.4, n_joints), np.zeros(n_joints)], axis=1)

    pos = np.repeat(rest[None], n_frames, axis=0)
    rot = np.zeros((n_frames, n_joints, 6))
    moving = {j % n_joints for j in joints}
    for j in range(n_joints):
        if j in moving:
            ang = amp_j * np.sin(2 * np.pi * cycles * tempo * t + phase0 + 0.7 * j)
            pos[:, j, axis] += 0.3 * ang
            rot[:, j] = _rot6d(ang, axis)
        else:
            rot[:, j] = _rot6d(np.zeros(n_frames), axis)
    vel = np.diff(pos, axis=0, prepend=pos[:1])

    bounce = 0.2 * amp_j * np.abs(np.sin(2 * np.pi * tempo * t + phase0)) if verb == "jumps" else np.zeros(n_frames)
    r_h = 0.9 + bounce
    r_va = 0.05 * np.sin(2 * np.pi * tempo * t / 2 + phase0) * (1 if verb in ("walks", "kicks") else 0)
    frames = []
    for f in range(n_frames):
        pv = PoseVector(float(r_va[f]), vx * tempo, vz * tempo, float(r_h[f]), pos[f], vel[f], rot[f])
        frames.append(pv.flatten())
    return np.asarray(frames)


def make_synthetic_dataset(
    seed: int = 0,
    n_frames: int = 16,
    n_joints: int = 4,
    combos: list[tuple[str, str]] | None = None,
    instances: int = 1,
    jitter: float = 0.0,
    length_range: tuple[int, int] | None = None,
    fps: float = 20.0,
) -> list[MotionSequence]:
    """One sequence per (combo, instance); ids are zero-padded for stable order."""
    rng = np.random.default_rng(seed)
    combos = all_combos() if combos is None else combos
    out = []
    idx = 0
    for verb, adverb in combos:
        for _ in range(instances):
            f = n_frames if length_range is None else int(rng.integers(length_range[0], length_range[1] + 1))
            frames = synth_motion(verb, adverb, f, n_joints, rng, jitter)
            out.append(MotionSequence(f"seq{idx:04d}", frames, fps, [caption_for(verb, adverb)]))
            idx += 1
    return out
