"""Pose layout, motion files, dataset manifests, normalisation and downsampling.

A pose vector is the seven-tuple (r_va, r_vx, r_vz, r_h, j_p, j_v, j_r):
four root scalars, J x 3 joint positions, J x 3 joint velocities and J x 6
continuous rotations, flattened to D = 4 + 12 J.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MOTION_MAGIC = b"RMDF"
MOTION_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class MotionFormatError(ValueError):
    """A motion file or manifest could not be parsed."""


class SchemaError(ValueError):
    """Data is well-formed but has the wrong dimensionality."""


def pose_dim(n_joints: int) -> int:
    return 4 + 12 * n_joints


@dataclass(frozen=True)
class PoseVector:
    r_va: float
    r_vx: float
    r_vz: float
    r_h: float
    j_p: np.ndarray  # (J, 3)
    j_v: np.ndarray  # (J, 3)
    j_r: np.ndarray  # (J, 6)

    @property
    def n_joints(self) -> int:
        return self.j_p.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [[self.r_va, self.r_vx, self.r_vz, self.r_h], self.j_p.ravel(), self.j_v.ravel(), self.j_r.ravel()]
        ).astype(np.float64)

    @classmethod
    def unflatten(cls, vec: np.ndarray, n_joints: int) -> "PoseVector":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (pose_dim(n_joints),):
            raise SchemaError(f"pose vector has {vec.shape[0]} dims, expected {pose_dim(n_joints)}")
        j = n_joints
        return cls(
            float(vec[0]),
            float(vec[1]),
            float(vec[2]),
            float(vec[3]),
            vec[4 : 4 + 3 * j].reshape(j, 3).copy(),
            vec[4 + 3 * j : 4 + 6 * j].reshape(j, 3).copy(),
            vec[4 + 6 * j :].reshape(j, 6).copy(),
        )


@dataclass
class MotionSequence:
    id: str
    frames: np.ndarray
    fps: float = 20.0
    captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise SchemaError(f"{self.id}: frames must be an F x D matrix with F >= 1, got {self.frames.shape}")
        if self.fps <= 0:
            raise SchemaError(f"{self.id}: fps must be positive")

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# --------------------------------------------------------------------------
# binary motion file


def write_motion(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    f, d = frames.shape
    data = np.ascontiguousarray(frames, dtype="<f4")
    Path(path).write_bytes(_HEADER.pack(MOTION_MAGIC, MOTION_VERSION, f, d) + data.tobytes())


def read_motion(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise MotionFormatError(f"{path}: truncated header at byte {len(buf)}")
    magic, version, f, d = _HEADER.unpack_from(buf, 0)
    if magic != MOTION_MAGIC:
        raise MotionFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != MOTION_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version} at byte 4")
    if f < 1:
        raise MotionFormatError(f"{path}: frame count 0 at byte 8")
    expected = _HEADER.size + 4 * f * d
    if len(buf) != expected:
        raise MotionFormatError(
            f"{path}: payload size mismatch at byte {min(len(buf), expected)} "
            f"(file has {len(buf)} bytes, header implies {expected})"
        )
    return np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(f, d).astype(np.float64)


# --------------------------------------------------------------------------
# dataset directory: manifest.json + motion files


MANIFEST = "manifest.json"


def load_dataset(path: str | Path, dim: int | None = None) -> list[MotionSequence]:
    """Read every sequence listed in ``path/manifest.json``, sorted by id."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    try:
        records = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise MotionFormatError(f"{manifest}: invalid JSON at byte {exc.pos}") from exc
    if not isinstance(records, list):
        raise MotionFormatError(f"{manifest}: expected a JSON array at byte 0")
    out = []
    for rec in records:
        try:
            sid, mfile, fps, caps = rec["id"], rec["motion_file"], rec["fps"], rec["captions"]
        except (KeyError, TypeError) as exc:
            raise MotionFormatError(f"{manifest}: record missing field {exc}") from exc
        mpath = root / mfile
        if not mpath.is_file():
            raise FileNotFoundError(f"sequence {sid!r}: motion file {mfile} not found")
        frames = read_motion(mpath)
        if dim is not None and frames.shape[1] != dim:
            raise SchemaError(f"{mpath}: D={frames.shape[1]} but {dim} expected")
        out.append(MotionSequence(sid, frames, float(fps), list(caps)))
    dims = {s.dim for s in out}
    if len(dims) > 1:
        raise SchemaError(f"{root}: mixed pose dimensions {sorted(dims)}")
    out.sort(key=lambda s: s.id)
    return out


def write_dataset(path: str | Path, sequences: list[MotionSequence]) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for seq in sorted(sequences, key=lambda s: s.id):
        fname = f"{seq.id}.rmdf"
        write_motion(root / fname, seq.frames)
        records.append({"id": seq.id, "motion_file": fname, "fps": seq.fps, "captions": seq.captions})
    (root / MANIFEST).write_text(json.dumps(records, indent=1) + "\n")


# --------------------------------------------------------------------------
# normalisation


STD_FLOOR = 1e-8


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "std": self.std.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "NormStats":
        obj = json.loads(text)
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        return cls.from_json(Path(path).read_text())


def compute_norm_stats(train: list[MotionSequence]) -> NormStats:
    if not train:
        raise ValueError("compute_norm_stats: empty training set")
    allf = np.concatenate([s.frames for s in train], axis=0)
    return NormStats(allf.mean(axis=0), np.maximum(allf.std(axis=0), STD_FLOOR))


def _check_dim(frames: np.ndarray, stats: NormStats) -> None:
    if frames.shape[-1] != stats.dim:
        raise SchemaError(f"frames have D={frames.shape[-1]}, stats have D={stats.dim}")


def normalize_frames(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    _check_dim(frames, stats)
    return (frames - stats.mean) / stats.std


def denormalize_frames(frames: np.ndarray, stats: NormStats) -> np.ndarray:
    _check_dim(frames, stats)
    return frames * stats.std + stats.mean


def normalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    return MotionSequence(seq.id, normalize_frames(seq.frames, stats), seq.fps, list(seq.captions))


def denormalize(seq: MotionSequence, stats: NormStats) -> MotionSequence:
    return MotionSequence(seq.id, denormalize_frames(seq.frames, stats), seq.fps, list(seq.captions))


def downsample_indices(n_frames: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return np.arange(0, n_frames, stride)


def downsample(frames: np.ndarray, stride: int) -> np.ndarray:
    """Keep frames 0, stride, 2*stride, ... (ceil(F / stride) rows)."""
    frames = np.asarray(frames)
    if frames.shape[0] < 1:
        raise ValueError("downsample needs at least one frame")
    return frames[downsample_indices(frames.shape[0], stride)]


def downsampled_length(n_frames: int, stride: int) -> int:
    return math.ceil(n_frames / stride)
