import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remodiff import motion as M
from remodiff.synthetic import make_synthetic_dataset


def test_pose_dims():
    assert M.pose_dim(22) == 268
    assert M.pose_dim(21) == 256


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 24), st.integers(0, 2**31 - 1))
def test_pose_roundtrip(j, seed):
    vec = np.random.default_rng(seed).normal(size=M.pose_dim(j))
    np.testing.assert_array_equal(M.PoseVector.unflatten(vec, j).flatten(), vec)


def test_motion_file_roundtrip_bit_exact(tmp_path):
    frames = np.random.default_rng(0).normal(size=(7, 52)).astype(np.float32)
    M.write_motion(tmp_path / "a.rmdf", frames)
    back = M.read_motion(tmp_path / "a.rmdf")
    assert back.astype(np.float32).tobytes() == frames.tobytes()
    raw = (tmp_path / "a.rmdf").read_bytes()
    assert raw[:4] == b"RMDF" and len(raw) == 16 + 4 * 7 * 52


def test_motion_file_errors(tmp_path):
    M.write_motion(tmp_path / "a.rmdf", np.zeros((3, 4)))
    raw = (tmp_path / "a.rmdf").read_bytes()
    (tmp_path / "bad.rmdf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(M.MotionFormatError, match="byte 0"):
        M.read_motion(tmp_path / "bad.rmdf")
    (tmp_path / "short.rmdf").write_bytes(raw[:-3])
    with pytest.raises(M.MotionFormatError, match="short.rmdf.*byte"):
        M.read_motion(tmp_path / "short.rmdf")


def test_load_dataset_empty(tmp_path):
    (tmp_path / "manifest.json").write_text("[]")
    assert M.load_dataset(tmp_path) == []


def test_load_dataset_fixture(tmp_path):
    seqs = make_synthetic_dataset(seed=1, n_frames=5, n_joints=2, combos=[("walks", "slowly"), ("waves", "quickly")])
    M.write_dataset(tmp_path, seqs)
    loaded = M.load_dataset(tmp_path)
    assert [s.id for s in loaded] == ["seq0000", "seq0001"]
    assert all(s.length == 5 and s.dim == M.pose_dim(2) for s in loaded)
    assert loaded[1].captions == ["a person waves quickly"]


def test_load_dataset_missing_file(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps([{"id": "ghost", "motion_file": "g.rmdf", "fps": 20, "captions": ["x"]}]))
    with pytest.raises(FileNotFoundError, match="ghost"):
        M.load_dataset(tmp_path)


def test_load_dataset_dim_mismatch(tmp_path):
    M.write_dataset(tmp_path, make_synthetic_dataset(n_frames=4, n_joints=2, combos=[("walks", "slowly")]))
    with pytest.raises(M.SchemaError):
        M.load_dataset(tmp_path, dim=M.pose_dim(3))


def test_norm_stats_constant_sequence():
    row = np.array([1.0, -2.0, 3.0])
    stats = M.compute_norm_stats([M.MotionSequence("a", np.tile(row, (4, 1)))])
    np.testing.assert_array_equal(stats.mean, row)
    np.testing.assert_array_equal(stats.std, np.full(3, 1e-8))


def test_norm_stats_hand_example():
    stats = M.compute_norm_stats([M.MotionSequence("a", [[0.0], [2.0]])])
    assert stats.mean[0] == 1.0 and stats.std[0] == 1.0


def test_norm_stats_empty():
    with pytest.raises(ValueError):
        M.compute_norm_stats([])


def test_normalized_stats_are_standard():
    seqs = make_synthetic_dataset(seed=2, n_joints=3, jitter=1.0)
    stats = M.compute_norm_stats(seqs)
    normed = [M.normalize(s, stats) for s in seqs]
    again = M.compute_norm_stats(normed)
    live = stats.std > 1e-6
    np.testing.assert_allclose(again.mean[live], 0, atol=1e-10)
    np.testing.assert_allclose(again.std[live], 1, atol=1e-10)


def test_normalize_mean_is_zero_and_identity_stats():
    stats = M.NormStats(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    np.testing.assert_array_equal(M.normalize_frames(np.array([[1.0, 2.0]]), stats), [[0.0, 0.0]])
    x = np.random.default_rng(0).normal(size=(3, 2))
    unit = M.NormStats(np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(M.normalize_frames(x, unit), x)
    with pytest.raises(M.SchemaError):
        M.normalize_frames(np.zeros((2, 3)), stats)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_normalize_roundtrip(f, d, seed):
    rng = np.random.default_rng(seed)
    stats = M.NormStats(rng.normal(size=d), rng.uniform(0.1, 5, size=d))
    seq = M.MotionSequence("x", rng.normal(scale=10, size=(f, d)))
    back = M.denormalize(M.normalize(seq, stats), stats)
    assert back.frames.shape == seq.frames.shape
    assert np.abs(back.frames - seq.frames).max() <= 1e-10


def test_norm_stats_file_roundtrip(tmp_path):
    stats = M.NormStats(np.array([0.1, 0.2]), np.array([1.5, 2.5]))
    stats.save(tmp_path / "n.json")
    back = M.NormStats.load(tmp_path / "n.json")
    np.testing.assert_array_equal(back.mean, stats.mean)
    assert set(json.loads((tmp_path / "n.json").read_text())) == {"mean", "std"}


def test_downsample_examples():
    x = np.arange(16)[:, None]
    np.testing.assert_array_equal(M.downsample(x, 4)[:, 0], [0, 4, 8, 12])
    np.testing.assert_array_equal(M.downsample(x, 1), x)
    np.testing.assert_array_equal(M.downsample(np.arange(3)[:, None], 4)[:, 0], [0])
    with pytest.raises(ValueError):
        M.downsample(x, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.integers(1, 6), st.integers(1, 6))
def test_downsample_composes(f, a, b):
    x = np.arange(f)[:, None]
    np.testing.assert_array_equal(M.downsample(M.downsample(x, a), b), M.downsample(x, a * b))
    assert M.downsample(x, a).shape[0] == M.downsampled_length(f, a)


def test_synthetic_deterministic():
    a = make_synthetic_dataset(seed=5, jitter=0.5)
    b = make_synthetic_dataset(seed=5, jitter=0.5)
    c = make_synthetic_dataset(seed=6, jitter=0.5)
    assert all(np.array_equal(x.frames, y.frames) for x, y in zip(a, b))
    assert not all(np.array_equal(x.frames, y.frames) for x, y in zip(a, c))
    assert len(a) == 16 and a[0].frames.shape == (16, M.pose_dim(4))
