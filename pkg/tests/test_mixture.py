import json

import numpy as np
import pytest

from remodiff import tensor as T
from remodiff.conditioning import ConditionBuilder
from remodiff.diffusion import make_schedule, sample
from remodiff.mixture import (
    EvalPrompt,
    MixtureDivergence,
    MixtureWeights,
    TailProblem,
    fid_objective,
    finetune_tail,
    grid_points,
    grid_search,
    report_json,
    sampling_objective,
)
from remodiff.motion import compute_norm_stats
from remodiff.retrieval import build_index
from remodiff.smt import SMT, SmtConfig
from remodiff.synthetic import make_synthetic_dataset
from remodiff.tensor import Tensor
from remodiff.text import StubProvider

SCHED = make_schedule()


class VectorToy:
    """S = a * x_t + o[subset]: each condition subset adds its own offset along one axis."""

    def __init__(self, dim, a=0.5):
        self.a = a
        self.offsets = 2.0 * np.eye(4, dim)

    def prepare(self, cond):
        return cond

    def denoise(self, x_t, t, prep, text=True, retr=True):
        i = {(True, True): 0, (True, False): 1, (False, True): 2, (False, False): 3}[(text and prep.has_text, retr and prep.has_retr)]
        x = T.as_tensor(x_t)
        return x * self.a + Tensor(np.broadcast_to(self.offsets[i], x.shape).copy())


def mean_features(xs):
    rows = [T.reshape(T.getitem(T.mean(x, axis=0), slice(0, 3)), (1, 3)) for x in xs]
    return T.concat(rows, axis=0)


@pytest.fixture(scope="module")
def setup():
    seqs = make_synthetic_dataset(seed=0, n_frames=8, n_joints=1)
    prov = StubProvider(d_text=16)
    stats = compute_norm_stats(seqs)
    builder = ConditionBuilder(prov, stats, build_index(seqs, prov), seqs, k=2)
    evals = [EvalPrompt(s.captions[0], 6 + i % 3) for i, s in enumerate(seqs[:8])]
    return seqs, builder, evals


def test_grid_has_441_valid_points():
    pts = grid_points()
    assert len(pts) == 441 and len({(w.w1, w.w2) for w in pts}) == 441
    assert all(w.w4 == 0.0 and abs(sum(w.as_tuple()) - 1) <= 1e-9 for w in pts)


def test_grid_recovers_planted_optimum():
    seen = []

    def objective(w):
        seen.append(w)
        return (w.w1 - 1.5) ** 2 + 2 * (w.w2 + 2) ** 2 + 0.3 * (w.w1 - 1.5) * (w.w2 + 2)

    rep = grid_search(objective)
    assert (rep.best.w1, rep.best.w2, rep.best.w4) == (1.5, -2.0, 0.0)
    assert len(seen) == 441 and all(w.w4 == 0.0 for w in seen)
    doc = json.loads(report_json(rep))
    assert doc["best"]["w1"] == 1.5 and len(doc["grid"]) == 441 and doc["finetuned"] is None


def test_grid_ties_break_lexicographically():
    rep = grid_search(lambda w: 1.0)
    assert (rep.best.w1, rep.best.w2) == (-5.0, -5.0)
    rep = grid_search(lambda w: float(abs(w.w1) == 2.0 and abs(w.w2) == 1.0) * -1)
    assert (rep.best.w1, rep.best.w2) == (-2.0, -1.0)


def test_grid_rejects_non_finite():
    with pytest.raises(MixtureDivergence):
        grid_search(lambda w: float("nan"))


def test_fid_objective_dispatch():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(10, 2)), rng.normal(size=(12, 2))
    assert fid_objective(a, a) == pytest.approx(0, abs=1e-8)
    assert fid_objective(Tensor(b), a).item() == pytest.approx(fid_objective(b, a), rel=1e-9)
    assert fid_objective(b, a) >= 0


def test_sampling_objective_deterministic(setup):
    seqs, builder, evals = setup
    model = VectorToy(builder.stats.dim)
    real = np.random.default_rng(1).normal(size=(20, 3))
    feats = lambda gen: np.stack([g.mean(0)[:3] for g in gen])  # noqa: E731
    obj = sampling_objective(model, builder, evals[:4], SCHED, feats, real, n_infer=5, seed=2)
    w = MixtureWeights(2.0, -1.0, 0.0, 0.0)
    assert obj(w) == obj(w)
    with pytest.raises(ValueError):
        sampling_objective(model, builder, [], SCHED, feats, real)
    with pytest.raises(ValueError):
        sampling_objective(model, builder, evals, SCHED, None, real)


def test_tail_with_constant_weights_reproduces_sampler(setup):
    seqs, builder, evals = setup
    model = VectorToy(builder.stats.dim)
    w = MixtureWeights(1.5, -0.5, 0.5, -0.5)
    prob = TailProblem(model, builder, evals[:3], SCHED, w, n_infer=12, n_tail=4, seed=5)
    out = prob.final(Tensor(np.array([w.w1, w.w2, w.w3])))
    for i, (e, x) in enumerate(zip(evals[:3], out)):
        ref = sample(model, builder, e.prompt, e.length, SCHED, 12, w, seed=5 + i).normalized
        np.testing.assert_allclose(x.data, ref, atol=1e-10)


def test_finetune_recovers_planted_tail_optimum(setup):
    seqs, builder, evals = setup
    model = VectorToy(builder.stats.dim)
    w_init = MixtureWeights(1.0, 0.0, 0.0, 0.0)
    prob = TailProblem(model, builder, evals, SCHED, w_init, n_infer=50, n_tail=10, seed=0)
    w_star = np.array([1.7, -0.4, 0.3])
    real = mean_features(prob.final(Tensor(w_star))).data
    rep = finetune_tail(prob, w_init, mean_features, real, n_steps=1000, lr=0.05)
    got = np.array(rep.weights.as_tuple()[:3])
    assert np.max(np.abs(got - w_star)) <= 0.05
    assert abs(sum(rep.weights.as_tuple()) - 1) <= 1e-9
    assert rep.objective[-1] < rep.initial


def test_finetune_zero_lr_and_divergence_guard(setup):
    seqs, builder, evals = setup
    model = VectorToy(builder.stats.dim)
    w_init = MixtureWeights(2.0, -1.0, 0.0, 0.0)
    prob = TailProblem(model, builder, evals[:4], SCHED, w_init, n_infer=10, n_tail=3)
    real = np.random.default_rng(3).normal(size=(12, 3))
    assert finetune_tail(prob, w_init, mean_features, real, n_steps=5, lr=0.0).weights == w_init
    with pytest.raises(MixtureDivergence):
        finetune_tail(prob, w_init, mean_features, real + 100, n_steps=50, lr=50.0, divergence_factor=0.0)


def test_finetune_keeps_model_frozen(setup):
    seqs, builder, evals = setup
    cfg = SmtConfig(n_joints=1, latent_dim=8, n_decoder_layers=1, n_retr_encoder_layers=1, n_prompt_layers=1, d_text=16, zero_init_style=False)
    model = SMT(cfg)
    before = model.checksum()
    w_init = MixtureWeights(1.0, 0.0, 0.0, 0.0)
    prob = TailProblem(model, builder, evals[:3], SCHED, w_init, n_infer=6, n_tail=2)
    real = np.random.default_rng(4).normal(size=(10, 3))
    rep = finetune_tail(prob, w_init, mean_features, real, n_steps=3, lr=0.1)
    assert model.checksum() == before
    assert all(p.grad is None for p in model.parameters())
    assert rep.weights != w_init
