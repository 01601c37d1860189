import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from remodiff import tensor as T
from remodiff.tensor import Tensor, finite_diff_check


def naive_linear_attention(q, k, v):
    """Loop evaluation of softmax_row(Q) (softmax_col(K)^T V)."""
    n, d = q.shape
    m = k.shape[0]
    qs = np.zeros_like(q)
    for i in range(n):
        e = [np.exp(q[i, c] - q[i].max()) for c in range(d)]
        s = sum(e)
        for c in range(d):
            qs[i, c] = e[c] / s
    ks = np.zeros_like(k)
    for c in range(d):
        col = k[:, c]
        e = [np.exp(col[j] - col.max()) for j in range(m)]
        s = sum(e)
        for j in range(m):
            ks[j, c] = e[j] / s
    out = np.zeros((n, d))
    for i in range(n):
        for c in range(d):
            acc = 0.0
            for a in range(d):
                ctx = 0.0
                for j in range(m):
                    ctx += ks[j, a] * v[j, c]
                acc += qs[i, a] * ctx
            out[i, c] = acc
    return out


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_empty_contraction(self):
        out = T.matmul(Tensor(np.zeros((3, 0))), Tensor(np.zeros((0, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_shared_weight_gradient(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(3, 2))
        assert finite_diff_check(lambda x: T.sum(T.square(T.matmul(x, Tensor(w)))), rng.normal(size=(2, 4, 3))) < 1e-6
        x = rng.normal(size=(2, 4, 3))
        assert finite_diff_check(lambda ww: T.sum(T.square(T.matmul(Tensor(x), ww))), w) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert abs(out.data[0] - 1.0) < 1e-12
        assert abs(out.data[1]) < 1e-12

    def test_log_weights(self):
        out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axis=0)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_bad_axis(self):
        with pytest.raises(T.ContractError):
            T.softmax(Tensor(np.zeros((2, 2))), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, n, d, seed):
        x = np.random.default_rng(seed).normal(scale=5, size=(n, d))
        for axis in (0, 1):
            s = T.softmax(Tensor(x), axis=axis).data.sum(axis=axis)
            assert np.all(np.abs(s - 1) <= 1e-12)


class TestLayerNorm:
    def test_constant_row(self):
        out = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_unit_row(self):
        out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-15)

    def test_zero_gain(self):
        b = np.array([0.5, -2.0, 1.0])
        x = np.random.default_rng(1).normal(size=(5, 3))
        out = T.layer_norm(Tensor(x), Tensor(np.zeros(3)), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (5, 1)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 5), st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_moments(self, n, d, seed):
        x = np.random.default_rng(seed).normal(scale=3, size=(n, d)) + 7
        y = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=0.0).data
        assert np.all(np.abs(y.mean(axis=1)) <= 1e-10)
        assert np.all(np.abs(y.var(axis=1) - 1) <= 1e-6)


class TestLinearAttention:
    def test_single_key(self):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(1, 3))
        out = T.linear_attention(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(1, 3))), Tensor(v))
        np.testing.assert_allclose(out.data, np.tile(v, (4, 1)), atol=1e-15)

    def test_zero_values(self):
        rng = np.random.default_rng(3)
        out = T.linear_attention(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 3))), Tensor(np.zeros((5, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))

    def test_empty_context(self):
        with pytest.raises(T.ContractError):
            T.linear_attention(Tensor(np.zeros((2, 3))), Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))))

    def test_against_naive(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n, m, d = rng.integers(1, 9, size=3)
            q, k, v = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, d))
            out = T.linear_attention(Tensor(q), Tensor(k), Tensor(v)).data
            assert np.abs(out - naive_linear_attention(q, k, v)).max() <= 1e-10

    def test_key_bias_masks_positions(self):
        rng = np.random.default_rng(5)
        q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        bias = np.zeros((5, 4))
        bias[3:] = -1e9
        masked = T.linear_attention(Tensor(q), Tensor(k), Tensor(v), key_bias=Tensor(bias)).data
        kept = T.linear_attention(Tensor(q), Tensor(k[:3]), Tensor(v[:3])).data
        np.testing.assert_allclose(masked, kept, atol=1e-14)


class TestBackward:
    def test_sum(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_sum_of_squares(self):
        data = np.random.default_rng(1).normal(size=(4,))
        x = Tensor(data, requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * data, atol=1e-15)

    def test_non_scalar_loss(self):
        with pytest.raises(T.ContractError):
            T.backward(Tensor(np.ones(3), requires_grad=True))

    def test_accumulates_across_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.backward(T.sum(x))
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        w1, w2, xin = rng.normal(size=(3, 5)), rng.normal(size=(5, 2)), rng.normal(size=(4, 3))

        def run():
            a, b = Tensor(w1, requires_grad=True), Tensor(w2, requires_grad=True)
            h = T.gelu(T.matmul(Tensor(xin), a))
            T.backward(T.sum(T.square(T.matmul(h, b))))
            return a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()

    def test_graph_is_topological(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.sum(T.matmul(x, T.exp(x)))
        recs = T.graph_records(y)
        for r in recs:
            assert all(i < r.output for i in r.inputs)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        w1, w2 = rng.normal(size=(3, 6)), rng.normal(size=(6, 1))
        xin = rng.normal(size=(5, 3))

        def loss(w):
            h = T.tanh(T.matmul(Tensor(xin), w))
            return T.mean(T.square(T.matmul(h, Tensor(w2))))

        assert finite_diff_check(loss, w1) < 1e-6


class TestFiniteDiff:
    def test_sum(self):
        assert finite_diff_check(T.sum, np.random.default_rng(0).normal(size=5)) < 1e-8

    def test_softmax_weighted(self):
        rng = np.random.default_rng(1)
        c = rng.normal(size=6)
        assert finite_diff_check(lambda x: T.sum(T.mul(T.softmax(x, axis=0), Tensor(c))), rng.normal(size=6)) < 1e-4


def _primitive_losses(rng):
    """(name, scalar function, input) for every differentiable primitive."""
    c = lambda shape: Tensor(rng.normal(size=shape))  # noqa: E731
    w34 = c((3, 4))
    cw = c((4, 3))
    g3, b3 = c((3,)), c((3,))
    q, k, v = c((4, 3)), c((5, 3)), c((5, 3))
    spd = rng.normal(size=(3, 3))
    spd = spd @ spd.T + 0.5 * np.eye(3)
    other = c((4, 3))
    return [
        ("add", lambda x: T.sum(T.mul(T.add(x, other), cw)), rng.normal(size=(4, 3))),
        ("sub", lambda x: T.sum(T.mul(T.sub(other, x), cw)), rng.normal(size=(4, 3))),
        ("mul", lambda x: T.sum(T.mul(x, x)), rng.normal(size=(4, 3))),
        ("scale", lambda x: T.sum(T.mul(T.scale(x, 2.5), cw)), rng.normal(size=(4, 3))),
        ("exp", lambda x: T.sum(T.exp(x)), rng.normal(size=(4, 3))),
        ("log", lambda x: T.sum(T.log(x)), rng.uniform(0.5, 2, size=(4, 3))),
        ("sqrt", lambda x: T.sum(T.sqrt(x)), rng.uniform(0.5, 2, size=(4, 3))),
        ("square", lambda x: T.sum(T.mul(T.square(x), cw)), rng.normal(size=(4, 3))),
        ("tanh", lambda x: T.sum(T.mul(T.tanh(x), cw)), rng.normal(size=(4, 3))),
        ("relu", lambda x: T.sum(T.mul(T.relu(x), cw)), rng.uniform(0.1, 1, size=(4, 3)) * rng.choice([-1, 1], size=(4, 3))),
        ("silu", lambda x: T.sum(T.mul(T.silu(x), cw)), rng.normal(size=(4, 3))),
        ("gelu", lambda x: T.sum(T.mul(T.gelu(x), cw)), rng.normal(size=(4, 3))),
        ("expand", lambda x: T.sum(T.mul(T.expand(x, (4, 3)), cw)), rng.normal(size=(3,))),
        ("reshape", lambda x: T.sum(T.mul(T.reshape(x, (4, 3)), cw)), rng.normal(size=(3, 4))),
        ("transpose", lambda x: T.sum(T.mul(T.transpose(x), cw)), rng.normal(size=(3, 4))),
        ("concat", lambda x: T.sum(T.mul(T.concat([x, other], axis=0), T.concat([cw, cw], axis=0))), rng.normal(size=(4, 3))),
        ("getitem", lambda x: T.sum(T.mul(x[1:3], cw[1:3])), rng.normal(size=(4, 3))),
        ("index_select", lambda x: T.sum(T.square(T.index_select(x, [0, 2, 2], axis=0))), rng.normal(size=(4, 3))),
        ("mean", lambda x: T.sum(T.square(T.mean(x, axis=0))), rng.normal(size=(4, 3))),
        ("trace", lambda x: T.square(T.trace(x)), rng.normal(size=(3, 3))),
        ("matmul", lambda x: T.sum(T.square(T.matmul(x, w34))), rng.normal(size=(2, 3))),
        ("softmax", lambda x: T.sum(T.mul(T.softmax(x, axis=-1), cw)), rng.normal(size=(4, 3))),
        ("layer_norm", lambda x: T.sum(T.mul(T.layer_norm(x, g3, b3), cw)), rng.normal(size=(4, 3))),
        ("linear_attention", lambda x: T.sum(T.mul(T.linear_attention(x, k, v), cw)), rng.normal(size=(4, 3))),
        ("linear_attention_k", lambda x: T.sum(T.mul(T.linear_attention(q, x, v), cw)), rng.normal(size=(5, 3))),
        ("sqrtm_psd", lambda x: T.sum(T.mul(T.sqrtm_psd(x), Tensor(spd))), spd),
    ]


@pytest.mark.parametrize("idx", range(26))
def test_primitive_gradients_at_random_points(idx):
    rng = np.random.default_rng(100 + idx)
    name, f, _ = _primitive_losses(rng)[idx]
    worst = 0.0
    for trial in range(10):
        point = _primitive_losses(np.random.default_rng(1000 * idx + trial))[idx][2]
        worst = max(worst, finite_diff_check(f, point, h=1e-5))
    assert worst < 1e-4, name


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._parents == ()
