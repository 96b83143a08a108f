from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from smkd import tensor as T
from smkd.tensor import NumericError, ParameterError, ShapeError, Tensor

SEEDS = range(10)
SINGLE_OP_TOL = 1e-5


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def weighted(out: Tensor, seed: int = 99) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * w).sum()


# op name -> (input builder, function of the first input)
def _unary_cases():
    return {
        "add": (lambda r: leaf(r, 3, 4), lambda x: x + Tensor(np.linspace(-1, 1, 4), dtype=np.float64)),
        "sub": (lambda r: leaf(r, 3, 4), lambda x: Tensor(np.ones((3, 4)), dtype=np.float64) - x * 2.0),
        "mul": (lambda r: leaf(r, 3, 4), lambda x: x * x),
        "div": (lambda r: leaf(r, 3, 4), lambda x: x / (T.exp(x) + 1.0)),
        "power": (lambda r: leaf(r, 5), lambda x: T.power(x * x + 1.0, 1.5)),
        "exp": (lambda r: leaf(r, 2, 3), T.exp),
        "log": (lambda r: Tensor(r.uniform(0.5, 2.0, (2, 3)), requires_grad=True, dtype=np.float64), T.log),
        "sqrt": (lambda r: Tensor(r.uniform(0.5, 2.0, (4,)), requires_grad=True, dtype=np.float64), T.sqrt),
        "gelu": (lambda r: leaf(r, 3, 5, scale=2.0), T.gelu),
        "softmax": (lambda r: leaf(r, 3, 6), lambda x: T.softmax(x, axis=-1, temperature=0.3)),
        "log_softmax": (lambda r: leaf(r, 3, 6), lambda x: T.log_softmax(x, axis=0, temperature=0.7)),
        "l2_normalize": (lambda r: leaf(r, 4, 5), lambda x: T.l2_normalize(x, axis=-1)),
        "sum": (lambda r: leaf(r, 3, 4), lambda x: x.sum(axis=0)),
        "mean": (lambda r: leaf(r, 3, 4), lambda x: x.mean(axis=1, keepdims=True)),
        "reshape": (lambda r: leaf(r, 3, 4), lambda x: x.reshape(2, 6)),
        "transpose": (lambda r: leaf(r, 2, 3, 4), lambda x: x.transpose(2, 0, 1)),
        "getitem_basic": (lambda r: leaf(r, 4, 5), lambda x: x[1:3, ::2]),
        "getitem_fancy": (lambda r: leaf(r, 4, 5), lambda x: x[np.array([0, 2, 2, 3])]),
        "concat": (lambda r: leaf(r, 2, 3), lambda x: T.concat([x, x * 3.0], axis=1)),
        "stack": (lambda r: leaf(r, 2, 3), lambda x: T.stack([x, T.exp(x)], axis=1)),
        "embedding": (lambda r: leaf(r, 6, 3), lambda x: T.embedding(x, np.array([[0, 5], [5, 2]]))),
        "broadcast_to": (lambda r: leaf(r, 1, 3), lambda x: T.broadcast_to(x, (4, 3))),
        "where": (lambda r: leaf(r, 3, 3), lambda x: T.where(np.eye(3, dtype=bool), x, x * x)),
        "clamp_min": (lambda r: Tensor(np.array([-1.0, 0.3, 2.0]), requires_grad=True, dtype=np.float64), lambda x: T.clamp_min(x, 0.0)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@pytest.mark.parametrize("seed", SEEDS)
def test_single_op_gradient_f64(name, seed):
    build, fn = _unary_cases()[name]
    x = build(np.random.default_rng(seed))
    err = T.finite_diff_check(lambda t: weighted(fn(t), 1000 + seed), x)
    assert err < SINGLE_OP_TOL, f"{name} seed {seed}: rel-err {err:.2e}"


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_gradient_both_sides(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    assert T.finite_diff_check(lambda x: weighted(T.matmul(x, b)), a) < 1e-5
    assert T.finite_diff_check(lambda x: weighted(T.matmul(a, x)), b) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    c = leaf(rng, 2, 5, 3)
    assert T.finite_diff_check(lambda x: weighted(T.matmul(a, x)), b) < 1e-5
    assert T.finite_diff_check(lambda x: weighted(T.matmul(x, c)), leaf(rng, 2, 4, 5)) < 1e-5


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient_all_inputs(seed):
    rng = np.random.default_rng(seed)
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    assert T.finite_diff_check(lambda t: weighted(T.layer_norm(t, g, b)), x) < 1e-5
    assert T.finite_diff_check(lambda t: weighted(T.layer_norm(x, t, b)), g) < 1e-5
    assert T.finite_diff_check(lambda t: weighted(T.layer_norm(x, g, t)), b) < 1e-5


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.array([[1.0, -2.0], [0.5, 3.0]]))
        assert np.array_equal(T.matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, np.array([[2.0], [4.0]], dtype=np.float32))

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_constant_vector_is_uniform(self):
        out = T.softmax(Tensor(np.full(5, 3.7)))
        assert np.allclose(out.data, 0.2, atol=1e-7)

    def test_shift_invariance(self):
        x = np.random.default_rng(0).standard_normal(7)
        assert np.allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + 123.0)).data, atol=1e-6)

    def test_scalar_oracle(self):
        out = T.softmax(Tensor([1.0, 0.0], dtype=np.float64)).data
        assert out == pytest.approx([math.e / (math.e + 1), 1 / (math.e + 1)], abs=1e-12)
        assert out == pytest.approx([0.7311, 0.2689], abs=1e-4)

    @pytest.mark.parametrize("temp", [0.0, -0.5])
    def test_nonpositive_temperature(self, temp):
        with pytest.raises(ParameterError):
            T.softmax(Tensor([1.0, 2.0]), temperature=temp)

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(out >= 0) and np.all(out <= 1)
        assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        out = T.layer_norm(Tensor(np.full((2, 8), 5.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.array_equal(out.data, np.zeros((2, 8), dtype=np.float32))

    def test_row_statistics(self):
        x = Tensor(np.random.default_rng(1).standard_normal((4, 16)) * 3 + 2, dtype=np.float64)
        bias = np.linspace(-1, 1, 16)
        out = T.layer_norm(x, Tensor(np.ones(16), dtype=np.float64), Tensor(bias, dtype=np.float64)).data
        centred = out - bias
        assert np.allclose(centred.mean(axis=-1), 0, atol=1e-9)
        assert np.allclose(centred.var(axis=-1), 1, atol=1e-5)
        assert np.allclose(out.mean(axis=-1), bias.mean(), atol=1e-9)

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.random.default_rng(0).standard_normal((3, 2)), requires_grad=True)
        g = T.backward(w.sum())
        assert np.array_equal(g.array(w), np.ones((3, 2), dtype=np.float32))

    def test_half_square_gives_w(self):
        w = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True, dtype=np.float64)
        g = T.backward((w * w).sum() * 0.5)
        assert np.allclose(g.array(w), w.data, rtol=0, atol=1e-15)

    def test_repeated_call_rederives_identical_values(self):
        rng = np.random.default_rng(2)
        w = leaf(rng, 4, 3)
        loss = (T.gelu(T.matmul(leaf(rng, 2, 4), w)) ** 2).sum()
        first = T.backward(loss)
        second = T.backward(loss)
        assert np.array_equal(first.array(w), second.array(w))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)

    def test_gradmap_holds_exactly_reachable_parameters(self):
        rng = np.random.default_rng(3)
        a, b, unused = leaf(rng, 3), leaf(rng, 3), leaf(rng, 3)
        frozen = Tensor(rng.standard_normal(3))
        g = T.backward((a * b + frozen).sum())
        assert set(map(id, g)) == {id(a), id(b)}
        for p in (a, b):
            assert g[p].shape == p.shape

    def test_no_grad_branch_is_absent(self):
        rng = np.random.default_rng(4)
        student, teacher = leaf(rng, 3, 3), leaf(rng, 3, 3)
        x = Tensor(rng.standard_normal((2, 3)), dtype=np.float64)
        with T.no_grad():
            target = T.softmax(T.matmul(x, teacher))
        loss = -(T.log_softmax(T.matmul(x, student)) * target.data).sum()
        g = T.backward(loss)
        assert student in g and teacher not in g

    def test_detach_blocks_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        g = T.backward((w * T.stop_gradient(w)).sum())
        assert np.array_equal(g.array(w), np.ones(3, dtype=np.float32))

    def test_shared_node_accumulates(self):
        w = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        y = w * 3.0
        g = T.backward((y + y * y).sum())
        assert g.array(w)[0] == pytest.approx(3 + 2 * 3 * 6.0)

    def test_broadcast_gradient_reduced_to_shape(self):
        b = Tensor(np.zeros(4), requires_grad=True)
        g = T.backward((Tensor(np.ones((3, 4))) + b).sum())
        assert np.array_equal(g.array(b), np.full(4, 3.0, dtype=np.float32))


class TestFiniteDiffOracle:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_sum_is_exact(self, seed):
        x = leaf(np.random.default_rng(seed), 3, 4)
        assert T.finite_diff_check(lambda t: t.sum(), x) < 1e-10

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_then_pick(self, seed):
        x = leaf(np.random.default_rng(seed), 6)
        assert T.finite_diff_check(lambda t: T.softmax(t)[2], x) < 1e-5

    def test_detects_a_wrong_gradient(self):
        x = leaf(np.random.default_rng(0), 4)

        def broken(t):
            out = T.exp(t)
            out._backward = lambda g: (g * 2.0 * out.data,)
            return out.sum()

        assert T.finite_diff_check(broken, x) > 0.3


class TestTensorBasics:
    def test_default_dtype_is_f32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == int(np.prod(t.shape)) == t.data.size

    def test_gelu_exact_values(self):
        x = np.array([-1.0, 0.0, 1.0, 2.5])
        expect = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        assert T.gelu(Tensor(x, dtype=np.float64)).data == pytest.approx(expect, abs=1e-14)

    def test_numeric_error_carries_layer(self):
        err = NumericError("boom", layer=2)
        assert err.layer == 2 and isinstance(err, ArithmeticError)
