import numpy as np
import pytest

from stsens import autodiff as ad
from stsens.autodiff import Tensor


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of the scalar ``f(*arrays)`` for each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            dn = f(*arrays)
            a[i] = old
            g[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def check(op, *shapes, seed=0, positive=False, weight=True):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    out_w = None

    def value(*arrs):
        nonlocal out_w
        with ad.no_grad():
            y = op(*[Tensor(a) for a in arrs]).data
        if out_w is None:
            out_w = np.random.default_rng(seed + 1).normal(size=y.shape) if weight else np.ones(y.shape)
        return float(np.sum(y * out_w))

    value(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    y = op(*ts)
    (y * Tensor(out_w)).sum().backward()
    num = numeric_grad(value, arrays)
    for t, n in zip(ts, num):
        np.testing.assert_allclose(t.grad, n, rtol=1e-6, atol=1e-8)


class TestElementwise:
    def test_add_broadcast(self):
        check(lambda a, b: a + b, (3, 4), (4,))

    def test_sub_broadcast(self):
        check(lambda a, b: a - b, (2, 1, 4), (3, 1))

    def test_mul(self):
        check(lambda a, b: a * b, (3, 4), (3, 1))

    def test_div(self):
        check(lambda a, b: a / b, (3, 4), (4,), positive=True)

    def test_square_abs(self):
        check(lambda a: ad.square(a) + ad.tabs(a), (5, 3))

    def test_sigmoid_tanh(self):
        check(lambda a: ad.sigmoid(a) * ad.tanh(a), (4, 4))

    def test_elu(self):
        check(ad.elu, (6, 5))

    def test_exp(self):
        check(ad.exp, (3, 3))

    def test_neg_and_rsub(self):
        check(lambda a: 1.0 - (-a), (3,))


class TestReductions:
    def test_softmax(self):
        check(lambda a: ad.softmax(a, axis=-1), (3, 5))

    def test_softmax_other_axis(self):
        check(lambda a: ad.softmax(a, axis=0), (4, 2))

    def test_layer_norm(self):
        check(lambda a, g, b: ad.layer_norm(a, g, b), (4, 6), (6,), (6,))

    def test_sum_mean(self):
        check(lambda a: ad.tsum(a, axis=1, keepdims=True) * ad.tmean(a, axis=0), (3, 4))

    def test_full_mean(self):
        check(lambda a: ad.tmean(a) * a, (2, 3))


class TestLinearAlgebra:
    def test_matmul_2d(self):
        check(lambda a, b: a @ b, (3, 4), (4, 2))

    def test_matmul_folded(self):
        check(lambda a, b: a @ b, (2, 3, 4), (4, 5))

    def test_matmul_batched(self):
        check(lambda a, b: a @ b, (2, 3, 4), (2, 4, 5))

    def test_einsum(self):
        check(lambda a, b: ad.einsum("nij,njk->nik", a, b), (2, 3, 4), (2, 4, 2))


class TestShapes:
    def test_reshape_transpose(self):
        check(lambda a: a.reshape(4, 3).transpose(1, 0) * 2.0, (3, 4))

    def test_basic_getitem(self):
        check(lambda a: a[:, 1:3], (4, 5))

    def test_fancy_getitem_repeats(self):
        idx = np.array([0, 2, 2, 1])
        check(lambda a: a[idx], (3, 2))

    def test_concat_stack(self):
        check(lambda a, b: ad.concat([a, b], axis=1) + ad.stack([a, a], axis=1).reshape(2, 6), (2, 3), (2, 3))

    def test_expand_broadcast(self):
        check(lambda a: ad.broadcast_to(ad.expand_dims(a, 0), (3, 2, 4)), (2, 4))


class TestEngine:
    def test_shared_subexpression(self):
        # gradients from both uses must accumulate
        check(lambda a: (a * a) + ad.sigmoid(a * a), (3,))

    def test_no_grad_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = a * 2.0
        assert not y.requires_grad
        assert ad.grad_enabled()

    def test_nonfinite_gradient_raises(self):
        a = Tensor(np.array([0.0]), requires_grad=True)
        with np.errstate(divide="ignore"):
            y = Tensor(np.array([1.0])) / a
        with np.errstate(divide="ignore"),  pytest.raises(FloatingPointError, match="non-finite"):
            y.sum().backward()

    def test_deep_chain_no_recursion_error(self):
        a = Tensor(np.array([1.0]), requires_grad=True)
        y = a
        for _ in range(5000):
            y = y + 0.0
        y.sum().backward()
        assert a.grad[0] == 1.0

    def test_sigmoid_stable_for_large_inputs(self):
        a = Tensor(np.array([-1000.0, 1000.0]), requires_grad=True)
        y = ad.sigmoid(a)
        assert np.all(np.isfinite(y.data))
        y.sum().backward()
        assert np.all(np.isfinite(a.grad))
