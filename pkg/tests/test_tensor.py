"""Oracle checks for the autodiff core: every differentiable op's tape gradient
must match central finite differences (float64, random cotangents)."""

import numpy as np
import pytest

from mard import tensor as T
from mard.rng import Rng


def fd_vjp_check(f, shapes, seed=0, step=1e-5, tol=1e-4):
    """Compare tape gradients of sum(f(xs) * cotangent) against central FD."""
    rng = Rng(seed)
    xs = [T.Tensor(rng.normal(s, dtype=np.float64), requires_grad=True) for s in shapes]
    out = f(*xs)
    cot = rng.normal(out.shape, dtype=np.float64)
    T.sum_(out * cot).backward()
    for x in xs:
        flat = x.values.reshape(-1)
        stride = max(1, x.size // 6)
        for c in range(0, x.size, stride):
            orig = flat[c]
            flat[c] = orig + step
            hi = float(T.sum_(f(*xs) * cot).values)
            flat[c] = orig - step
            lo = float(T.sum_(f(*xs) * cot).values)
            flat[c] = orig
            fd = (hi - lo) / (2 * step)
            an = x.grad.reshape(-1)[c]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            assert rel < tol, f"rel err {rel} at coord {c}"


OPS = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: a * b, [(2, 3, 4), (3, 4)]),
    "power": (lambda a: T.power(a, 3.0), [(3, 3)]),
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: T.matmul(a, b), [(2, 2, 3, 4), (2, 2, 4, 2)]),
    "matmul_bcast": (lambda a, b: T.matmul(a, b), [(3, 4), (2, 4, 5)]),
    "reshape": (lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    "swapaxes": (lambda a: T.swapaxes(a, 0, 2), [(2, 3, 4)]),
    "sum_axis": (lambda a: T.sum_(a, axis=1), [(3, 4, 2)]),
    "mean_all": (lambda a: T.reshape(T.mean(a), (1,)), [(3, 4)]),
    "silu": (lambda a: T.silu(a), [(3, 5)]),
    "softmax": (lambda a: T.softmax(a), [(4, 6)]),
    "layer_norm": (lambda a: T.layer_norm(a), [(5, 8)]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 4)]),
    "slice": (lambda a: a[:, 1:4], [(3, 6)]),
    "split": (lambda a: T.split(a, 3, axis=-1)[1], [(2, 6)]),
    "broadcast_to": (lambda a: T.broadcast_to(T.reshape(a, (2, 1, 3)), (2, 5, 3)), [(2, 3)]),
    "embedding": (lambda a: T.embedding(a, np.array([0, 2, 2, 1])), [(3, 4)]),
    "gather_rows": (lambda a: T.gather_rows(a, np.array([[1, 0, 1], [2, 2, 0]])), [(2, 3, 4)]),
    "cross_entropy": (lambda a: T.reshape(T.cross_entropy(a, np.array([1, 0, 3])), (1,)), [(3, 4)]),
    "nll_rows": (lambda a: T.nll_rows(a, np.array([1, 0, 3])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    f, shapes = OPS[name]
    fd_vjp_check(f, shapes, seed=hash(name) % 1000)


@pytest.mark.parametrize("seed", range(5))
def test_random_shapes_up_to_rank3(seed):
    rng = Rng(seed)
    rank = int(rng.integers(1, 4))
    shape = tuple(int(rng.integers(1, 5)) for _ in range(rank))
    fd_vjp_check(lambda a: T.silu(a * 2.0 + 1.0), [shape], seed=seed + 100)


def test_softmax_rows_sum_to_one():
    rng = Rng(1)
    x = T.softmax(T.Tensor(rng.normal((10, 7)) * 5.0))
    np.testing.assert_allclose(x.values.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_symmetric_input():
    out = T.softmax(T.Tensor(np.zeros(3))).values
    np.testing.assert_allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)


def test_silu_at_zero():
    assert float(T.silu(T.Tensor(np.array([0.0]))).values[0]) == 0.0


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor(a))
    np.testing.assert_array_equal(out.values, a)


def test_layer_norm_moments_before_affine():
    rng = Rng(2)
    y = T.layer_norm(T.Tensor(rng.normal((6, 32)) * 3.0 + 1.0)).values
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_matmul_rank1_rejected():
    with pytest.raises(ValueError):
        T.matmul(T.Tensor(np.ones(3)), T.Tensor(np.ones((3, 2))))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4,))))


def test_backward_requires_scalar():
    t = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_no_grad_suppresses_tape():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.silu(x * 3.0)
    assert y._parents == ()
    assert not y.requires_grad


def test_constant_graphs_are_pruned():
    a = T.Tensor(np.ones(3))
    b = T.Tensor(np.ones(3))
    assert (a + b)._parents == ()


def test_grad_accumulates_across_uses():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    y = x * x  # dy/dx = 2x via two parent edges
    T.sum_(y).backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_float32_stays_float32():
    x = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = T.silu((x * 2.0 + 1.0) - 0.5)
    assert y.dtype == np.float32


def test_values_finite_after_forward_backward():
    rng = Rng(3)
    x = T.Tensor(rng.normal((4, 8), dtype=np.float32), requires_grad=True)
    out = T.sum_(T.softmax(T.layer_norm(x) * 10.0))
    out.backward()
    assert np.all(np.isfinite(out.values))
    assert np.all(np.isfinite(x.grad))
