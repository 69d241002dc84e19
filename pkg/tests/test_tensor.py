import math

import numpy as np
import pytest

from notespan import tensor as T
from notespan.tensor import (
    ContractError, ShapeError, Tensor, backward, fresh_tape, no_tape,
)
from oracles import central_difference_grad, matmul_loops, max_relative_error, softmax_row_direct


def test_matmul_identity():
    a = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_row_by_column():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    ours = T.matmul(Tensor(a), Tensor(b)).data
    assert np.abs(ours - matmul_loops(a, b)).max() < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_matmul_associativity():
    rng = np.random.default_rng(5)
    for _ in range(25):
        a, b, c = (Tensor(rng.normal(size=s)) for s in [(3, 4), (4, 5), (5, 2)])
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.abs(left - right).max() < 1e-9


def test_softmax_uniform_row():
    out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    assert np.abs(out.data - 1.0 / 3.0).max() < 1e-12


def test_softmax_large_values_stable():
    out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(out).all()
    assert out[0, 0] > 1.0 - 1e-12 and out[0, 1] < 1e-12


def test_softmax_matches_direct_exponentiation():
    out = T.softmax_rows(Tensor([[1.0, 2.0, 3.0]])).data[0]
    expected = softmax_row_direct([1.0, 2.0, 3.0])
    assert np.abs(out - expected).max() < 1e-12


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x = rng.normal(scale=5.0, size=(4, 6))
        out = T.softmax_rows(Tensor(x)).data
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-9
        assert (out >= 0).all()
        shifted = T.softmax_rows(Tensor(x + rng.normal() * np.ones((4, 6)))).data
        assert np.abs(out - shifted).max() < 1e-9


def test_backward_sum_gives_ones():
    with fresh_tape():
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(T.total(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    with fresh_tape():
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.total(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    with fresh_tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        with pytest.raises(ContractError):
            backward(y)


def test_grad_not_tracked_without_requires_grad():
    with fresh_tape():
        x = Tensor([1.0, 2.0])
        out = T.total(T.mul(x, x))
        assert not out.requires_grad
    assert x.grad is None


def test_no_tape_blocks_recording():
    with fresh_tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_tape():
            T.mul(x, x)
        assert len(tape) == 0


def test_repeated_backward_accumulates():
    with fresh_tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.total(x)
        backward(loss)
        backward(loss)
    assert np.allclose(x.grad, [2.0, 2.0])


def test_add_row_broadcasts_and_sums_grad():
    with fresh_tape():
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        v = Tensor([1.0, -1.0], requires_grad=True)
        out = T.add_row(a, v)
        assert out.data.tolist() == [[2.0, 0.0]] * 3
        backward(T.total(out))
    assert np.array_equal(v.grad, [3.0, 3.0])


def test_embedding_lookup_gathers_and_scatters():
    with fresh_tape():
        table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        out = T.embedding_lookup(table, [1, 1, 3])
        assert out.data.tolist() == [[2.0, 3.0], [2.0, 3.0], [6.0, 7.0]]
        backward(T.total(out))
    assert table.grad.tolist() == [[0, 0], [2, 2], [0, 0], [1, 1]]


def test_embedding_lookup_range_check():
    with pytest.raises(ShapeError):
        T.embedding_lookup(Tensor(np.zeros((4, 2))), [0, 4])


def test_row_slice_and_concat_roundtrip():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    t = Tensor(x)
    top = T.row_slice(t, 0, 2)
    rest = T.row_slice(t, 2, 5)
    assert np.array_equal(np.vstack([top.data, rest.data]), x)
    left = T.concat_cols([Tensor(x[:, :1]), Tensor(x[:, 1:])])
    assert np.array_equal(left.data, x)


def test_finiteness_check():
    t = Tensor([1.0, 2.0])
    t.assert_finite()
    t.data[0] = np.nan
    assert not t.is_finite()
    with pytest.raises(ContractError):
        t.assert_finite("unit test")


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(123)
        a = Tensor(rng.normal(size=(4, 4)))
        b = Tensor(rng.normal(size=(4, 4)))
        out = T.softmax_rows(T.matmul(a, T.sigmoid(b)))
        return out.data

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# Finite-difference gradient checks, one per primitive
# ---------------------------------------------------------------------------

def _gradcheck(make_inputs, forward, seed=0, h=1e-5, tol=1e-4):
    """Compare tape gradients with central differences for every input."""
    rng = np.random.default_rng(seed)
    arrays = make_inputs(rng)

    def run(arrs):
        return forward([Tensor(a) for a in arrs])

    with fresh_tape():
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        backward(forward(tensors))
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    for i, base in enumerate(arrays):
        def scalar_at(x, i=i):
            arrs = [a.copy() for a in arrays]
            arrs[i] = x
            with no_tape():
                return run(arrs).item()

        numeric = central_difference_grad(scalar_at, base.copy(), h=h)
        err = max_relative_error(analytic[i], numeric)
        assert err < tol, f"input {i}: max relative error {err:.3e}"


def _weighted(out, seed=99):
    """total(out * fixed random weights): makes upstream grads non-uniform."""
    w = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return T.total(T.mul(out, w))


PRIMITIVE_CASES = {
    "add": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda ts: _weighted(T.add(ts[0], ts[1]))),
    "sub": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda ts: _weighted(T.sub(ts[0], ts[1]))),
    "mul": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))],
            lambda ts: _weighted(T.mul(ts[0], ts[1]))),
    "scale": (lambda rng: [rng.normal(size=(2, 5))],
              lambda ts: _weighted(T.scale(ts[0], -1.7))),
    "matmul": (lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))],
               lambda ts: _weighted(T.matmul(ts[0], ts[1]))),
    "transpose": (lambda rng: [rng.normal(size=(3, 4))],
                  lambda ts: _weighted(T.transpose(ts[0]))),
    "concat_cols": (lambda rng: [rng.normal(size=(3, 2)), rng.normal(size=(3, 3))],
                    lambda ts: _weighted(T.concat_cols(ts))),
    "row_slice": (lambda rng: [rng.normal(size=(5, 3))],
                  lambda ts: _weighted(T.row_slice(ts[0], 1, 4))),
    "add_row": (lambda rng: [rng.normal(size=(4, 3)), rng.normal(size=(3,))],
                lambda ts: _weighted(T.add_row(ts[0], ts[1]))),
    "sigmoid": (lambda rng: [rng.normal(size=(3, 3))],
                lambda ts: _weighted(T.sigmoid(ts[0]))),
    "log": (lambda rng: [rng.random(size=(3, 3)) + 0.5],
            lambda ts: _weighted(T.log(ts[0]))),
    "absolute": (lambda rng: [rng.normal(size=(3, 3)) + np.sign(rng.normal(size=(3, 3)))],
                 lambda ts: _weighted(T.absolute(ts[0]))),
    "relu": (lambda rng: [rng.normal(size=(3, 3)) * 0.5 + np.sign(rng.normal(size=(3, 3)))],
             lambda ts: _weighted(T.relu(ts[0]))),
    "total": (lambda rng: [rng.normal(size=(3, 2))],
              lambda ts: T.scale(T.total(ts[0]), 1.3)),
    "mean": (lambda rng: [rng.normal(size=(3, 2))],
             lambda ts: T.scale(T.mean(ts[0]), -2.1)),
    "reshape": (lambda rng: [rng.normal(size=(3, 4))],
                lambda ts: _weighted(T.reshape(ts[0], (2, 6)))),
    "softmax_rows": (lambda rng: [rng.normal(size=(3, 4))],
                     lambda ts: _weighted(T.softmax_rows(ts[0]))),
    "log_softmax_rows": (lambda rng: [rng.normal(size=(3, 4))],
                         lambda ts: _weighted(T.log_softmax_rows(ts[0]))),
    "layer_norm_rows": (lambda rng: [rng.normal(size=(4, 6)),
                                     rng.normal(size=(6,)) + 1.0,
                                     rng.normal(size=(6,))],
                        lambda ts: _weighted(T.layer_norm_rows(ts[0], ts[1], ts[2]))),
    "embedding_lookup": (lambda rng: [rng.normal(size=(5, 3))],
                         lambda ts: _weighted(T.embedding_lookup(ts[0], [0, 2, 2, 4]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradcheck(name):
    make_inputs, forward = PRIMITIVE_CASES[name]
    _gradcheck(make_inputs, forward, seed=hash(name) % 2**32)


def test_gradcheck_composition():
    # A small chained expression touching several rules at once.
    def forward(ts):
        x, w, v = ts
        h = T.relu(T.add_row(T.matmul(x, w), v))
        return T.mean(T.mul(T.sigmoid(h), h))

    _gradcheck(
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)),
                     rng.normal(size=(5,)) + 2.0],
        forward, seed=21)


def test_mask_fill_underflows_to_zero_weight():
    row = np.array([[0.3, T.MASK_FILL, 1.1]])
    out = T.softmax_rows(Tensor(row)).data[0]
    assert out[1] == 0.0
    assert math.isclose(out[0] + out[2], 1.0, rel_tol=1e-12)
