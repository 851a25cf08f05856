"""Autodiff core: forward values, tape backward, per-primitive gradient
checks against central finite differences."""

import numpy as np
import pytest

from contrarec import autodiff as ad
from contrarec.autodiff import Tape, Tensor
from contrarec.errors import ContractError, ShapeError
from contrarec.rng import SeededRng

from oracles import assert_gradients_match, finite_difference_grads


def test_sigmoid_of_zero_is_half():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_l2_normalize_three_four_five():
    np.testing.assert_allclose(ad.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_softmax_symmetry():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_rows_sum_to_one_and_positive():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(40, 9)) * 5)
    y = ad.softmax(x).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert (y > 0).all()


def test_masked_softmax_zeroes_padding():
    mask = np.array([[True, True, False], [True, False, False]])
    y = ad.softmax(Tensor([[1.0, 2.0, 50.0], [0.5, 9.0, 9.0]]), mask=mask).data
    assert y[0, 2] == 0.0 and y[1, 1] == 0.0 and y[1, 2] == 0.0
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)
    assert y[1, 0] == 1.0


def test_softmax_all_masked_row_rejected():
    with pytest.raises(ContractError):
        ad.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_l2_normalize_unit_norm_and_zero_guard():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(25, 6)))
    norms = np.linalg.norm(ad.l2_normalize(x).data, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)
    zero = ad.l2_normalize(Tensor(np.zeros((2, 4))))
    assert (zero.data == 0).all()


def test_l2_normalize_zero_row_contributes_zero_gradient():
    x = Tensor(np.zeros((1, 3)))
    with Tape() as tape:
        loss = ad.tensor_sum(ad.l2_normalize(x))
    tape.backward(loss, [x])
    assert (x.grad == 0).all()


def test_dropout_eval_mode_is_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert ad.dropout(x, 0.5, training=False) is x
    assert ad.dropout(x, 0.0, training=True) is x


def test_dropout_zero_rate_and_scaling():
    rng = SeededRng(0).stream("dropout-test")
    x = Tensor(np.ones((100, 100)))
    y = ad.dropout(x, 0.1, rng=rng, training=True).data
    kept = y != 0
    # binomial proportion: 10_000 draws, expect ~10% zeroed
    zero_fraction = 1.0 - kept.mean()
    assert abs(zero_fraction - 0.1) < 0.01
    np.testing.assert_allclose(y[kept], 1.0 / 0.9)


def test_backward_square_sum():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        loss = ad.tensor_sum(ad.mul(x, x))
    tape.backward(loss, [x])
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_backward_unreachable_parameter_gets_zeros():
    x = Tensor([1.0, 2.0])
    w = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        loss = ad.tensor_sum(x)
    tape.backward(loss, [x, w])
    assert (w.grad == 0).all() and w.grad.shape == (2, 2)


def test_backward_rejects_nonscalar_loss():
    x = Tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shape_error():
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_gather_rows_out_of_range():
    with pytest.raises(ContractError):
        ad.gather_rows(Tensor(np.ones((3, 2))), np.array([3]))


def _fd_case(build, params, h=1e-3):
    """Run build() under a tape, backward, and compare with central FD."""
    with Tape() as tape:
        loss = build()
    tape.backward(loss, params.values())
    analytic = {k: t.grad.copy() for k, t in params.items()}
    numeric = finite_difference_grads(lambda: build().item(), params, h=h)
    assert_gradients_match(analytic, numeric)


def test_gradcheck_elementwise_chain():
    rng = np.random.default_rng(11)
    params = {
        "a": Tensor(rng.normal(size=(3, 4))),
        "b": Tensor(rng.normal(size=(4,))),
    }

    def build():
        mixed = ad.mul(ad.sigmoid(params["a"]), ad.tanh(ad.add(params["a"], params["b"])))
        return ad.tensor_sum(ad.log(ad.clamp_min(ad.add(mixed, 3.0), 1e-12)))

    _fd_case(build, params)


def test_gradcheck_matmul_batched_and_broadcast():
    rng = np.random.default_rng(12)
    params = {
        "x": Tensor(rng.normal(size=(2, 3, 4))),
        "w": Tensor(rng.normal(size=(4, 5))),
        "a": Tensor(rng.normal(size=(2, 5, 3))),
    }

    def build():
        h = ad.matmul(params["x"], params["w"])        # (2, 3, 5)
        g = ad.matmul(params["a"], h)                  # (2, 5, 5)
        return ad.tensor_sum(ad.mul(g, g))

    _fd_case(build, params)


def test_gradcheck_softmax_and_logsumexp_masked():
    rng = np.random.default_rng(13)
    mask = np.array([[True, True, True, False], [True, True, False, False]])
    params = {"x": Tensor(rng.normal(size=(2, 4)))}

    def build():
        probs = ad.softmax(params["x"], mask=mask)
        lse = ad.logsumexp(params["x"], mask=mask)
        return ad.add(ad.tensor_sum(ad.mul(probs, probs)), ad.tensor_sum(lse))

    _fd_case(build, params)


def test_gradcheck_l2_normalize():
    rng = np.random.default_rng(14)
    params = {"x": Tensor(rng.normal(size=(3, 5)) + 0.5)}

    def build():
        y = ad.l2_normalize(params["x"])
        return ad.tensor_sum(ad.mul(y, ad.sigmoid(y)))

    _fd_case(build, params)


def test_gradcheck_dropout_with_frozen_mask():
    base = np.random.default_rng(15).normal(size=(4, 6))
    params = {"x": Tensor(base)}

    def build():
        rng = SeededRng(99).stream("mask")  # identical mask on every call
        y = ad.dropout(params["x"], 0.25, rng=rng, training=True)
        return ad.tensor_sum(ad.mul(y, y))

    _fd_case(build, params)


def test_gradcheck_concat_slice_reshape_transpose():
    rng = np.random.default_rng(16)
    params = {
        "a": Tensor(rng.normal(size=(2, 3))),
        "b": Tensor(rng.normal(size=(2, 2))),
    }

    def build():
        joined = ad.concat([params["a"], params["b"]], axis=1)   # (2, 5)
        part = ad.slice_axis(joined, 1, 1, 4)                    # (2, 3)
        flipped = ad.transpose_last(part)                        # (3, 2)
        flat = ad.reshape(flipped, (6,))
        return ad.tensor_sum(ad.mul(flat, flat))

    _fd_case(build, params)


def test_gradcheck_gathers():
    rng = np.random.default_rng(17)
    params = {
        "table": Tensor(rng.normal(size=(6, 3))),
        "states": Tensor(rng.normal(size=(2, 4, 3))),
    }
    rows = np.array([[0, 2, 2], [5, 1, 0]])
    alias = np.array([[0, 1, 1, 3], [2, 2, 0, 1]])

    def build():
        picked = ad.gather_rows(params["table"], rows)           # (2, 3, 3)
        seq = ad.gather_nodes(params["states"], alias)           # (2, 4, 3)
        scores = ad.tensor_sum(ad.mul(seq, seq), axis=-1)        # (2, 4)
        col = ad.gather_cols(scores, np.array([1, 3]))
        return ad.add(ad.tensor_sum(ad.mul(picked, picked)), ad.tensor_sum(col))

    _fd_case(build, params)


def test_gradcheck_mean_and_scalar_mul():
    rng = np.random.default_rng(18)
    params = {"x": Tensor(rng.normal(size=(5, 3)))}

    def build():
        return ad.mean(ad.scalar_mul(ad.mul(params["x"], params["x"]), 2.5))

    _fd_case(build, params)


def test_determinism_same_seed_same_values():
    def run():
        rng = SeededRng(123).stream("determinism")
        x = Tensor(rng.normal(size=(8, 8)))
        y = ad.dropout(ad.softmax(x), 0.2, rng=rng, training=True)
        return ad.tensor_sum(y).item()

    assert run() == run()


def test_tape_is_isolated_per_step():
    # gradients never leak or accumulate across tapes
    x = Tensor([2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.reshape(ad.mul(x, x), ())
        tape.backward(loss, [x])
        np.testing.assert_allclose(x.grad, [4.0])
