import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qecredteam import autodiff as ad
from qecredteam.autodiff import Adam, ParamStore, Tensor
from qecredteam.errors import ContractError, DimensionError, NumericError

from conftest import max_relative_error

RNG = np.random.default_rng(1234)


def leaf(shape, scale=1.0, rng=RNG):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def weighted_sum(out):
    """Scalar probe with fixed random upstream weights."""
    w = Tensor(np.random.default_rng(99).normal(size=out.shape))
    return ad.tsum(ad.mul(out, w))


def test_relu_example():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


@pytest.mark.parametrize("c", [0.0, 3.5, -700.0, 1e6])
def test_softmax_uniform_for_constant_logits(c):
    out = ad.softmax(Tensor([c, c, c])).data
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_layer_norm_example():
    out = ad.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=1e-14).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-12)


def test_backward_linear_case():
    x = np.array([0.5, -2.0, 3.0])
    w = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    ad.backward(ad.tsum(ad.mul(w, Tensor(x))))
    np.testing.assert_array_equal(w.grad, x)


def test_sigmoid_slope_at_zero():
    z = Tensor([0.0], requires_grad=True)
    ad.backward(ad.tsum(ad.sigmoid(z)))
    assert z.grad[0] == 0.25


def test_fan_out_accumulates():
    x = Tensor([2.0], requires_grad=True)
    ad.backward(ad.tsum(ad.mul(x, x)))  # d(x^2)/dx
    assert x.grad[0] == 4.0


def test_backward_requires_scalar():
    x = leaf((3,))
    with pytest.raises(ContractError):
        ad.backward(ad.relu(x))


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ad.matmul(leaf((2, 3)), leaf((2, 3)))
    with pytest.raises(DimensionError):
        ad.add(leaf((2, 3)), leaf((2,)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_is_numeric_error():
    with pytest.raises(NumericError):
        ad.scale(Tensor([1e308]), 10.0)
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0]))


def test_no_grad_records_nothing():
    x = leaf((2,))
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad and y._parents == ()


def _segments():
    return np.array([0, 0, 1, 1, 1, 2]), 3


OP_CASES = {
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)]),
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_bias": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 2), (3, 2)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 2), (3, 2)]),
    "mul_column": (lambda a, b: ad.mul(a, b), [(4, 3), (4, 1)]),
    "scale": (lambda a: ad.scale(a, -1.7), [(5,)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 1)]),
    "reshape": (lambda a: ad.reshape(a, (6,)), [(2, 3)]),
    "relu": (lambda a: ad.relu(a), [(4, 3)]),
    "leaky_relu": (lambda a: ad.leaky_relu(a, 0.2), [(4, 3)]),
    "layer_norm": (lambda x, g, s: ad.layer_norm(x, g, s), [(3, 5), (5,), (5,)]),
    "softmax_group": (lambda a: ad.segment_softmax(a, *_segments()), [(6,)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(5,)]),
    "log": (lambda a: ad.log(ad.sigmoid(a)), [(5,)]),
    "log_sigmoid": (lambda a: ad.log_sigmoid(a), [(5,)]),
    "mean_nodes": (lambda a: ad.segment_mean(a, *_segments()), [(6, 2)]),
    "gather_rows": (lambda a: ad.gather_rows(a, [2, 0, 2, 1]), [(3, 2)]),
    "segment_sum": (lambda a: ad.segment_sum(a, *_segments()), [(6, 2)]),
    "sum": (lambda a: ad.tsum(a), [(2, 3)]),
    "mean": (lambda a: ad.tmean(a), [(2, 3)]),
}


@pytest.mark.parametrize("kind", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(kind):
    fn, shapes = OP_CASES[kind]
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    inputs = [leaf(s, rng=rng) for s in shapes]
    err = max_relative_error(lambda: weighted_sum(fn(*inputs)), inputs)
    assert err < 1e-4, f"{kind}: max relative error {err:.3g}"


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
def test_softmax_normalised_and_shift_invariant(x, c):
    p = ad.softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, p, rtol=0, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 8), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_row_statistics(x):
    # spread rows so the variance dwarfs eps = 1e-5
    x = x + np.arange(8) * 40.0
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=1) - 1.0) < 1e-6)


def test_forward_op_dispatch():
    assert ad.forward_op("relu", Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    with pytest.raises(ContractError):
        ad.forward_op("conv3d", Tensor([1.0]))


# ---------------------------------------------------------------------------
# optimiser


def test_adam_zero_gradient_leaves_params():
    ps = ParamStore()
    ps.add("w", [1.0, -2.0])
    ps["w"].grad = np.zeros(2)
    Adam(ps, lr=0.1).step()
    np.testing.assert_array_equal(ps["w"].data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    ps = ParamStore()
    ps.add("w", [1.0, 1.0, 1.0])
    ps["w"].grad = np.array([3.0, -0.2, 1e-3])
    opt = Adam(ps, lr=0.01, eps=1e-12)
    opt.step()
    # bias correction makes m_hat = g and v_hat = g^2 on step one
    np.testing.assert_allclose(ps["w"].data, 1.0 - 0.01 * np.sign([3.0, -0.2, 1e-3]), rtol=0, atol=1e-9)


def test_adam_rejects_non_finite_gradient_by_name():
    ps = ParamStore()
    ps.add("layer.weight", [0.0])
    ps["layer.weight"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="layer.weight"):
        Adam(ps).step()


def _train_once(seed):
    rng = np.random.default_rng(seed)
    ps = ParamStore()
    ps.add("w", rng.normal(size=(3, 2)))
    x = Tensor(rng.normal(size=(5, 3)))
    opt = Adam(ps, lr=0.05)
    for _ in range(20):
        ps.zero_grad()
        ad.backward(ad.tsum(ad.sigmoid(ad.matmul(x, ps["w"]))))
        opt.step()
    return ps


def test_adam_runs_are_bit_identical():
    a, b = _train_once(3), _train_once(3)
    assert a.digest() == b.digest()
    assert np.array_equal(a["w"].data, b["w"].data)


def test_param_store_round_trip():
    ps = _train_once(4)
    back = ParamStore.from_dict(ps.to_dict())
    assert back.digest() == ps.digest()
