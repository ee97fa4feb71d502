import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gar3d import numkernel as nk
from gar3d.errors import ContractError, DimensionError, FormatError
from gar3d.numkernel import Rng, Tensor, fd_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_values():
    I = Tensor(np.eye(3))
    assert np.array_equal((I @ I).data, np.eye(3))
    out = nk.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = Rng(0)
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 2)))
    assert fd_check(lambda x: (x @ b).sum(), a) < 1e-6


def test_softmax_examples():
    assert np.allclose(nk.softmax_lastdim(Tensor(np.zeros(3))).data, 1 / 3)
    assert np.array_equal(nk.softmax_lastdim(Tensor([0.0, -np.inf])).data, [1.0, 0.0])


def test_softmax_gradient():
    rng = Rng(1)
    x = Tensor(rng.normal(size=6), requires_grad=True)
    w = rng.normal(size=6)
    assert fd_check(lambda t: (nk.softmax_lastdim(t) * w).sum(), x) < 1e-6


def test_softmax_nan_propagates():
    assert np.isnan(nk.softmax_lastdim(Tensor([np.nan, 0.0])).data).all()


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one(x):
    s = nk.softmax_lastdim(Tensor(x)).data
    assert np.allclose(s.sum(-1), 1.0)
    assert (s >= 0).all()


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_sum_is_2x():
    x = Tensor(Rng(2).normal(size=(3, 2)), requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nk.backward(x * 2)


def test_composite_chain_gradient():
    rng = Rng(3)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    v = rng.normal(size=(5, 3))
    c = rng.normal(size=(4, 3))
    f = lambda t: (nk.softmax_lastdim(t @ v) * c).sum()
    assert fd_check(f, w) < 1e-5


def test_broadcast_gradients_unbroadcast():
    rng = Rng(4)
    a = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 4)), requires_grad=True)
    f = lambda _x: ((a * b + a / (2 + b * b)) ** 2).sum()
    assert fd_check(f, a) < 1e-6
    assert fd_check(f, b) < 1e-6


@pytest.mark.parametrize("name", ["gelu", "tanh", "exp", "sqrt", "log", "layer_norm", "atan2", "norm", "index"])
def test_elementwise_gradients(name):
    rng = Rng(5)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    c = rng.normal(size=(3, 4))
    g, b = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    fns = {
        "gelu": lambda t: (nk.gelu(t) * c).sum(),
        "tanh": lambda t: (nk.tanh(t) * c).sum(),
        "exp": lambda t: (nk.exp(t) * c).sum(),
        "sqrt": lambda t: (nk.sqrt(t) * c).sum(),
        "log": lambda t: (nk.log(t) * c).sum(),
        "layer_norm": lambda t: (nk.layer_norm(t, g, b) * c).sum(),
        "atan2": lambda t: (nk.atan2(t, t[::-1] - 1.0) * c).sum(),
        "norm": lambda t: (nk.norm_lastdim(t) * c[:, 0]).sum(),
        "index": lambda t: (t[np.array([0, 2, 2])] * c[:3]).sum(),
    }
    assert fd_check(fns[name], x) < 1e-5


def test_fd_check_of_sum_is_exact_on_dyadic_grid():
    # dyadic inputs and step keep every perturbed sum exactly representable
    x = Tensor(np.round(Rng(6).normal(size=(2, 3)) * 8) / 8)
    assert fd_check(lambda t: t.sum(), x, h=2.0 ** -20) < 1e-10


@given(arrays(np.float64, (2, 3), elements=finite))
@settings(max_examples=30, deadline=None)
def test_fd_check_of_sum_is_roundoff_limited(x):
    assert fd_check(lambda t: t.sum(), Tensor(x)) < 1e-8


def test_fd_check_rejects_zero_step():
    with pytest.raises(ContractError):
        fd_check(lambda t: t.sum(), Tensor(np.ones(2)), h=0)


def test_fd_check_restores_input():
    x = Tensor(np.array([1.0, 2.0]))
    fd_check(lambda t: (t * t).sum(), x)
    assert np.array_equal(x.data, [1.0, 2.0]) and x.grad is None


def test_no_grad_builds_no_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with nk.no_grad():
        y = x * 3
    assert not y.requires_grad


def test_rng_is_reproducible_and_children_independent():
    assert np.array_equal(Rng(7).normal(size=5), Rng(7).normal(size=5))
    assert not np.array_equal(Rng(7).child(1).normal(size=5), Rng(7).child(2).normal(size=5))


def test_rng_state_round_trip():
    r = Rng(8)
    r.normal(size=3)
    blob = r.to_bytes()
    r2 = Rng.from_bytes(blob)
    assert np.array_equal(r.normal(size=4), r2.normal(size=4))


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int64, np.bool_])
def test_gten_round_trip(tmp_path, dtype):
    x = (Rng(9).normal(size=(2, 3, 4)) * 10).astype(dtype)
    nk.save_gten(tmp_path / "x.gten", x)
    y = nk.load_gten(tmp_path / "x.gten")
    assert y.dtype == x.dtype and np.array_equal(x, y)


def test_gten_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "x.gten"
    nk.save_gten(p, np.ones(4))
    blob = p.read_bytes()
    p.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        nk.load_gten(p)
    p.write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        nk.load_gten(p)
