import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from deop import numcore as nc
from deop.numcore import ContractError, GradTape, NonFiniteError, ShapeError, Tensor, grad_check

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def mat(r, c):
    return arrays(np.float64, (r, c), elements=finite)


def test_matmul_matches_numpy(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b)


def test_no_implicit_broadcast():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_scalar_ops_are_the_only_expansion():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(nc.scale(x, 2).data, x.data * 2)
    np.testing.assert_array_equal(nc.add_scalar(x, 1).data, x.data + 1)


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(ContractError):
        nc.log(Tensor([0.0, 1.0]))


def test_explicit_expansions(rng):
    x = rng.normal(size=(2, 3, 4))
    b, w, v = rng.normal(size=4), rng.normal(size=(2, 3)), rng.normal(size=4)
    np.testing.assert_allclose(nc.add_bias(Tensor(x), Tensor(b)).data, x + b)
    np.testing.assert_allclose(nc.scale_rows(Tensor(x), Tensor(w)).data, x * w[..., None])
    np.testing.assert_allclose(nc.scale_channels(Tensor(x), Tensor(v)).data, x * v)


def test_softmax_stable_for_large_inputs():
    y = nc.softmax(Tensor([[1000.0, 1000.0, -1000.0]]), axis=1).data
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


@given(mat(3, 4))
def test_softmax_rows_are_distributions(x):
    y = nc.softmax(Tensor(x), axis=1).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@given(mat(3, 4))
def test_log_softmax_is_log_of_softmax(x):
    np.testing.assert_allclose(nc.log_softmax(Tensor(x), axis=1).data,
                               np.log(nc.softmax(Tensor(x), axis=1).data), atol=1e-9)


@given(arrays(np.float64, (4, 6), elements=st.floats(-3, 3)))
def test_layer_norm_zero_mean_unit_var(x):
    x = x + np.arange(6.0)  # avoid constant rows
    y = nc.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=1), x.var(axis=1) / (x.var(axis=1) + 1e-5), atol=1e-9)


def test_batch_norm_statistics(rng):
    x = rng.normal(3.0, 2.0, size=(5, 4, 4, 3))
    y = nc.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(y.reshape(-1, 3).mean(0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.reshape(-1, 3).var(0), 1.0, atol=1e-4)


def test_l2_normalize_zero_rows_map_to_zero():
    y = nc.l2_normalize_rows(Tensor([[3.0, 4.0], [0.0, 0.0]])).data
    np.testing.assert_allclose(y, [[0.6, 0.8], [0.0, 0.0]])


def test_gelu_matches_tanh_formula():
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(nc.gelu(Tensor(x)).data, ref)


def test_conv2d_matches_direct_loops(rng):
    x, w, b = rng.normal(size=(2, 5, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    y = nc.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 6, 4))
    for n in range(2):
        for i in range(5):
            for j in range(6):
                ref[n, i, j] = np.einsum("abc,abcd->d", xp[n, i:i + 3, j:j + 3], w) + b
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_index_scatter_adds_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with GradTape() as tape:
        y = nc.sum(x[np.array([0, 0, 2])])
    (g,) = tape.gradient(y, [x])
    np.testing.assert_array_equal(g, [2, 0, 1, 0])


def test_gradient_of_unused_source_is_zero():
    x, z = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    with GradTape() as tape:
        y = nc.sum(x)
    gx, gz = tape.gradient(y, [x, z])
    np.testing.assert_array_equal(gz, 0)
    np.testing.assert_array_equal(gx, 1)


def test_gradient_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = nc.scale(x, 2)
    with pytest.raises(ContractError):
        tape.gradient(y, [x])


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = nc.scale(x, 2)
    assert not y.requires_grad


@pytest.mark.parametrize("name,f", [
    ("matmul", lambda t: nc.sum(nc.gelu(t @ Tensor(np.linspace(-1, 1, 20).reshape(4, 5))))),
    ("div", lambda t: nc.sum(nc.div(t, nc.add_scalar(nc.exp(t), 1.0)))),
    ("sqrt", lambda t: nc.sum(nc.sqrt(nc.add_scalar(nc.mul(t, t), 1.0)))),
    ("sigmoid", lambda t: nc.sum(nc.sigmoid(t) * t)),
    ("softmax0", lambda t: nc.sum(nc.softmax(t, axis=0) * t)),
    ("transpose", lambda t: nc.sum(nc.transpose(t) @ t)),
    ("concat", lambda t: nc.sum(nc.exp(nc.concat([t, nc.scale(t, 2)], axis=1)))),
    ("stack", lambda t: nc.sum(nc.sigmoid(nc.stack([t, t * t], axis=2)))),
    ("mean", lambda t: nc.sum(nc.mean(t * t, axis=0) * nc.mean(t, axis=0))),
    ("clamp", lambda t: nc.sum(nc.clamp(t, -0.5, 0.7) * t)),
])
def test_tape_matches_finite_differences(name, f, rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(f, x) < 1e-6, name


def test_grad_check_detects_wrong_gradient(rng):
    def wrong(t):
        y = nc.sum(t * t)
        return nc._result(y.data, (t,), lambda g: (g * 3 * t.data,), "wrong")

    assert grad_check(wrong, Tensor(rng.normal(size=4))) > 1e-2
