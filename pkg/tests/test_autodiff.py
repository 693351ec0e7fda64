import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcmoa import autodiff as ad
from tcmoa.autodiff import (
    GradMap,
    ShapeError,
    Tensor,
    UnknownPrimitiveError,
    apply_primitive,
    backward,
    finite_difference_check,
)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([1.0, 1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 7)) * 30.0)
    out = ad.softmax(x)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), rtol=0, atol=1e-12)


@given(st.integers(-7, 7), st.integers(-7, 7))
@settings(max_examples=30, deadline=None)
def test_roll2d_round_trip_bitwise(sy, sx):
    rng = np.random.default_rng(42)
    t = Tensor(rng.normal(size=(3, 3, 2)))
    back = ad.roll2d(ad.roll2d(t, (sy, sx)), (-sy, -sx))
    assert np.array_equal(back.data, t.data)


def test_conv2d_scalar_kernel():
    x = Tensor(np.ones((2, 2, 1)))
    w = Tensor(np.full((1, 1, 1, 1), 3.0))
    out = ad.conv2d(x, w)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 1), 3.0))


def test_conv2d_replicate_vs_zero_border():
    # constant image: replicate padding keeps a box-sum kernel constant,
    # zero padding shrinks it at the border
    x = Tensor(np.ones((4, 4, 1)))
    w = Tensor(np.ones((3, 3, 1, 1)))
    rep = ad.conv2d(x, w, padding="replicate")
    zer = ad.conv2d(x, w, padding="zero")
    np.testing.assert_allclose(rep.data, np.full((4, 4, 1), 9.0))
    assert zer.data[0, 0, 0] == 4.0 and zer.data[1, 1, 0] == 9.0


def test_grouped_average_constant_groups_exact():
    base = np.array([1.0, 1.0, 1.0, -2.5, -2.5, -2.5])
    x = Tensor(np.tile(base, (2, 2, 1)))
    out = ad.grouped_average(x, 3)
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.5], (2, 2, 1)))


def test_quadratic_backward():
    w = ad.param([1.0, 2.0])
    loss = (w * w).sum()
    g = backward(loss)
    np.testing.assert_array_equal(g.grad(w).data, [2.0, 4.0])


def test_sigmoid_backward_at_zero():
    x = ad.param([0.0])
    g = backward(ad.sigmoid(x).sum())
    np.testing.assert_allclose(g.grad(x).data, [0.25], rtol=0, atol=1e-15)


def test_unreachable_leaf_reads_zero():
    used = ad.param([1.0, 2.0])
    unused = ad.param(np.ones((2, 3)))
    g = backward((used * 3.0).sum())
    assert unused not in g
    assert g.grad(unused).shape == (2, 3)
    assert not g.grad(unused).data.any()


def test_non_scalar_loss_rejected():
    w = ad.param([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        backward(w * w)


def test_shape_error_names_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 5)))


def test_unknown_kind_rejected():
    with pytest.raises(UnknownPrimitiveError):
        apply_primitive("fft", (Tensor([1.0]),))


def test_sign_is_constant_max_ties_to_first():
    x = ad.param([-2.0, 0.0, 3.0])
    g = backward(ad.sign(x).sum())
    assert not g.grad(x).data.any()

    a = ad.param([1.0, 5.0, 2.0])
    b = ad.param([1.0, 3.0, 4.0])
    g = backward(ad.maximum(a, b).sum())
    np.testing.assert_array_equal(g.grad(a).data, [1.0, 1.0, 0.0])  # tie -> a
    np.testing.assert_array_equal(g.grad(b).data, [0.0, 0.0, 1.0])
    g = backward(ad.minimum(a, b).sum())
    np.testing.assert_array_equal(g.grad(a).data, [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(g.grad(b).data, [0.0, 1.0, 0.0])


def test_split_concat_round_trip():
    rng = np.random.default_rng(3)
    x = ad.param(rng.normal(size=(2, 6)))
    parts = ad.split(x, [2, 1, 3], axis=1)
    merged = ad.concat(parts, axis=1)
    np.testing.assert_array_equal(merged.data, x.data)
    g = backward((merged * merged).sum())
    np.testing.assert_allclose(g.grad(x).data, 2 * x.data)


def test_gather_by_mask_scatters_gradient():
    x = ad.param(np.arange(6.0).reshape(2, 3))
    mask = np.array([[True, False, True], [False, True, False]])
    picked = ad.gather_by_mask(x, mask)
    np.testing.assert_array_equal(picked.data, [0.0, 2.0, 4.0])
    g = backward(picked.sum())
    np.testing.assert_array_equal(g.grad(x).data, mask.astype(float))


def test_no_grad_suppresses_recording():
    w = ad.param([2.0])
    with ad.no_grad():
        y = w * w
    assert y._backward is None


def test_fd_check_quadratic():
    w = ad.param([1.0])
    err = finite_difference_check(lambda t: (t * t).sum(), [w], epsilon=1e-5)
    assert err < 1e-8


# --- finite-difference property over the differentiable primitive set -------


def _fd_case(name, make):
    """Build (params, f) and assert analytic vs central differences."""
    params, f = make()
    err = finite_difference_check(f, params, epsilon=1e-5)
    assert err < 1e-4, f"{name}: max relative error {err:.3e}"


def _rand(rng, *shape, margin=0.0):
    x = rng.normal(size=shape)
    if margin:
        x = x + np.sign(x) * margin  # keep away from non-smooth points
    return x


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    proj = Tensor(rng.normal(size=(4, 4, 8)))

    def scalarize(t):
        if t.shape == proj.shape:
            return (t * proj).sum()
        return (t * Tensor(np.random.default_rng(seed + 99).normal(size=t.shape))).sum()

    cases = {
        "add": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8))],
                        lambda a, b: scalarize(a + b)),
        "sub": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8))],
                        lambda a, b: scalarize(a - b)),
        "mul": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8))],
                        lambda a, b: scalarize(a * b)),
        "mul_scalar": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                               lambda a: scalarize(a * 2.5)),
        "div": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8, margin=0.5))],
                        lambda a, b: scalarize(a / b)),
        "matmul": lambda: ([ad.param(_rand(rng, 4, 3)), ad.param(_rand(rng, 3, 5))],
                           lambda a, b: scalarize(ad.matmul(a, b))),
        "matmul_batched": lambda: ([ad.param(_rand(rng, 2, 3, 4)), ad.param(_rand(rng, 2, 4, 3))],
                                   lambda a, b: scalarize(ad.matmul(a, b))),
        "conv2d_zero": lambda: ([ad.param(_rand(rng, 4, 4, 2)), ad.param(_rand(rng, 3, 3, 2, 3) * 0.3),
                                 ad.param(_rand(rng, 3))],
                                lambda x, w, b: scalarize(ad.conv2d(x, w, b, padding="zero"))),
        "conv2d_replicate": lambda: ([ad.param(_rand(rng, 4, 4, 2)), ad.param(_rand(rng, 3, 3, 2, 3) * 0.3)],
                                     lambda x, w: scalarize(ad.conv2d(x, w, padding="replicate"))),
        "softmax": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                            lambda x: scalarize(ad.softmax(x))),
        "sigmoid": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                            lambda x: scalarize(ad.sigmoid(x))),
        "gelu": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                         lambda x: scalarize(ad.gelu(x))),
        "softplus": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                             lambda x: scalarize(ad.softplus(x))),
        "abs": lambda: ([ad.param(_rand(rng, 4, 4, 8, margin=0.1))],
                        lambda x: scalarize(ad.absolute(x))),
        "max": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8) + 5.0)],
                        lambda a, b: scalarize(ad.maximum(a, b))),
        "min": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 4, 4, 8) + 5.0)],
                        lambda a, b: scalarize(ad.minimum(a, b))),
        "sum_axis": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                             lambda x: scalarize(x.sum(axis=(0, 2)))),
        "mean_axis": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                              lambda x: scalarize(x.mean(axis=1))),
        "layernorm": lambda: ([ad.param(_rand(rng, 4, 4, 8)), ad.param(_rand(rng, 8)),
                               ad.param(_rand(rng, 8))],
                              lambda x, s, h: scalarize(ad.layer_norm(x, s, h))),
        "concat": lambda: ([ad.param(_rand(rng, 4, 2, 8)), ad.param(_rand(rng, 4, 2, 8))],
                           lambda a, b: scalarize(ad.concat([a, b], axis=1))),
        "split": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                          lambda x: scalarize(ad.split(x, [3, 5], axis=2)[1])),
        "reshape": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                            lambda x: scalarize(x.reshape(8, 16))),
        "transpose2d": lambda: ([ad.param(_rand(rng, 4, 8, 4))],
                                lambda x: scalarize(ad.transpose2d(x, (0, 2)))),
        "roll2d": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                           lambda x: scalarize(ad.roll2d(x, (1, -2)))),
        "grouped_average": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                                    lambda x: scalarize(ad.grouped_average(x, 4))),
        "gather_by_mask": lambda: ([ad.param(_rand(rng, 4, 4, 8))],
                                   lambda x: ad.gather_by_mask(x, np.arange(128).reshape(4, 4, 8) % 3 == 0).sum()),
    }
    for name, make in cases.items():
        _fd_case(name, make)


def test_matmul_folded_rhs_gradient():
    rng = np.random.default_rng(7)
    a = ad.param(rng.normal(size=(2, 3, 4)))
    w = ad.param(rng.normal(size=(4, 5)))

    def f(a_, w_):
        y = ad.matmul(a_, w_)
        return (y * y).sum()

    assert finite_difference_check(f, [a, w]) < 1e-4
