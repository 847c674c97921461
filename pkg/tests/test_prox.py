import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from splitstoch.prox import (
    ScaledProxRequest,
    ZeroNormal,
    hyperplane_prox,
    l1_prox,
    logistic_block_gradient,
    logistic_block_lipschitz,
    logistic_block_value,
    logistic_gradient,
    logistic_loss,
    point_prox,
    project_hyperplane,
    resolve_scaled_prox,
    soft_threshold,
    zero_prox,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def vec(n=4):
    return arrays(np.float64, n, elements=finite)


# -- soft threshold ------------------------------------------------------------------

def test_soft_threshold_examples():
    np.testing.assert_array_equal(soft_threshold([3.0], 1.0), [2.0])
    np.testing.assert_array_equal(soft_threshold([0.5, -0.5], 1.0), [0.0, 0.0])
    np.testing.assert_array_equal(soft_threshold([-4.0, 1.5], 0.5), [-3.5, 1.0])


def test_soft_threshold_grid_oracle():
    grid = np.arange(-5.0, 5.0 + 1e-12, 1e-4)
    obj = np.abs(grid) + 0.5 * (grid - 3.0) ** 2
    assert abs(grid[np.argmin(obj)] - soft_threshold([3.0], 1.0)[0]) <= 1e-4


def test_soft_threshold_rejects_negative_level():
    with pytest.raises(ValueError):
        soft_threshold([1.0], -0.1)


# -- hyperplane ----------------------------------------------------------------------

def test_projection_examples():
    np.testing.assert_allclose(project_hyperplane([1, 1], 2, [0, 0]), [1, 1])
    np.testing.assert_allclose(project_hyperplane([1, 0], 5, [3, 7]), [5, 7])
    np.testing.assert_allclose(project_hyperplane([1, 2], 3, [0, 0]), [0.6, 1.2])


def test_projection_grid_oracle():
    # the line a.y = 3 with a = (1, 2) is y = (3, 0) + t (-2, 1)
    t = np.arange(-3.0, 3.0, 1e-5)
    pts = np.stack([3 - 2 * t, t], axis=1)
    best = pts[np.argmin(np.sum(pts**2, axis=1))]
    np.testing.assert_allclose(project_hyperplane([1, 2], 3, [0, 0]), best, atol=1e-4)


def test_zero_normal():
    with pytest.raises(ZeroNormal):
        project_hyperplane([0, 0], 1, [1, 1])
    with pytest.raises(ZeroNormal):
        hyperplane_prox([0.0, 0.0], 1.0)


@given(vec(), st.floats(-10, 10), vec())
def test_projection_is_feasible_and_orthogonal(a, b, x):
    if a @ a < 1e-6:
        return
    p = project_hyperplane(a, b, x)
    scale = 1 + abs(b) + np.abs(a) @ np.abs(x)
    assert abs(a @ p - b) <= 1e-9 * scale
    # x - p is parallel to a
    d = x - p
    assert np.linalg.norm(d - (d @ a) / (a @ a) * a) <= 1e-9 * (1 + np.linalg.norm(x))


# -- logistic ------------------------------------------------------------------------

def test_logistic_gradient_at_zero():
    a = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(logistic_gradient(a, 1.0, 0.3, np.zeros(3)), -0.3 * a / 2)
    np.testing.assert_allclose(logistic_gradient(a, -1.0, 1.0, np.zeros(3)), a / 2)


@given(vec(3), st.sampled_from([-1.0, 1.0]), st.floats(0.1, 2.0), arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_logistic_gradient_matches_finite_difference(a, b, w, x):
    h = 1e-6
    fd = np.array([
        (logistic_loss(a, b, w, x + h * e) - logistic_loss(a, b, w, x - h * e)) / (2 * h) for e in np.eye(3)
    ])
    g = logistic_gradient(a, b, w, x)
    assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(g)) + 1e-6


def test_logistic_saturation_and_stability():
    a = np.array([1.0, 1.0])
    assert np.linalg.norm(logistic_gradient(a, 1.0, 1.0, np.array([400.0, 400.0]))) < 1e-300
    # no overflow far on the losing side; value is asymptotically -t
    big = logistic_loss(a, 1.0, 1.0, np.array([-500.0, -500.0]))
    assert big == pytest.approx(1000.0)
    t = np.linspace(-800, 800, 33)
    A = np.ones((33, 1))
    val = logistic_block_value(A * t[:, None], np.ones(33), 1.0, np.array([1.0]))
    assert np.isfinite(val)
    assert val == pytest.approx(np.logaddexp(0.0, -t).sum())


def test_block_gradient_is_sum_of_sample_gradients():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((6, 4))
    labels = rng.choice([-1.0, 1.0], 6)
    x = rng.standard_normal(4)
    total = sum(logistic_gradient(A[i], labels[i], 0.25, x) for i in range(6))
    np.testing.assert_allclose(logistic_block_gradient(A, labels, 0.25, x), total, rtol=1e-12, atol=1e-14)


def test_block_lipschitz_bounds():
    rng = np.random.default_rng(1)
    A = rng.standard_normal((10, 5))
    spectral = logistic_block_lipschitz(A, 0.5)
    trace = logistic_block_lipschitz(A, 0.5, bound="trace")
    assert spectral <= trace
    assert trace == pytest.approx(0.5 * np.sum(A**2) / 4)
    assert spectral == pytest.approx(0.5 * np.linalg.eigvalsh(A.T @ A).max() / 4)
    labels = rng.choice([-1.0, 1.0], 10)
    for _ in range(200):
        x, z = rng.standard_normal(5) * 3, rng.standard_normal(5) * 3
        dg = logistic_block_gradient(A, labels, 0.5, x) - logistic_block_gradient(A, labels, 0.5, z)
        assert np.linalg.norm(dg) <= spectral * np.linalg.norm(x - z) * (1 + 1e-12)
    with pytest.raises(ValueError):
        logistic_block_lipschitz(A, 1.0, bound="nope")


# -- firm nonexpansiveness and optimality --------------------------------------------

PROXES = {
    "zero": (zero_prox, lambda y: 0.0),
    "l1": (l1_prox(0.7), lambda y: 0.7 * np.abs(y).sum()),
    "hyperplane": (hyperplane_prox([1.0, -2.0, 0.5, 3.0], 1.5), None),
    "point": (point_prox([1.0, 2.0, 3.0, 4.0]), None),
}


@pytest.mark.parametrize("name", sorted(PROXES))
@given(x=vec(), z=vec(), step=st.floats(1e-3, 10.0))
def test_firmly_nonexpansive(name, x, z, step):
    P = PROXES[name][0]
    px, pz = P(x, step), P(z, step)
    lhs = float((x - z) @ (px - pz))
    rhs = float((px - pz) @ (px - pz))
    assert lhs >= rhs - 1e-12 * max(1.0, lhs, rhs)


@pytest.mark.parametrize("name", ["zero", "l1"])
@given(x=vec(), d=vec(), step=st.floats(1e-2, 5.0))
def test_prox_minimizes_along_slices(name, x, d, step):
    P, f = PROXES[name]
    if np.linalg.norm(d) < 1e-3:
        return
    d = d / np.linalg.norm(d)
    p = P(x, step)

    def obj(t):
        y = p + t * d
        return step * f(y) + 0.5 * float((y - x) @ (y - x))

    res = minimize_scalar(obj, bounds=(-20, 20), method="bounded", options={"xatol": 1e-12})
    assert obj(0.0) <= res.fun + 1e-8


# -- implicit regularized prox -------------------------------------------------------

def test_resolve_example_abs():
    x = resolve_scaled_prox(ScaledProxRequest(l1_prox(1.0), np.array([4.0]), 1.0, 1.0))
    np.testing.assert_allclose(x, [1.5])
    np.testing.assert_allclose(soft_threshold(np.array([4.0]) - 1.0 * x, 1.0), x)


def test_resolve_reduces_to_plain_prox():
    u = np.array([3.0, -0.2, 1.0])
    np.testing.assert_array_equal(resolve_scaled_prox(ScaledProxRequest(l1_prox(1.0), u, 0.0, 0.5)), soft_threshold(u, 0.5))
    np.testing.assert_allclose(resolve_scaled_prox(ScaledProxRequest(zero_prox, u, 2.0, 0.5)), u / 3)


def test_resolve_request_validation():
    with pytest.raises(ValueError):
        ScaledProxRequest(zero_prox, np.zeros(1), -0.1, 1.0)
    with pytest.raises(ValueError):
        ScaledProxRequest(zero_prox, np.zeros(1), 0.1, 0.0)


@pytest.mark.parametrize("name", sorted(PROXES))
@given(u=vec(), delta=st.floats(0.0, 10.0), step=st.floats(1e-3, 10.0))
def test_resolve_implicit_residual(name, u, delta, step):
    P = PROXES[name][0]
    x = resolve_scaled_prox(ScaledProxRequest(P, u, delta, step))
    res = np.linalg.norm(x - P(u - delta * x, step))
    assert res <= 1e-10 * max(1.0, np.linalg.norm(u))
