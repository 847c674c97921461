import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitstoch.core import OptimalityCertificate, initial_state, make_config
from splitstoch.diagnostics import (
    NoConvergence,
    certificate_from_run,
    certificate_from_subgradients,
    consensus_metrics,
    descent_penalties,
    eps_optimality,
    eval_H,
    eval_phi,
    full_participation_energy,
    gap_lower_bound_margin,
    loglog_slope,
    lyapunov,
    reference_solve,
    run_seed,
    s_residual,
)
from splitstoch.problems import planted_instance, toy1d, toy3d
from splitstoch.sampling import ParticipationPolicy
from splitstoch.solver import run


def test_eval_phi_toy():
    assert eval_phi(toy1d().problem, np.array([1.0])) == 1.5
    assert eval_phi(toy3d().problem, toy3d().x_star) == pytest.approx(toy3d().phi_star)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_H_collapses_to_phi_at_consensus(seed, sigma):
    prob = planted_instance(5, 6, seed, kinds=("l1", "logistic")).problem
    cfg = make_config(prob, sigma=sigma)
    x = np.random.default_rng(seed).standard_normal(5)
    assert eval_H(prob, cfg, np.tile(x, (5, 1)), x) == pytest.approx(eval_phi(prob, x), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("sigma", [0.0, 0.3, 1.0])
def test_H_double_entry(sigma):
    prob = planted_instance(4, 5, 7, kinds=("l1", "logistic")).problem
    cfg = make_config(prob, sigma=sigma)
    rng = np.random.default_rng(1)
    y, xm = rng.standard_normal((4, 4)), rng.standard_normal(4)
    users, server = prob.agents[:-1], prob.agents[-1]
    direct = server.f_value(xm) + server.g_value(xm) + sum(
        u.f_value(y[i]) + (1 - sigma) * u.g_value(y[i]) + sigma * u.g_value(xm) for i, u in enumerate(users)
    )
    assert eval_H(prob, cfg, y, xm) == pytest.approx(direct, rel=1e-12)
    if sigma == 1.0:
        # smooth user terms are read at the server block only
        y2 = y + 5.0
        f_shift = sum(u.f_value(y2[i]) - u.f_value(y[i]) for i, u in enumerate(users))
        assert eval_H(prob, cfg, y2, xm) - eval_H(prob, cfg, y, xm) == pytest.approx(f_shift, rel=1e-10)


def test_H_infinite_off_domain():
    prob = planted_instance(3, 6, 0, kinds=("hyperplane",)).problem
    cfg = make_config(prob)
    x = np.ones(3) * 10
    assert eval_H(prob, cfg, np.tile(x, (5, 1)), x) == math.inf
    assert eval_phi(prob, x) == math.inf


def test_consensus_examples():
    x = np.array([1.0, 0.0])
    assert consensus_metrics(np.array([[1.0, 1.0], [1.0, -1.0]]), x) == (2.0, 1.0)
    assert consensus_metrics(np.tile(x, (3, 1)), x) == (0.0, 0.0)
    assert consensus_metrics(np.ones((2, 2)), np.zeros(2)) == (math.inf, math.inf)
    state = initial_state(toy3d().problem, [1.0, 0.0, 0.0], [[1.0, 1.0, 0.0], [1.0, -1.0, 0.0]])
    assert consensus_metrics(state) == (2.0, 1.0)


# -- certificates -----------------------------------------------------------------------

def test_s_residual_toy_certificate():
    prob = toy1d().problem
    cfg = make_config(prob, gamma=0.7)
    cert = OptimalityCertificate(np.array([[1.0 - 0.7]]), np.array([1.0]))
    assert s_residual(prob, cfg, cert) <= 1e-12
    built = certificate_from_subgradients(prob, cfg, [1.0], [[1.0]])
    np.testing.assert_allclose(built.z_star, cert.z_star, atol=1e-15)
    bumped = OptimalityCertificate(cert.z_star, np.array([1.1]))
    assert s_residual(prob, cfg, bumped) > 0


@pytest.mark.parametrize("seed", range(4))
def test_s_residual_at_reference_certificates(seed):
    planted = planted_instance(5, 6, seed, kinds=("l1", "logistic"))
    prob = planted.problem
    cfg = make_config(prob)
    x_ref, _ = reference_solve(prob)
    np.testing.assert_allclose(x_ref, planted.x_star, atol=1e-9)
    cert = certificate_from_subgradients(prob, cfg, x_ref, planted.subgradients)
    assert s_residual(prob, cfg, cert) <= 1e-8
    rng = np.random.default_rng(seed)
    for _ in range(5):
        d = rng.standard_normal(5)
        d *= 1e-3 / np.linalg.norm(d)
        assert s_residual(prob, cfg, OptimalityCertificate(cert.z_star, cert.x_star + d)) > 0


def test_s_residual_at_converged_run():
    prob = toy3d().problem
    cfg = make_config(prob, max_iters=200, tolerance=1e-24)
    res = run(prob, cfg)
    cert = certificate_from_run(res.state)
    assert s_residual(prob, cfg, cert) <= 1e-9
    cert.x_star[0] += 1.0
    assert res.state.x[0] != cert.x_star[0]


# -- Lyapunov --------------------------------------------------------------------------

def test_lyapunov_examples():
    planted = toy3d()
    prob = planted.problem
    cfg = make_config(prob, alpha=[0.5, 2.0], lambdas=[0.8, 1.3])
    cert = planted.certificate(cfg)
    policy = ParticipationPolicy.bernoulli([0.4, 0.9])
    at = initial_state(prob, cert.x_star, np.tile(cert.x_star, (2, 1)), cert.z_star)
    assert lyapunov(cfg, policy, at, cert) == 0.0
    rng = np.random.default_rng(0)
    dy, dz = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    s1 = initial_state(prob, cert.x_star, cert.x_star + dy, cert.z_star + dz)
    s2 = initial_state(prob, cert.x_star, cert.x_star + 2 * dy, cert.z_star + 2 * dz)
    v1 = lyapunov(cfg, policy, s1, cert)
    assert lyapunov(cfg, policy, s2, cert) == pytest.approx(4 * v1, rel=1e-12)
    p, a, lam = [0.4, 0.9], cfg.alpha, cfg.lambdas
    direct = sum(a[i] / p[i] * dy[i] @ dy[i] + dz[i] @ dz[i] / (lam[i] * p[i]) for i in range(2))
    assert v1 == pytest.approx(direct, rel=1e-12)
    full = sum(a[i] * dy[i] @ dy[i] + dz[i] @ dz[i] / lam[i] for i in range(2))
    assert full_participation_energy(cfg, s1, cert) == pytest.approx(full, rel=1e-12)


def test_lyapunov_nonincreasing_full_participation():
    planted = planted_instance(4, 6, 3)
    prob = planted.problem
    cfg = make_config(prob, max_iters=300, tolerance=1.0)
    cert = planted.certificate(cfg)
    res = run(prob, cfg, certificate=cert, evaluate=False)
    v = [r.lyapunov for r in res.trace]
    assert all(b <= a + 1e-10 * v[0] for a, b in zip(v, v[1:]))


def test_descent_penalties_double_entry():
    planted = planted_instance(3, 4, 1, kinds=("l1", "logistic"))
    prob = planted.problem
    cfg = make_config(prob)
    rng = np.random.default_rng(2)
    y, x, yv = rng.standard_normal((3, 3)), rng.standard_normal(3), rng.standard_normal((3, 3))
    L, g, s = prob.lipschitz, cfg.gamma, cfg.sigma
    c = sum((cfg.alpha[i] - g * L[-1] / 6 - s * g * L[i] / 2) * np.sum((x - y[i]) ** 2) for i in range(3))
    d = sum((2 + cfg.alpha[i] - (1 - s) * g * L[i] / 2 - cfg.lambdas[i]) * np.sum((x - yv[i]) ** 2) for i in range(3))
    np.testing.assert_allclose(descent_penalties(prob, cfg, y, x, yv), (c, d), rtol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gap_lower_bound_at_random_points(seed):
    planted = planted_instance(4, 5, seed, kinds=("l1", "logistic"))
    prob = planted.problem
    cfg = make_config(prob)
    cert = planted.certificate(cfg)
    rng = np.random.default_rng(seed)
    for _ in range(200):
        blocks = planted.x_star + rng.standard_normal((5, 4)) * rng.choice([1e-3, 1.0, 10.0])
        assert gap_lower_bound_margin(prob, cfg, cert, blocks, planted.phi_star) >= -1e-8


def test_gap_lower_bound_tight_direction():
    # along y_i = x* + t (z_i* - x*), x_m = x*, the linear term dominates for small t
    planted = toy1d()
    prob = planted.problem
    cfg = make_config(prob, gamma=0.5)
    cert = planted.certificate(cfg)
    d = cert.z_star - cert.x_star
    for t in (1e-4, 1e-2, 1.0):
        blocks = np.vstack([cert.x_star + t * d, cert.x_star])
        assert gap_lower_bound_margin(prob, cfg, cert, blocks, planted.phi_star) >= -1e-12
        flipped = eval_H(prob, cfg, blocks[:-1], blocks[-1]) - 1.5 - np.sum((cert.x_star - cert.z_star) * (blocks[-1] - blocks[:-1])) / cfg.gamma
        assert flipped < 0


# -- reference and repeated runs ---------------------------------------------------------

def test_reference_toy():
    x, phi = reference_solve(toy1d().problem)
    assert abs(x[0] - 1.0) <= 1e-9 and abs(phi - 1.5) <= 1e-12
    x3, _ = reference_solve(toy3d().problem)
    np.testing.assert_allclose(x3, toy3d().x_star, atol=1e-9)


def test_reference_errors():
    with pytest.raises(ValueError):
        reference_solve(toy1d().problem, tol=0.0)
    with pytest.raises(NoConvergence):
        reference_solve(planted_instance(5, 6, 0).problem, tol=1e-12, max_iters=3)


def test_eps_optimality_from_fixed_point():
    planted = toy3d()
    prob = planted.problem
    cfg = make_config(prob, participation=ParticipationPolicy.fixed_fraction(0.5), max_iters=50)
    cert = planted.certificate(cfg)
    init = initial_state(prob, cert.x_star, np.tile(cert.x_star, (2, 1)), cert.z_star)
    rep = eps_optimality(prob, cfg, 3, 1e-10, planted.phi_star, init=init)
    assert rep.ok and rep.K == 50
    assert rep.consensus_margin <= 1e-12 and rep.gap_margin <= 1e-12
    with pytest.raises(ValueError):
        eps_optimality(prob, cfg, 1, 1e-3, planted.phi_star)


def test_eps_margins_shrink_with_K():
    planted = toy1d()
    prob = planted.problem
    cfg = make_config(prob)
    a = eps_optimality(prob, cfg, 2, 1e-2, 1.5, K=10)
    b = eps_optimality(prob, cfg, 2, 1e-2, 1.5, K=1000)
    assert b.consensus_margin < a.consensus_margin and b.gap_margin < a.gap_margin
    assert b.ok and not a.ok


def test_run_seeds_and_slope():
    assert run_seed(0, 1) == run_seed(0, 1)
    assert len({run_seed(0, r) for r in range(50)} | {run_seed(1, 0)}) == 51
    Ks = np.array([10.0, 100.0, 1000.0])
    assert loglog_slope(Ks, 3.0 / Ks) == pytest.approx(-1.0)
