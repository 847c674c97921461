"""Objective values, consensus metrics, optimality residuals and Lyapunov values."""

from __future__ import annotations

import math

import numpy as np

from splitstoch.core import (
    IterateState,
    OptimalityCertificate,
    ProblemInstance,
    SolverConfig,
)
from splitstoch.sampling import ParticipationPolicy, inclusion_probabilities


def eval_phi(problem: ProblemInstance, x) -> float:
    """``sum_i f_i(x) + g_i(x)``; ``inf`` outside the domain of any ``f_i``."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for agent in problem.agents:
        fv = agent.f_value(x)
        if fv == math.inf:
            return math.inf
        total += fv + agent.g_value(x)
    return float(total)


def eval_H(problem: ProblemInstance, config: SolverConfig, y, x_m) -> float:
    """Objective of the consensus reformulation at user blocks ``y`` and server block ``x_m``.

    ``sum_i [f_i(y_i) + (1 - sigma) g_i(y_i) + sigma g_i(x_m)] + f_m(x_m) + g_m(x_m)``
    """
    sigma = config.sigma
    x_m = np.asarray(x_m, dtype=float)
    server = problem.server
    total = server.f_value(x_m)
    if total == math.inf:
        return math.inf
    total += server.g_value(x_m)
    for i, agent in enumerate(problem.users):
        fv = agent.f_value(y[i])
        if fv == math.inf:
            return math.inf
        total += fv
        if sigma != 1:
            total += (1 - sigma) * agent.g_value(y[i])
        if sigma != 0:
            total += sigma * agent.g_value(x_m)
    return float(total)


def consensus_metrics(state_or_y, x=None) -> tuple[float, float]:
    """``(sum_i ||y_i - x||^2 / ||x||^2, max_i ||y_i - x|| / ||x||)``, both ``inf`` at ``x = 0``."""
    if x is None:
        y, x = state_or_y.y, state_or_y.x
    else:
        y = state_or_y
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    xn2 = float(x @ x)
    if xn2 == 0.0:
        return math.inf, math.inf
    d = y - x
    d2 = np.einsum("ij,ij->i", d, d)
    return float(d2.sum() / xn2), float(math.sqrt(d2.max() / xn2))


def s_residual(problem: ProblemInstance, config: SolverConfig, cert: OptimalityCertificate) -> float:
    """Distance of ``cert`` from satisfying the prox fixed-point system that characterizes minimizers."""
    gamma, sigma = config.gamma, config.sigma
    users = problem.m - 1
    x = np.asarray(cert.x_star, dtype=float)
    z = np.asarray(cert.z_star, dtype=float).reshape(users, problem.n)
    own = np.array([a.grad(x) for a in problem.users]).reshape(users, problem.n)
    server = problem.server
    u = (z - sigma * gamma * own).sum(axis=0) / users - gamma / users * server.grad(x)
    res = float(np.linalg.norm(x - server.prox(u, gamma / users)))
    for i, agent in enumerate(problem.users):
        p = agent.prox(2 * x - z[i] - (1 - sigma) * gamma * own[i], gamma)
        res += float(np.linalg.norm(x - p))
    return res


def certificate_from_subgradients(problem: ProblemInstance, config: SolverConfig, x_star, subgradients) -> OptimalityCertificate:
    """Build ``(z*, x*)`` from a minimizer and matching subgradients ``a_i in df_i(x*)``.

    ``subgradients`` holds one row per user; the server's share is implied by
    optimality and not needed.  ``z_i* = x* - (1 - sigma) gamma grad g_i(x*) - gamma a_i``.
    """
    x = np.asarray(x_star, dtype=float)
    a = np.asarray(subgradients, dtype=float).reshape(problem.m - 1, problem.n)
    own = np.array([agent.grad(x) for agent in problem.users]).reshape(a.shape)
    z = x - (1 - config.sigma) * config.gamma * own - config.gamma * a
    return OptimalityCertificate(z, x)


def lyapunov(config: SolverConfig, policy: ParticipationPolicy, state: IterateState, cert: OptimalityCertificate) -> float:
    """``sum_i (alpha_i / p_i) ||y_i - x*||^2 + 1 / (lambda_i p_i) ||z_i - z_i*||^2``."""
    users = state.y.shape[0]
    p = inclusion_probabilities(policy, users)
    if np.any(p <= 0):
        raise ZeroDivisionError("zero inclusion probability")
    dy = np.einsum("ij,ij->i", state.y - cert.x_star, state.y - cert.x_star)
    dz = np.einsum("ij,ij->i", state.z - cert.z_star, state.z - cert.z_star)
    return float(np.sum(config.alpha_array / p * dy + dz / (config.lambda_array * p)))


def full_participation_energy(config: SolverConfig, state: IterateState, cert: OptimalityCertificate) -> float:
    """``V = sum_i (1 / lambda_i) ||z_i - z_i*||^2 + alpha_i ||y_i - x*||^2`` (all ``p_i = 1``)."""
    return lyapunov(config, ParticipationPolicy.fixed_fraction(1.0), state, cert)


def descent_penalties(problem: ProblemInstance, config: SolverConfig, y_prev, x_next, y_virtual) -> tuple[float, float]:
    """The two quadratic terms subtracted in the one-step expected descent bound.

    Returns ``(sum_i c_i ||x^{k+1} - y_i^k||^2, sum_i d_i ||x^{k+1} - y~_i^{k+1}||^2)`` with
    ``c_i = alpha_i - gamma L_m / (2(m-1)) - sigma gamma L_i / 2`` and
    ``d_i = 2 + alpha_i - (1 - sigma) gamma L_i / 2 - lambda_i``.
    """
    users = problem.m - 1
    L = problem.lipschitz
    g, s = config.gamma, config.sigma
    alpha, lam = config.alpha_array, config.lambda_array
    c = alpha - g * L[-1] / (2 * users) - s * g * L[:-1] / 2
    d = 2 + alpha - (1 - s) * g * L[:-1] / 2 - lam
    dy = np.einsum("ij,ij->i", x_next - y_prev, x_next - y_prev)
    dv = np.einsum("ij,ij->i", x_next - y_virtual, x_next - y_virtual)
    return float(c @ dy), float(d @ dv)


def gap_lower_bound_margin(problem: ProblemInstance, config: SolverConfig, cert: OptimalityCertificate, blocks, phi_star: float) -> float:
    """``H(x_1..x_m) - phi* - (1/gamma) sum_i <z_i* - x*, x_m - x_i>``; nonnegative whenever ``cert`` certifies optimality.

    ``blocks`` stacks the ``m`` points, server last.  The sign of the inner
    product is the one produced by summing the subgradient inequalities of
    each ``f_i`` at ``x*``.
    """
    blocks = np.asarray(blocks, dtype=float)
    y, x_m = blocks[:-1], blocks[-1]
    h = eval_H(problem, config, y, x_m)
    inner = np.einsum("ij,ij->", cert.z_star - cert.x_star, x_m - y)
    return h - phi_star - inner / config.gamma
