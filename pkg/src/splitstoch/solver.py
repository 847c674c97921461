"""Stochastic distributed regularized splitting.

One iteration:

1. the server forms ``x^{k+1}`` from every user's ``(y_i^k, z_i^k)`` and the
   cached gradients at ``y_i^k``;
2. a random subset ``S_k`` of users is drawn;
3. each ``i in S_k`` solves its regularized prox subproblem for ``y_i^{k+1}``
   and relaxes ``z_i``; everyone else carries over;
4. only the sampled users' gradient caches are refreshed.

Both implicit subproblems are resolved in closed form through
:func:`splitstoch.prox.resolve_scaled_prox`.
"""

from __future__ import annotations

import math
import time
from collections.abc import Callable
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from splitstoch.core import (
    ErgodicAverages,
    InvalidConfig,
    IterateState,
    OptimalityCertificate,
    ProblemInstance,
    SolverConfig,
    SplitStochError,
    TraceRecord,
    initial_state,
    validate_config,
)
from splitstoch.diagnostics.metrics import consensus_metrics, eval_H, eval_phi, lyapunov
from splitstoch.prox import ScaledProxRequest, resolve_scaled_prox
from splitstoch.sampling import draw


class NonFiniteIterate(SplitStochError, FloatingPointError):
    def __init__(self, k: int):
        self.k = k
        super().__init__(f"non-finite iterate at iteration {k}; step size likely outside its window")


class MaxItersExceeded(SplitStochError, RuntimeError):
    """Tolerance not reached before the hard iteration cap; carries the partial run."""

    def __init__(self, state, trace, averages, cap):
        self.state = state
        self.trace = trace
        self.averages = averages
        super().__init__(f"stopping error still above tolerance after {cap} iterations")


@dataclass(frozen=True, eq=False)
class VirtualIterate:
    y_tilde: np.ndarray
    z_tilde: np.ndarray


class RunResult(NamedTuple):
    state: IterateState
    trace: list[TraceRecord]
    averages: ErgodicAverages


def server_update(problem: ProblemInstance, config: SolverConfig, state: IterateState) -> np.ndarray:
    """``x^{k+1}``, read entirely from the state and its gradient caches (one prox call)."""
    users = problem.m - 1
    gamma, sigma = config.gamma, config.sigma
    alpha = config.alpha_array
    ones = np.ones(users)
    anchor = (
        (ones @ state.z + alpha @ state.y - (gamma / users) * (ones @ state.grad_server)) / users
        - (sigma * gamma / users) * (ones @ state.grad_own)
    )
    req = ScaledProxRequest(problem.server.prox, anchor, float(alpha.mean()), gamma / users)
    return resolve_scaled_prox(req)


def user_update(problem: ProblemInstance, config: SolverConfig, state: IterateState, x_next, i: int):
    """``(y_i^{k+1}, z_i^{k+1})`` for a participating user ``i``.

    Costs one prox call and one gradient call (user ``i``'s gradient at ``x_next``).
    """
    agent = problem.agents[i]  # users are agents[:-1]
    a = config.alpha[i]
    gamma, sigma = config.gamma, config.sigma
    anchor = (2 + a) * x_next - state.z[i] - (1 - sigma) * gamma * agent.grad(x_next)
    y_new = resolve_scaled_prox(ScaledProxRequest(agent.prox, anchor, a, gamma))
    z_new = state.z[i] + config.lambdas[i] * (y_new - x_next)
    return y_new, z_new


def virtual_update(problem: ProblemInstance, config: SolverConfig, state: IterateState, x_next) -> VirtualIterate:
    """The update every user would make if sampled; the state is left untouched."""
    ys, zs = zip(*(user_update(problem, config, state, x_next, i) for i in range(problem.m - 1)))
    return VirtualIterate(np.array(ys), np.array(zs))


def _sampled_user(problem, config, state, x_next, i):
    y_new, z_new = user_update(problem, config, state, x_next, i)
    return y_new, z_new, problem.agents[i].grad(y_new), problem.agents[-1].grad(y_new)


def step(
    problem: ProblemInstance,
    config: SolverConfig,
    state: IterateState,
    *,
    members=None,
    executor: Executor | None = None,
    certificate: OptimalityCertificate | None = None,
    evaluate: bool = True,
    inplace: bool = False,
) -> tuple[IterateState, TraceRecord]:
    """Advance one iteration and return the new state with its trace record.

    ``members`` overrides the participation draw (0-based user indices).  User
    updates are independent and are dispatched to ``executor`` when given; the
    result does not depend on execution order.  With ``evaluate=False`` the
    objective columns of the record are ``nan``.  ``inplace=True`` overwrites
    ``state`` instead of copying it.
    """
    users = problem.m - 1
    x_next = server_update(problem, config, state)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteIterate(state.k + 1)
    if members is None:
        members = draw(config.participation, state.k, config.seed, users).members
    members = tuple(members)

    virtual = virtual_update(problem, config, state, x_next) if config.record_virtual else None

    if executor is not None and len(members) > 1:
        results = list(executor.map(lambda i: _sampled_user(problem, config, state, x_next, i), members))
    else:
        results = [_sampled_user(problem, config, state, x_next, i) for i in members]

    new = state if inplace else state.copy()
    new.k = state.k + 1
    new.x = x_next
    for i, (y_i, z_i, g_own, g_srv) in zip(members, results):
        new.y[i] = y_i
        new.z[i] = z_i
        new.grad_own[i] = g_own
        new.grad_server[i] = g_srv
    if members and not (np.all(np.isfinite(new.y[list(members)])) and np.all(np.isfinite(new.z[list(members)]))):
        raise NonFiniteIterate(new.k)
    new.prox_calls += 1 + len(members)
    new.grad_calls += 3 * len(members)

    stop_err, cons_max = consensus_metrics(new.y, new.x)
    if evaluate:
        phi = eval_phi(problem, new.x)
        h = eval_H(problem, config, new.y, new.x)
    else:
        phi = h = math.nan
    lyap = lyapunov(config, config.participation, new, certificate) if certificate is not None else None
    record = TraceRecord(
        k=new.k, stopping_error=stop_err, consensus_max=cons_max, phi=phi, h_value=h,
        lyapunov=lyap, prox_calls=new.prox_calls, grad_calls=new.grad_calls,
        members=members, virtual=virtual,
    )
    return new, record


def run(
    problem: ProblemInstance,
    config: SolverConfig,
    init: IterateState | None = None,
    *,
    certificate: OptimalityCertificate | None = None,
    executor: Executor | None = None,
    validate: bool = True,
    evaluate: bool = True,
    timing: bool = False,
    callback: Callable[[IterateState, TraceRecord], None] | None = None,
) -> RunResult:
    """Iterate while ``error > tolerance or k <= max_iters``.

    ``max_iters`` is therefore a minimum: at least ``max_iters + 1`` steps are
    taken, and the loop goes on until the stopping error drops below the
    tolerance or a hard cap of ``10 * max_iters`` is hit, which raises
    :class:`MaxItersExceeded` with the partial trace attached.

    Returns the final state, the per-iteration trace and the ergodic averages
    of ``x^1..x^K`` and ``y^0..y^{K-1}``.
    """
    if validate:
        report = validate_config(problem, config)
        if not report.ok:
            raise InvalidConfig(report)
    state = initial_state(problem) if init is None else init.copy()
    sums = _ErgodicSums(state)
    values = _ValueCache(problem, config, state) if evaluate else None
    trace: list[TraceRecord] = []
    K = config.max_iters
    cap = state.k + 10 * K
    error = 1.0
    t0 = time.perf_counter()
    while error > config.tolerance or state.k <= K:
        if state.k >= cap:
            raise MaxItersExceeded(state, trace, sums.averages(), cap)
        state, record = step(problem, config, state, certificate=certificate, executor=executor,
                             evaluate=False, inplace=True)
        sums.after_step(state, record.members)
        if values is not None:
            phi, h = values.after_step(state, record.members)
            record = replace(record, phi=phi, h_value=h)
        if timing:
            record = replace(record, elapsed_s=time.perf_counter() - t0)
        trace.append(record)
        if callback is not None:
            callback(state, record)
        error = record.stopping_error
    return RunResult(state, trace, sums.averages())


class _ErgodicSums:
    """Running sums behind the ergodic averages, updated in ``O(|S_k| n)`` per step.

    ``y_i`` is piecewise constant in ``k``, so its contribution to
    ``sum_k y_i^k`` is settled only when the row changes.
    """

    def __init__(self, state: IterateState):
        self.k0 = state.k
        self.x_sum = np.zeros_like(state.x)
        self.y_sum = np.zeros_like(state.y)
        self.since = np.full(state.y.shape[0], state.k)
        self.y = state.y.copy()
        self.k = state.k

    def after_step(self, state: IterateState, members) -> None:
        self.x_sum += state.x
        if members:
            idx = list(members)
            self.y_sum[idx] += (state.k - self.since[idx])[:, None] * self.y[idx]
            self.since[idx] = state.k
            self.y[idx] = state.y[idx]
        self.k = state.k

    def averages(self) -> ErgodicAverages:
        K = self.k - self.k0
        users, n = self.y.shape
        if K == 0:
            return ErgodicAverages.empty(n, users)
        pending = (self.k - self.since)[:, None] * self.y
        return ErgodicAverages(self.x_sum / K, (self.y_sum + pending) / K, K)


class _ValueCache:
    """Per-user ``f_i(y_i)`` and ``g_i(y_i)``, refreshed only for sampled users.

    Gives the same ``phi`` and ``H`` as :func:`eval_phi` and :func:`eval_H`
    without re-evaluating every user at every step.
    """

    def __init__(self, problem: ProblemInstance, config: SolverConfig, state: IterateState):
        self.problem = problem
        self.sigma = config.sigma
        users = self.users = problem.users
        self.f_y = np.array([a.f_value(state.y[i]) for i, a in enumerate(users)], dtype=float)
        self.g_y = np.array([a.g_value(state.y[i]) for i, a in enumerate(users)], dtype=float)

    def after_step(self, state: IterateState, members) -> tuple[float, float]:
        users = self.users
        for i in members:
            self.f_y[i] = users[i].f_value(state.y[i])
            self.g_y[i] = users[i].g_value(state.y[i])
        phi = eval_phi(self.problem, state.x)
        server = self.problem.server
        f_m = server.f_value(state.x)
        if f_m == math.inf or np.any(self.f_y == math.inf):
            return phi, math.inf
        sigma = self.sigma
        h = f_m + server.g_value(state.x)
        # same summation order as eval_H so both agree to rounding
        for i, agent in enumerate(users):
            h += self.f_y[i]
            if sigma != 1:
                h += (1 - sigma) * self.g_y[i]
            if sigma != 0:
                h += sigma * agent.g_value(state.x)
        return phi, float(h)
