"""Reference optimal values and repeated-run estimates of expected optimality."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from splitstoch.core import (
    ErgodicAverages,
    OptimalityCertificate,
    ProblemInstance,
    SolverConfig,
    SplitStochError,
    initial_state,
    make_config,
)
from splitstoch.diagnostics.metrics import eval_H, eval_phi
from splitstoch.prox import soft_threshold
from splitstoch.sampling import ParticipationPolicy


class NoConvergence(SplitStochError, RuntimeError):
    def __init__(self, tol: float, iters: int):
        self.tol = tol
        self.iters = iters
        super().__init__(f"reference solver did not reach tolerance {tol:g} in {iters} iterations")


def _term_kinds(problem: ProblemInstance):
    kinds = []
    for agent in problem.agents:
        f = agent.meta.get("f")
        kinds.append(None if f is None else f.kind)
    return kinds


def _l1_weight(problem: ProblemInstance) -> float:
    return sum(agent.meta["f"].meta.get("l1", 0.0) for agent in problem.agents)


def _smooth_grad(problem: ProblemInstance, x) -> np.ndarray:
    out = np.zeros(problem.n)
    for agent in problem.agents:
        out += agent.grad(x)
    return out


def _proximal_gradient(problem: ProblemInstance, tol: float, max_iters: int):
    """FISTA with gradient-based restart on ``sum g_i + w ||.||_1``, step ``1 / sum L_i``."""
    w = _l1_weight(problem)
    L = float(problem.lipschitz.sum())
    x = np.zeros(problem.n)
    if L == 0:
        # no smooth part: the minimizer of w ||x||_1 is 0
        return x
    t = 1.0 / L
    y, theta = x.copy(), 1.0
    for it in range(1, max_iters + 1):
        x_new = soft_threshold(y - t * _smooth_grad(problem, y), t * w)
        # fixed-point residual of the plain forward-backward map at x_new
        r = x_new - soft_threshold(x_new - t * _smooth_grad(problem, x_new), t * w)
        if np.linalg.norm(r) / t <= tol:
            return x_new
        if np.dot(y - x_new, x_new - x) > 0:
            theta = 1.0
        theta_new = (1 + math.sqrt(1 + 4 * theta * theta)) / 2
        y = x_new + ((theta - 1) / theta_new) * (x_new - x)
        x, theta = x_new, theta_new
    raise NoConvergence(tol, max_iters)


def _basis_pursuit(problem: ProblemInstance, tol: float):
    """``min w ||x||_1`` subject to the users' hyperplanes, as a linear program."""
    n = problem.n
    rows, rhs = [], []
    for agent in problem.agents:
        f = agent.meta["f"]
        if f.kind == "hyperplane":
            rows.append(f.meta["a"])
            rhs.append(f.meta["b"])
    A, b = np.array(rows), np.array(rhs)
    w = _l1_weight(problem)
    res = linprog(
        np.full(2 * n, w), A_eq=np.hstack([A, -A]), b_eq=b, bounds=(0, None), method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise NoConvergence(tol, int(getattr(res, "nit", 0)))
    x = res.x[:n] - res.x[n:]
    # polish on the detected support: exact feasibility by least squares
    support = np.abs(x) > 1e-9 * max(1.0, np.abs(x).max())
    if support.any():
        sol, *_ = np.linalg.lstsq(A[:, support], b, rcond=None)
        polished = np.zeros(n)
        polished[support] = sol
        if np.all(np.sign(sol) == np.sign(x[support])) and np.linalg.norm(A @ polished - b) <= np.linalg.norm(A @ x - b) + 1e-14:
            x = polished
    return x


def _splitting_reference(problem: ProblemInstance, tol: float, max_iters: int):
    from splitstoch.solver import step

    config = make_config(problem, participation=ParticipationPolicy.fixed_fraction(1.0), max_iters=max_iters)
    state = initial_state(problem)
    for _ in range(max_iters):
        prev = state.x
        state, rec = step(problem, config, state, evaluate=False)
        if rec.stopping_error <= tol * tol and np.linalg.norm(state.x - prev) <= tol * tol * max(1.0, np.linalg.norm(prev)):
            return state.x
    raise NoConvergence(tol, max_iters)


def reference_solve(problem: ProblemInstance, tol: float = 1e-10, max_iters: int = 200_000):
    """High-accuracy ``(x_ref, phi_star)`` by a method independent of the splitting solver where possible.

    * every ``f_i`` is an l1 term or zero: accelerated proximal gradient on
      the pooled problem, stopped on the forward-backward residual;
    * l1 plus hyperplane constraints with no smooth part: linear program;
    * anything else: full-participation splitting iterations until both the
      stopping error and the step length drop below ``tol**2``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    kinds = _term_kinds(problem)
    if None not in kinds and set(kinds) <= {"zero", "l1"}:
        x = _proximal_gradient(problem, tol, max_iters)
    elif None not in kinds and set(kinds) <= {"zero", "l1", "hyperplane"} and float(problem.lipschitz.sum()) == 0:
        x = _basis_pursuit(problem, tol)
    else:
        x = _splitting_reference(problem, tol, max_iters)
    return x, eval_phi(problem, x)


def certificate_from_run(state) -> OptimalityCertificate:
    """``(z^K, x^K)`` from a converged full-participation run."""
    return OptimalityCertificate(state.z.copy(), state.x.copy())


# -- repeated runs --------------------------------------------------------------

def run_seed(base_seed: int, r: int) -> int:
    """Independent 64-bit seed for repeat ``r``."""
    return int(np.random.SeedSequence([int(base_seed), int(r)]).generate_state(1, np.uint64)[0])


def ergodic_path(problem: ProblemInstance, config: SolverConfig, checkpoints, init=None) -> list[ErgodicAverages]:
    """Ergodic averages after exactly ``K`` steps for each ``K`` in ``checkpoints`` (one run)."""
    from splitstoch.solver import _ErgodicSums, step

    checkpoints = sorted(int(K) for K in checkpoints)
    state = initial_state(problem) if init is None else init.copy()
    sums = _ErgodicSums(state)
    out = []
    for K in checkpoints:
        while state.k < K:
            state, rec = step(problem, config, state, evaluate=False, inplace=True)
            sums.after_step(state, rec.members)
        out.append(sums.averages())
    return out


def _with_seed(config: SolverConfig, seed: int) -> SolverConfig:
    from dataclasses import replace

    return replace(config, seed=seed)


def expected_gaps(problem: ProblemInstance, config: SolverConfig, runs: int, checkpoints, phi_star: float, init=None):
    """Per checkpoint, the two expected-optimality margins estimated from ``runs`` seeded runs.

    Returns arrays ``(consensus, gap)`` where ``consensus[c]`` is the largest
    pairwise distance between the run-averaged blocks ``(y_av_1, ..., y_av_{m-1}, x_av)``
    and ``gap[c] = |mean_r H(y_av, x_av) - phi_star|``.
    """
    checkpoints = sorted(int(K) for K in checkpoints)
    users = problem.m - 1
    blocks = np.zeros((len(checkpoints), users + 1, problem.n))
    hsum = np.zeros(len(checkpoints))
    for r in range(runs):
        path = ergodic_path(problem, _with_seed(config, run_seed(config.seed, r)), checkpoints, init)
        for c, avg in enumerate(path):
            blocks[c, :users] += avg.y_av
            blocks[c, users] += avg.x_av
            hsum[c] += eval_H(problem, config, avg.y_av, avg.x_av)
    blocks /= runs
    consensus = np.array([_max_pairwise(b) for b in blocks])
    gap = np.abs(hsum / runs - phi_star)
    return consensus, gap


def _max_pairwise(blocks: np.ndarray) -> float:
    best = 0.0
    for i in range(blocks.shape[0] - 1):
        d = blocks[i + 1:] - blocks[i]
        best = max(best, float(np.einsum("ij,ij->i", d, d).max()))
    return math.sqrt(best)


@dataclass(frozen=True)
class EpsReport:
    runs: int
    K: int
    eps: float
    consensus_margin: float
    gap_margin: float

    @property
    def consensus_ok(self) -> bool:
        return self.consensus_margin <= self.eps

    @property
    def gap_ok(self) -> bool:
        return self.gap_margin <= self.eps

    @property
    def ok(self) -> bool:
        return self.consensus_ok and self.gap_ok


def eps_optimality(problem: ProblemInstance, config: SolverConfig, runs: int, eps: float, phi_star: float,
                   K: int | None = None, init=None) -> EpsReport:
    """Check epsilon-optimality in expectation of the ergodic averages after ``K`` steps.

    ``K`` defaults to ``config.max_iters``.  Expectations are sample means over
    ``runs`` independently seeded runs.
    """
    if runs < 2:
        raise ValueError("need at least 2 runs")
    K = config.max_iters if K is None else int(K)
    consensus, gap = expected_gaps(problem, config, runs, [K], phi_star, init)
    return EpsReport(runs, K, eps, float(consensus[0]), float(gap[0]))


def loglog_slope(Ks, values) -> float:
    """Least-squares slope of ``log(values)`` against ``log(Ks)``."""
    slope, _ = np.polyfit(np.log(np.asarray(Ks, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)
    return float(slope)
