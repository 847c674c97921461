"""Shared data model: problems, solver configuration, iterate state, traces.

Agents are indexed from 0.  A problem with ``m`` agents has users
``0, ..., m-2`` and the server at index ``m-1``.  Smooth terms are described
by their Lipschitz modulus ``L_i = 1/beta_i``; ``L_i = 0`` encodes
``beta_i = inf``, so every ``r/0`` in the step-size windows becomes a term that
simply drops out.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from splitstoch.sampling import ParticipationPolicy


class SplitStochError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(SplitStochError, ValueError):
    pass


class EmptyParameterWindow(SplitStochError, ValueError):
    """A parameter window is empty for some user index."""

    def __init__(self, index: int, reason: str):
        self.index = index
        self.reason = reason
        super().__init__(f"empty parameter window at user {index}: {reason}")


class InvalidConfig(SplitStochError, ValueError):
    """Configuration lies outside the convergent parameter region."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        failed = ", ".join(name for name, ok in report.checks.items() if not ok)
        super().__init__(f"configuration rejected: {failed}")


ProxOracle = Callable[[np.ndarray, float], np.ndarray]
GradOracle = Callable[[np.ndarray], np.ndarray]
ValueOracle = Callable[[np.ndarray], float]


@dataclass(frozen=True, eq=False)
class AgentSpec:
    """One term ``f_i + g_i`` of the composite objective.

    ``prox(point, step)`` returns ``prox_{step * f_i}(point)``.  ``meta`` is
    free-form structural information (e.g. ``{"l1": 0.3}``) used by the
    reference solvers; the solver itself never reads it.
    """

    prox: ProxOracle
    grad: GradOracle
    lipschitz: float
    f_value: ValueOracle
    g_value: ValueOracle
    kind: str = "generic"
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lipschitz >= 0:
            raise ValueError(f"lipschitz must be nonnegative, got {self.lipschitz}")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    n: int
    agents: tuple[AgentSpec, ...]
    name: str = "problem"

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.n < 1:
            raise DimensionMismatch(f"dimension must be positive, got {self.n}")
        if len(self.agents) < 2:
            raise DimensionMismatch(f"need at least 2 agents, got {len(self.agents)}")

    @property
    def m(self) -> int:
        return len(self.agents)

    @property
    def users(self) -> tuple[AgentSpec, ...]:
        return self.agents[:-1]

    @property
    def server(self) -> AgentSpec:
        return self.agents[-1]

    @property
    def lipschitz(self) -> np.ndarray:
        return np.array([a.lipschitz for a in self.agents], dtype=float)


@dataclass(frozen=True, eq=False)
class SolverConfig:
    gamma: float
    sigma: float
    alpha: tuple[float, ...]
    lambdas: tuple[float, ...]
    participation: "ParticipationPolicy"
    max_iters: int = 1000
    tolerance: float = 1e-8
    seed: int = 0
    record_virtual: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")

    @property
    def alpha_array(self) -> np.ndarray:
        return np.asarray(self.alpha)

    @property
    def lambda_array(self) -> np.ndarray:
        return np.asarray(self.lambdas)


@dataclass(eq=False)
class IterateState:
    """Mutable iterate owned by one solver run.

    ``y``, ``z`` and both gradient caches are ``(m-1, n)`` arrays, one row per
    user.  ``grad_own[i]`` holds the user's own gradient at ``y[i]`` and
    ``grad_server[i]`` the server's gradient at ``y[i]``.
    """

    k: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    grad_own: np.ndarray
    grad_server: np.ndarray
    prox_calls: int = 0
    grad_calls: int = 0

    def copy(self) -> "IterateState":
        return IterateState(
            self.k, self.x.copy(), self.y.copy(), self.z.copy(),
            self.grad_own.copy(), self.grad_server.copy(),
            self.prox_calls, self.grad_calls,
        )


def initial_state(problem: ProblemInstance, x0=None, y0=None, z0=None) -> IterateState:
    """Build ``IterateState`` at ``k = 0``, defaulting to all-zero vectors.

    Pays the one-off warm-up of ``2(m-1)`` gradient evaluations that fill
    both caches.
    """
    n, users = problem.n, problem.m - 1
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(n)
    y = np.zeros((users, n)) if y0 is None else np.array(y0, dtype=float).reshape(users, n)
    z = np.zeros((users, n)) if z0 is None else np.array(z0, dtype=float).reshape(users, n)
    server = problem.server
    grad_own = np.array([agent.grad(y[i]) for i, agent in enumerate(problem.users)]).reshape(users, n)
    grad_server = np.array([server.grad(y[i]) for i in range(users)]).reshape(users, n)
    return IterateState(0, x, y, z, grad_own, grad_server, prox_calls=0, grad_calls=2 * users)


@dataclass(frozen=True, eq=False)
class OptimalityCertificate:
    z_star: np.ndarray
    x_star: np.ndarray


@dataclass(frozen=True)
class TraceRecord:
    k: int
    stopping_error: float
    consensus_max: float
    phi: float
    h_value: float
    lyapunov: float | None
    prox_calls: int
    grad_calls: int
    members: tuple[int, ...] = ()
    elapsed_s: float | None = None
    virtual: Any = field(default=None, compare=False, repr=False)


@dataclass(frozen=True, eq=False)
class ErgodicAverages:
    """Running means ``x_av = mean(x^1..x^K)`` and ``y_av[i] = mean(y_i^0..y_i^{K-1})``."""

    x_av: np.ndarray
    y_av: np.ndarray
    K: int = 0

    @classmethod
    def empty(cls, n: int, users: int) -> "ErgodicAverages":
        return cls(np.zeros(n), np.zeros((users, n)), 0)

    def accumulated(self, x_next: np.ndarray, y_prev: np.ndarray) -> "ErgodicAverages":
        K = self.K + 1
        return ErgodicAverages(
            self.x_av + (x_next - self.x_av) / K,
            self.y_av + (y_prev - self.y_av) / K,
            K,
        )


# -- parameter windows -------------------------------------------------------

def _ratio(num: float, den: float) -> float:
    # r/0 = inf for every r, including 0/0
    if den == 0:
        return math.inf
    try:
        return float(num) / float(den)
    except OverflowError:
        return math.inf


def gamma_bounds(problem: ProblemInstance, alpha: Sequence[float], sigma: float) -> np.ndarray:
    """Per-user upper bound on the step size; the admissible window is ``(0, min)``."""
    users = problem.m - 1
    L = problem.lipschitz
    L_server = L[-1]
    out = np.empty(users)
    for i in range(users):
        a, Li = float(alpha[i]), L[i]
        first = _ratio(2 * a, L_server / users + sigma * Li)
        second = _ratio(2 * (2 + a), (1 - sigma) * Li)
        out[i] = min(first, second)
    return out


def lambda_upper(problem: ProblemInstance, alpha: Sequence[float], sigma: float, gamma: float) -> np.ndarray:
    L = problem.lipschitz[:-1]
    return np.array([2 + a - (1 - sigma) * gamma * Li / 2 for a, Li in zip(alpha, L)], dtype=float)


@dataclass(frozen=True)
class ValidationReport:
    gamma_bound: float
    gamma_bounds: tuple[float, ...]
    lambda_windows: tuple[tuple[float, float], ...]
    checks: dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def describe(self) -> str:
        lines = [f"gamma window: (0, {self.gamma_bound:.6g})"]
        uppers = [hi for _, hi in self.lambda_windows]
        lines.append(f"lambda windows: (0, u_i) with u_i in [{min(uppers):.6g}, {max(uppers):.6g}]")
        for name, ok in self.checks.items():
            lines.append(f"  {name}: {'pass' if ok else 'FAIL'}")
        return "\n".join(lines)


def validate_config(problem: ProblemInstance, config: SolverConfig) -> ValidationReport:
    """Check ``config`` against the admissible parameter windows for ``problem``.

    Raises
    ------
    DimensionMismatch
        If ``alpha`` or ``lambdas`` does not have one entry per user.
    EmptyParameterWindow
        If some user admits no valid step size or relaxation at all.
    """
    users = problem.m - 1
    if len(config.alpha) != users:
        raise DimensionMismatch(f"alpha has {len(config.alpha)} entries, expected {users}")
    if len(config.lambdas) != users:
        raise DimensionMismatch(f"lambda has {len(config.lambdas)} entries, expected {users}")
    sigma = config.sigma
    if not 0 <= sigma <= 1:
        raise EmptyParameterWindow(-1, f"sigma={sigma} outside [0, 1]")
    floor_term = math.floor(1 - sigma)
    for i, a in enumerate(config.alpha):
        if a < 0:
            raise EmptyParameterWindow(i, f"alpha={a} is negative")
        if a + floor_term == 0:
            raise EmptyParameterWindow(i, f"alpha + floor(1 - sigma) = 0 (alpha={a}, sigma={sigma})")

    bounds = gamma_bounds(problem, config.alpha, sigma)
    for i, b in enumerate(bounds):
        if not b > 0:
            raise EmptyParameterWindow(i, "step-size window is empty")
    gamma_bound = float(bounds.min())
    gamma_ok = 0 < config.gamma < gamma_bound

    uppers = lambda_upper(problem, config.alpha, sigma, config.gamma)
    if gamma_ok:
        for i, u in enumerate(uppers):
            if not u > 0:
                raise EmptyParameterWindow(i, "relaxation window is empty")
    lam = config.lambda_array
    lambda_ok = bool(np.all((lam > 0) & (lam < uppers)))

    from splitstoch.sampling import validate_policy

    try:
        validate_policy(config.participation, users)
        policy_ok = True
    except ValueError:
        policy_ok = False

    return ValidationReport(
        gamma_bound=gamma_bound,
        gamma_bounds=tuple(float(b) for b in bounds),
        lambda_windows=tuple((0.0, float(u)) for u in uppers),
        checks={
            "alpha_floor_condition": True,
            "gamma_in_window": bool(gamma_ok),
            "lambda_in_window": lambda_ok,
            "participation": policy_ok,
        },
    )


def default_gamma(problem: ProblemInstance, alpha: Sequence[float], sigma: float) -> float:
    bound = float(gamma_bounds(problem, alpha, sigma).min())
    return 0.9 * bound if math.isfinite(bound) else 1.0


def default_lambdas(problem: ProblemInstance, alpha: Sequence[float], sigma: float, gamma: float) -> tuple[float, ...]:
    return tuple(float(min(1.0, 0.99 * u)) for u in lambda_upper(problem, alpha, sigma, gamma))


def make_config(
    problem: ProblemInstance,
    *,
    alpha: float | Sequence[float] = 1.0,
    sigma: float = 0.5,
    gamma: float | None = None,
    lambdas: float | Sequence[float] | None = None,
    participation: "ParticipationPolicy | None" = None,
    max_iters: int = 1000,
    tolerance: float = 1e-8,
    seed: int = 0,
    record_virtual: bool = False,
) -> SolverConfig:
    """Assemble a ``SolverConfig`` filling unspecified step sizes with safe defaults.

    ``gamma`` defaults to 0.9 times the admissible bound (1.0 when the bound is
    infinite) and each relaxation to ``min(1, 0.99 * upper_i)``.
    """
    from splitstoch.sampling import ParticipationPolicy

    users = problem.m - 1
    alpha_t = (float(alpha),) * users if np.isscalar(alpha) else tuple(float(a) for a in alpha)
    if gamma is None:
        gamma = default_gamma(problem, alpha_t, sigma)
    if lambdas is None:
        lam_t = default_lambdas(problem, alpha_t, sigma, gamma)
    elif np.isscalar(lambdas):
        lam_t = (float(lambdas),) * users
    else:
        lam_t = tuple(float(v) for v in lambdas)
    if participation is None:
        participation = ParticipationPolicy.fixed_fraction(1.0)
    return SolverConfig(
        gamma=float(gamma), sigma=float(sigma), alpha=alpha_t, lambdas=lam_t,
        participation=participation, max_iters=max_iters, tolerance=tolerance,
        seed=seed, record_virtual=record_virtual,
    )
