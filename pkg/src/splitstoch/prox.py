"""Closed-form proximal maps, logistic-loss pieces and the scaled-prox identity.

Every prox oracle takes its step explicitly: ``prox(point, step)`` evaluates
``argmin_y step * f(y) + 0.5 * ||y - point||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from splitstoch.core import ProxOracle, SplitStochError


class ZeroNormal(SplitStochError, ValueError):
    pass


def soft_threshold(v, tau: float) -> np.ndarray:
    """Componentwise shrinkage ``sign(v) * max(|v| - tau, 0)``, the prox of ``tau * ||.||_1``."""
    if tau < 0:
        raise ValueError(f"threshold must be nonnegative, got {tau}")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def project_hyperplane(a, b: float, x) -> np.ndarray:
    """Euclidean projection of ``x`` onto ``{y : a.y = b}``."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    nrm2 = float(a @ a)
    if nrm2 == 0.0:
        raise ZeroNormal("hyperplane normal has zero norm")
    return x - ((float(a @ x) - b) / nrm2) * a


def _log1pexp_neg(t):
    # log(1 + exp(-t)), branching at t = 0 so exp never overflows
    t = np.asarray(t, dtype=float)
    pos = t >= 0
    out = np.empty_like(t)
    out[pos] = np.log1p(np.exp(-t[pos]))
    out[~pos] = -t[~pos] + np.log1p(np.exp(t[~pos]))
    return out


def logistic_loss(a, b: float, w: float, x) -> float:
    """``w * log(1 + exp(-b a.x))``."""
    t = b * float(np.dot(a, x))
    return float(w * _log1pexp_neg(np.array([t]))[0])


def logistic_gradient(a, b: float, w: float, x) -> np.ndarray:
    """Gradient of ``logistic_loss`` in ``x``; Lipschitz with modulus ``w ||a||^2 / 4``."""
    a = np.asarray(a, dtype=float)
    t = b * float(a @ x)
    return -w * b * expit(-t) * a


def logistic_block_value(A: np.ndarray, labels: np.ndarray, w: float, x) -> float:
    """``w * sum_i log(1 + exp(-b_i a_i.x))`` over the rows of ``A``."""
    return float(w * _log1pexp_neg(labels * (A @ x)).sum())


def logistic_block_gradient(A: np.ndarray, labels: np.ndarray, w: float, x) -> np.ndarray:
    t = labels * (A @ x)
    return -w * (A.T @ (labels * expit(-t)))


def logistic_block_lipschitz(A: np.ndarray, w: float, bound: str = "spectral") -> float:
    """Lipschitz modulus of ``logistic_block_gradient``.

    ``"spectral"`` gives ``w * sigma_max(A)^2 / 4``, the tightest bound that
    holds for every label vector; ``"trace"`` gives the looser per-sample sum
    ``w * sum_i ||a_i||^2 / 4``.
    """
    A = np.asarray(A, dtype=float)
    if bound == "trace":
        return float(w * np.einsum("ij,ij->", A, A) / 4.0)
    if bound == "spectral":
        if A.size == 0:
            return 0.0
        return float(w * np.linalg.norm(A, 2) ** 2 / 4.0)
    raise ValueError(f"unknown bound {bound!r}")


# -- prox oracles for the built-in function families --------------------------

def zero_prox(point, step):
    return np.array(point, dtype=float)


def l1_prox(weight: float) -> ProxOracle:
    def prox(point, step):
        return soft_threshold(point, step * weight)

    return prox


def hyperplane_prox(a, b: float) -> ProxOracle:
    a = np.asarray(a, dtype=float)
    if not a @ a > 0:
        raise ZeroNormal("hyperplane normal has zero norm")

    def prox(point, step):
        return project_hyperplane(a, b, point)

    return prox


def point_prox(c) -> ProxOracle:
    c = np.asarray(c, dtype=float)

    def prox(point, step):
        return c.copy()

    return prox


# -- implicit regularized prox ------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScaledProxRequest:
    """Solve ``x = prox_{step * f}(anchor - delta * x)`` for ``x``."""

    prox: ProxOracle
    anchor: np.ndarray
    delta: float
    step: float

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")


def resolve_scaled_prox(req: ScaledProxRequest) -> np.ndarray:
    """Closed-form solution ``prox_{step f / (1 + delta)}(anchor / (1 + delta))``.

    The regularized relation is equivalent to a plain prox with both the
    step and the anchor shrunk by ``1 + delta``, so no inner iteration is
    needed.
    """
    scale = 1.0 + req.delta
    return req.prox(np.asarray(req.anchor, dtype=float) / scale, req.step / scale)
