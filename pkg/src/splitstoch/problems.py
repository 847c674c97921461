"""Problem builders: toy problems with closed-form solutions, planted random
instances with exact optimality certificates, compressed sensing by basis
pursuit, and l1-regularized logistic regression over LIBSVM-style data.

Every builder is a pure function of its arguments (including the seed).
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

from splitstoch.core import AgentSpec, OptimalityCertificate, ProblemInstance, SolverConfig, SplitStochError
from splitstoch.prox import (
    hyperplane_prox,
    l1_prox,
    logistic_block_gradient,
    logistic_block_lipschitz,
    logistic_block_value,
    point_prox,
    zero_prox,
)


class InvalidShape(SplitStochError, ValueError):
    pass


class EmptyBlock(SplitStochError, ValueError):
    pass


class ParseError(SplitStochError, ValueError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


class NonBinaryLabels(SplitStochError, ValueError):
    pass


# -- building blocks ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Nonsmooth:
    """A prox-friendly term ``f`` together with its value oracle."""

    prox: Any
    value: Any
    kind: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def zero(cls) -> "Nonsmooth":
        return cls(zero_prox, lambda x: 0.0, "zero")

    @classmethod
    def l1(cls, weight: float) -> "Nonsmooth":
        if weight < 0:
            raise ValueError("l1 weight must be nonnegative")
        w = float(weight)
        return cls(l1_prox(w), lambda x: w * float(np.abs(x).sum()), "l1", {"l1": w})

    @classmethod
    def hyperplane(cls, a, b: float, rtol: float = 1e-9) -> "Nonsmooth":
        """Indicator of ``{x : a.x = b}``; feasibility is judged up to a relative tolerance."""
        a = np.asarray(a, dtype=float)
        b = float(b)
        an = float(np.linalg.norm(a))

        def value(x):
            x = np.asarray(x, dtype=float)
            slack = abs(float(a @ x) - b)
            return 0.0 if slack <= rtol * max(1.0, abs(b), an * math.sqrt(float(x @ x))) else math.inf

        return cls(hyperplane_prox(a, b), value, "hyperplane", {"a": a, "b": b})

    @classmethod
    def point(cls, c) -> "Nonsmooth":
        c = np.asarray(c, dtype=float)
        return cls(point_prox(c), lambda x: 0.0 if np.array_equal(x, c) else math.inf, "point", {"c": c})


@dataclass(frozen=True, eq=False)
class Smooth:
    """A smooth term ``g`` with gradient and Lipschitz modulus."""

    value: Any
    grad: Any
    lipschitz: float
    kind: str
    meta: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, n: int) -> "Smooth":
        return cls(lambda x: 0.0, lambda x: np.zeros(n), 0.0, "zero")

    @classmethod
    def quadratic(cls, center, weight: float = 1.0) -> "Smooth":
        """``weight / 2 * ||x - center||^2``."""
        c = np.asarray(center, dtype=float)
        w = float(weight)

        def value(x):
            d = np.asarray(x, dtype=float) - c
            return 0.5 * w * float(d @ d)

        return cls(value, lambda x: w * (np.asarray(x, dtype=float) - c), w, "quadratic", {"center": c, "weight": w})

    @classmethod
    def logistic(cls, A, labels, weight: float, bound: str = "spectral") -> "Smooth":
        """``weight * sum_i log(1 + exp(-b_i a_i.x))`` over the rows of ``A``.

        ``bound`` picks the Lipschitz modulus, see :func:`logistic_block_lipschitz`.
        """
        A = np.asarray(A, dtype=float)
        labels = np.asarray(labels, dtype=float)
        w = float(weight)
        return cls(
            lambda x: logistic_block_value(A, labels, w, x),
            lambda x: logistic_block_gradient(A, labels, w, x),
            logistic_block_lipschitz(A, w, bound),
            "logistic",
            {"A": A, "labels": labels, "weight": w},
        )

    def tilted(self, r) -> "Smooth":
        """``g(x) - r.x``; same Lipschitz modulus."""
        r = np.asarray(r, dtype=float)
        base = self
        return Smooth(
            lambda x: base.value(x) - float(r @ np.asarray(x, dtype=float)),
            lambda x: base.grad(x) - r,
            base.lipschitz,
            base.kind + "+linear",
            {**base.meta, "tilt": r},
        )


def make_agent(f: Nonsmooth, g: Smooth) -> AgentSpec:
    return AgentSpec(
        prox=f.prox, grad=g.grad, lipschitz=g.lipschitz, f_value=f.value, g_value=g.value,
        kind=f"{f.kind}/{g.kind}", meta={"f": f, "g": g},
    )


# -- problems with known minimizers ---------------------------------------------

@dataclass(frozen=True, eq=False)
class PlantedProblem:
    """A problem together with a minimizer and one subgradient per user.

    ``subgradients[i]`` lies in the subdifferential of user ``i``'s ``f`` at
    ``x_star``, and the sum over all agents of subgradient plus gradient
    vanishes, so :meth:`certificate` is an exact fixed point of the solver.
    """

    problem: ProblemInstance
    x_star: np.ndarray
    subgradients: np.ndarray
    phi_star: float

    def certificate(self, config: SolverConfig) -> OptimalityCertificate:
        from splitstoch.diagnostics.metrics import certificate_from_subgradients

        return certificate_from_subgradients(self.problem, config, self.x_star, self.subgradients)


def toy1d() -> PlantedProblem:
    """``|x| + (x - 2)^2 / 2``: user holds ``|.|``, server the quadratic.  ``x* = 1``."""
    user = make_agent(Nonsmooth.l1(1.0), Smooth.zero(1))
    server = make_agent(Nonsmooth.zero(), Smooth.quadratic([2.0], 1.0))
    problem = ProblemInstance(1, (user, server), name="toy1d")
    return PlantedProblem(problem, np.array([1.0]), np.array([[1.0]]), 1.5)


TOY3D_CENTER = np.array([3.0, -0.5, -2.0])


def toy3d() -> PlantedProblem:
    """``||x||_1 + ||x - c||^2 / 2`` split over two users and the server.

    With ``c = (3, -0.5, -2)`` the minimizer is the soft threshold
    ``(2, 0, -1)``.
    """
    c = TOY3D_CENTER
    users = (
        make_agent(Nonsmooth.l1(0.5), Smooth.zero(3)),
        make_agent(Nonsmooth.l1(0.5), Smooth.quadratic(c, 0.5)),
    )
    server = make_agent(Nonsmooth.zero(), Smooth.quadratic(c, 0.5))
    problem = ProblemInstance(3, users + (server,), name="toy3d")
    x_star = np.sign(c) * np.maximum(np.abs(c) - 1.0, 0.0)
    s = c - x_star  # subgradient of ||.||_1 at x_star
    subgrads = np.array([0.5 * s, 0.5 * s])
    phi = float(np.abs(x_star).sum() + 0.5 * np.sum((x_star - c) ** 2))
    return PlantedProblem(problem, x_star, subgrads, phi)


def planted_instance(n: int, m: int, seed: int, kinds=("l1", "hyperplane", "logistic")) -> PlantedProblem:
    """Random instance with mixed user types and a planted minimizer.

    Users draw their term from ``kinds``: ``l1`` (weighted l1 plus a small
    quadratic), ``hyperplane`` (a linear constraint through ``x*``) or
    ``logistic`` (l1 plus a logistic loss over a few random samples).  The
    server holds an l1 term and a strongly convex quadratic whose linear
    tilt is chosen so that ``x*`` satisfies the optimality condition exactly.
    """
    if m < 2:
        raise InvalidShape("need at least 2 agents")
    rng = np.random.default_rng(seed)
    support = rng.random(n) < 0.5
    x_star = np.where(support, rng.standard_normal(n), 0.0)
    sign = np.sign(x_star)

    def l1_subgrad(w):
        return w * np.where(support, sign, rng.uniform(-1, 1, n))

    agents, subgrads, residual = [], [], np.zeros(n)
    for _ in range(m - 1):
        kind = kinds[rng.integers(len(kinds))]
        if kind == "l1":
            w = rng.uniform(0.1, 1.0)
            f, a = Nonsmooth.l1(w), l1_subgrad(w)
            g = Smooth.quadratic(rng.standard_normal(n), rng.uniform(0.1, 1.0))
        elif kind == "hyperplane":
            normal = rng.standard_normal(n)
            f = Nonsmooth.hyperplane(normal, float(normal @ x_star))
            a = rng.standard_normal() * normal
            g = Smooth.zero(n)
        elif kind == "logistic":
            w = rng.uniform(0.01, 0.1)
            f, a = Nonsmooth.l1(w), l1_subgrad(w)
            samples = int(rng.integers(2, 6))
            g = Smooth.logistic(rng.standard_normal((samples, n)), rng.choice([-1.0, 1.0], samples), 1.0 / samples)
        else:
            raise ValueError(f"unknown agent kind {kind!r}")
        agents.append(make_agent(f, g))
        subgrads.append(a)
        residual += a + g.grad(x_star)

    w_m = rng.uniform(0.1, 1.0)
    f_m, a_m = Nonsmooth.l1(w_m), l1_subgrad(w_m)
    base = Smooth.quadratic(rng.standard_normal(n), rng.uniform(0.5, 2.0))
    residual += a_m + base.grad(x_star)
    agents.append(make_agent(f_m, base.tilted(residual)))
    problem = ProblemInstance(n, tuple(agents), name=f"planted-{seed}")

    from splitstoch.diagnostics.metrics import eval_phi

    return PlantedProblem(problem, x_star, np.array(subgrads), eval_phi(problem, x_star))


# -- compressed sensing -----------------------------------------------------------

TRANSFORMS = ("dct", "dft_real")


def dct_rows(n: int, rows) -> np.ndarray:
    """Rows of the orthonormal DCT-II matrix ``C[k, j] = s_k cos(pi (2j + 1) k / (2n))``."""
    k = np.asarray(rows, dtype=float)[:, None]
    j = np.arange(n, dtype=float)[None, :]
    C = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * j + 1) * k / (2 * n))
    C[np.asarray(rows) == 0] /= np.sqrt(2.0)
    return C


def dft_real_rows(n: int, rows) -> np.ndarray:
    """Real embedding of DFT rows.

    Row ``2(f-1)`` is the cosine and row ``2(f-1)+1`` the sine at frequency
    ``f = 1, ..., ceil(n/2) - 1``, each scaled to unit norm.  These vectors are
    mutually orthonormal.
    """
    rows = np.asarray(rows)
    freq = (rows // 2 + 1).astype(float)[:, None]
    j = np.arange(n, dtype=float)[None, :]
    phase = 2 * np.pi * freq * j / n
    out = np.where((rows % 2 == 0)[:, None], np.cos(phase), np.sin(phase))
    return np.sqrt(2.0 / n) * out


def row_pool_size(n: int, transform: str) -> int:
    if transform == "dct":
        return n - 1  # the constant row is excluded
    if transform == "dft_real":
        return 2 * (math.ceil(n / 2) - 1)
    raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")


def _sensing_rows(n: int, transform: str, rows) -> np.ndarray:
    if transform == "dct":
        return dct_rows(n, rows)
    return dft_real_rows(n, rows)


@dataclass(frozen=True, eq=False)
class CSInstance:
    A: np.ndarray
    b: np.ndarray
    x_true: np.ndarray
    transform: str
    seed: int
    rows: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def save(self, path) -> None:
        """Write the replay container (``.npz``) holding everything needed to rebuild."""
        np.savez(path, n=self.n, p=self.p, transform=self.transform, seed=self.seed,
                 rows=self.rows, x_true=self.x_true)


def nonzero_count(n: int, sparsity: float) -> int:
    # round half up: 1% of 512 gives 5 nonzeros, 1% of 2500 gives 25
    return int(math.floor(sparsity * n + 0.5))


def cs_problem(instance: CSInstance) -> ProblemInstance:
    """Users are the ``p`` hyperplane constraints; the server holds ``||.||_1``."""
    n = instance.n
    zero = Smooth.zero(n)
    users = tuple(make_agent(Nonsmooth.hyperplane(a, b), zero) for a, b in zip(instance.A, instance.b))
    server = make_agent(Nonsmooth.l1(1.0), zero)
    return ProblemInstance(n, users + (server,), name=f"cs-{instance.transform}-{n}x{instance.p}")


def build_compressed_sensing(n: int, p: int, sparsity: float, transform: str = "dct", seed: int = 0):
    """Basis pursuit ``min ||x||_1 s.t. Ax = b`` with ``p`` distinct transform rows.

    Returns ``(CSInstance, ProblemInstance)``.
    """
    if not 0 < p < n:
        raise InvalidShape(f"need 0 < p < n, got p={p}, n={n}")
    if not 0 <= sparsity <= 1:
        raise ValueError(f"sparsity must lie in [0, 1], got {sparsity}")
    pool = row_pool_size(n, transform)
    if p > pool:
        raise InvalidShape(f"{transform} offers {pool} usable rows for n={n}, asked for {p}")
    rng = np.random.default_rng(seed)
    nnz = nonzero_count(n, sparsity)
    x_true = np.zeros(n)
    x_true[rng.choice(n, size=nnz, replace=False)] = rng.standard_normal(nnz)
    offset = 1 if transform == "dct" else 0
    rows = np.sort(rng.choice(pool, size=p, replace=False)) + offset
    A = _sensing_rows(n, transform, rows)
    inst = CSInstance(A, A @ x_true, x_true, transform, int(seed), rows)
    return inst, cs_problem(inst)


def load_cs_instance(path):
    """Rebuild ``(CSInstance, ProblemInstance)`` from a container written by :meth:`CSInstance.save`."""
    with np.load(path, allow_pickle=False) as data:
        n, p = int(data["n"]), int(data["p"])
        transform = str(data["transform"])
        rows = data["rows"].astype(int)
        x_true = data["x_true"].astype(float)
        seed = int(data["seed"])
    if rows.shape != (p,) or x_true.shape != (n,):
        raise InvalidShape("container fields have inconsistent shapes")
    A = _sensing_rows(n, transform, rows)
    inst = CSInstance(A, A @ x_true, x_true, transform, seed, rows)
    return inst, cs_problem(inst)


# -- datasets ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Binary classification data: CSR features (``N x n``) and labels in ``{-1, +1}``."""

    features: sp.csr_matrix
    labels: np.ndarray
    n: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[idx], self.labels[idx], self.n)


def parse_libsvm(text) -> Dataset:
    """Parse LIBSVM sparse text (``bytes``, ``str`` or a readable stream).

    Indices are 1-based and must be strictly increasing within a line;
    ``#`` starts a comment.  Labels ``{0, 1}`` become ``{-1, +1}``; more than
    two distinct labels is an error.
    """
    if hasattr(text, "read"):
        text = text.read()
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    labels, indptr, indices, values = [], [0], [], []
    n = 0
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            labels.append(float(tokens[0]))
        except ValueError:
            raise ParseError(lineno, f"bad label {tokens[0]!r}") from None
        last = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"expected index:value, got {tok!r}")
            try:
                idx, val = int(idx_s), float(val_s)
            except ValueError:
                raise ParseError(lineno, f"bad entry {tok!r}") from None
            if idx < 1:
                raise ParseError(lineno, f"index {idx} is not 1-based")
            if idx <= last:
                raise ParseError(lineno, f"index {idx} not strictly increasing")
            last = idx
            indices.append(idx - 1)
            values.append(val)
        n = max(n, last)
        indptr.append(len(indices))

    raw_labels = np.asarray(labels, dtype=float)
    distinct = set(np.unique(raw_labels).tolist())
    if len(distinct) > 2:
        raise NonBinaryLabels(f"found {len(distinct)} distinct labels")
    if distinct <= {-1.0, 1.0}:
        y = raw_labels
    elif distinct <= {0.0, 1.0}:
        y = 2 * raw_labels - 1
    elif len(distinct) == 2:
        lo = min(distinct)
        y = np.where(raw_labels == lo, -1.0, 1.0)
    else:
        raise NonBinaryLabels(f"cannot map label set {sorted(distinct)} to +-1")
    X = sp.csr_matrix((np.asarray(values, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
                      shape=(len(labels), n))
    return Dataset(X, y, n)


def to_libsvm(data: Dataset) -> str:
    X = data.features.tocsr()
    lines = []
    for r in range(X.shape[0]):
        lo, hi = X.indptr[r], X.indptr[r + 1]
        entries = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
        lines.append(f"{int(data.labels[r]):+d} {entries}".rstrip())
    return "\n".join(lines) + ("\n" if lines else "")


def load_libsvm(path) -> Dataset:
    with open(os.fspath(path), "rb") as fh:
        return parse_libsvm(fh.read())


def split_train_test(data: Dataset, train_fraction: float, seed: int):
    """Seeded random split; the first ``ceil(f * N)`` permuted samples go to training."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    N = len(data)
    perm = np.random.default_rng(seed).permutation(N)
    cut = math.ceil(train_fraction * N)
    return data.subset(np.sort(perm[:cut])), data.subset(np.sort(perm[cut:]))


def synthetic_binary_dataset(N: int = 2000, n: int = 112, groups: int = 22, seed: int = 0) -> Dataset:
    """Categorical one-hot data shaped like the mushrooms set.

    The ``n`` features are split into ``groups`` attributes; each sample
    activates exactly one feature per attribute.  Labels come from a sparse
    planted logistic model, so the classes are overlapping but learnable.
    """
    if groups > n:
        raise InvalidShape("more attributes than features")
    rng = np.random.default_rng(seed)
    sizes = np.full(groups, n // groups)
    sizes[: n % groups] += 1
    starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
    cols = starts[None, :] + (rng.random((N, groups)) * sizes[None, :]).astype(int)
    cols.sort(axis=1)
    X = sp.csr_matrix(
        (np.ones(N * groups), cols.ravel(), np.arange(0, N * groups + 1, groups)), shape=(N, n)
    )
    w = np.where(rng.random(n) < 0.3, rng.normal(0, 2.0, n), 0.0)
    t = X @ w
    t -= np.median(t)
    prob = 1.0 / (1.0 + np.exp(-t))
    labels = np.where(rng.random(N) < prob, 1.0, -1.0)
    return Dataset(X, labels, n)


def build_logistic(data: Dataset, m_agents: int, lambda_range=(1e-3, 1e-2), seed: int = 0,
                   lipschitz: str = "spectral") -> ProblemInstance:
    """l1-regularized logistic regression with samples dealt round-robin to agents.

    Agent ``j`` receives samples ``j, j + m, j + 2m, ...`` and holds

    * ``g_j(x) = (1/N) sum_{i in B_j} log(1 + exp(-b_i a_i.x))``
    * ``f_j(x) = (|B_j| / N) lambda_j ||x||_1`` with ``lambda_j ~ U[lo, hi]``

    so that ``Phi(x) = (1/N) sum_i [loss_i(x) + lambda_{block(i)} ||x||_1]``.
    The last agent is the server.  ``lipschitz`` selects the modulus of each
    ``g_j``: ``"spectral"`` (``sigma_max(A_j)^2 / (4N)``) or ``"trace"``
    (``sum_{i in B_j} ||a_i||^2 / (4N)``).
    """
    lo, hi = lambda_range
    if m_agents < 2:
        raise InvalidShape("need at least 2 agents")
    if lo > hi:
        raise ValueError("lambda range must satisfy lo <= hi")
    N = len(data)
    if m_agents > N:
        raise EmptyBlock(f"{m_agents} agents but only {N} samples")
    rng = np.random.default_rng(seed)
    lambdas = rng.uniform(lo, hi, m_agents)
    X = data.features.tocsr()
    agents = []
    for j in range(m_agents):
        block = np.arange(j, N, m_agents)
        A = X[block].toarray()
        g = Smooth.logistic(A, data.labels[block], 1.0 / N, lipschitz)
        f = Nonsmooth.l1(len(block) / N * lambdas[j])
        agents.append(make_agent(f, g))
    return ProblemInstance(data.n, tuple(agents), name=f"logistic-{N}x{data.n}-m{m_agents}")
