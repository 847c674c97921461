"""Random participation draws.

Each draw is generated from a counter-based Philox stream keyed by the run
seed, with the iteration index placed in the top counter word.  The subset at
iteration ``k`` is therefore a pure function of ``(seed, k, policy)``: it can
be replayed out of order and cannot depend on the iterates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParticipationPolicy:
    """Either independent inclusion with probabilities ``probs`` (``mode="bernoulli"``)
    or a uniformly random subset of fixed size ``round(rho * users)`` (``mode="fixed_fraction"``).
    """

    mode: str
    probs: tuple[float, ...] | None = None
    rho: float | None = None

    @classmethod
    def bernoulli(cls, probs) -> "ParticipationPolicy":
        probs = tuple(float(p) for p in probs)
        if not probs or any(not 0 < p <= 1 for p in probs):
            raise ValueError("inclusion probabilities must lie in (0, 1]")
        return cls("bernoulli", probs=probs)

    @classmethod
    def fixed_fraction(cls, rho: float) -> "ParticipationPolicy":
        if not 0 < rho <= 1:
            raise ValueError(f"participation fraction must lie in (0, 1], got {rho}")
        return cls("fixed_fraction", rho=float(rho))

    def subset_size(self, users: int) -> int:
        if self.mode != "fixed_fraction":
            raise ValueError("subset size is only defined for fixed_fraction")
        # round half up; python's round() is banker's rounding
        return max(1, int(math.floor(self.rho * users + 0.5)))


def validate_policy(policy: ParticipationPolicy, users: int) -> None:
    if policy.mode == "bernoulli":
        if len(policy.probs) != users:
            raise ValueError(f"bernoulli policy has {len(policy.probs)} probabilities, expected {users}")
    elif policy.mode == "fixed_fraction":
        if math.ceil(policy.rho * users) < 1:
            raise ValueError("fixed_fraction selects no users")
    else:
        raise ValueError(f"unknown participation mode {policy.mode!r}")


@dataclass(frozen=True)
class SampleDraw:
    k: int
    members: tuple[int, ...]

    def mask(self, users: int) -> np.ndarray:
        out = np.zeros(users, dtype=bool)
        out[list(self.members)] = True
        return out


def keyed_rng(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(k)]))


def draw(policy: ParticipationPolicy, k: int, seed: int, users: int) -> SampleDraw:
    """Participating users (0-based, sorted) at iteration ``k``."""
    rng = keyed_rng(seed, k)
    if policy.mode == "bernoulli":
        probs = np.asarray(policy.probs)
        if probs.size != users:
            raise ValueError(f"bernoulli policy has {probs.size} probabilities, expected {users}")
        members = np.flatnonzero(rng.random(users) < probs)
    else:
        size = policy.subset_size(users)
        members = np.sort(rng.choice(users, size=size, replace=False))
    return SampleDraw(k, tuple(int(i) for i in members))


def inclusion_probability(policy: ParticipationPolicy, i: int, users: int) -> float:
    """Marginal probability that user ``i`` (0-based) is drawn at any iteration."""
    if not 0 <= i < users:
        raise IndexError(f"user index {i} out of range for {users} users")
    if policy.mode == "bernoulli":
        return policy.probs[i]
    return policy.subset_size(users) / users


def inclusion_probabilities(policy: ParticipationPolicy, users: int) -> np.ndarray:
    return np.array([inclusion_probability(policy, i, users) for i in range(users)])
