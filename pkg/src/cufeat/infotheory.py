"""Entropy and plug-in mutual information of non-target output distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import InvalidInputError, as_vector, entropy_nat, softmax

MI_ROUNDING_TOL = 1e-12


@dataclass
class ConditionalBatch:
    """Non-target distributions (N, n-1) of N samples that all belong to class ``class_id``."""

    dists: np.ndarray
    class_id: int = 0

    def __post_init__(self):
        self.dists = np.atleast_2d(np.asarray(self.dists, dtype=np.float64))
        if self.dists.ndim != 2 or self.dists.shape[0] < 1:
            raise InvalidInputError("a conditional batch needs at least one distribution")
        if np.any(self.dists < 0) or np.any(np.abs(self.dists.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidInputError("every row must be a probability vector")

    @property
    def N(self) -> int:
        return self.dists.shape[0]

    @classmethod
    def from_logits(cls, Z, t: int) -> "ConditionalBatch":
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] < 3:
            raise InvalidInputError("need n >= 3 classes")
        return cls(softmax(np.delete(Z, t, axis=1)), t)


def nontarget_distribution(z, t: int) -> np.ndarray:
    """Softmax over the logits with the target coordinate removed."""
    z = as_vector(z)
    if z.size < 3:
        raise InvalidInputError("non-target distribution needs n >= 3")
    if not 0 <= t < z.size:
        raise InvalidInputError(f"target {t} out of range for n={z.size}")
    return softmax(np.delete(z, t))


def nontarget_distributions(Z, T) -> np.ndarray:
    """Row-wise version for a (B, n) logit matrix and (B,) targets; returns (B, n-1)."""
    Z = np.asarray(Z, dtype=np.float64)
    T = np.asarray(T)
    B, n = Z.shape
    keep = np.ones((B, n), dtype=bool)
    keep[np.arange(B), T] = False
    return softmax(Z[keep].reshape(B, n - 1))


def entropy_upper_bound(n: int) -> float:
    """ln(n-1): the largest attainable non-target entropy with n classes."""
    if n < 3:
        raise InvalidInputError(f"the bound needs n > 2 classes, got {n}")
    return math.log(n - 1)


def empirical_conditional_entropy(batch: ConditionalBatch) -> float:
    return float(np.mean(entropy_nat(batch.dists)))


def marginal_entropy(batch: ConditionalBatch) -> float:
    """Entropy of the batch-averaged non-target distribution."""
    return entropy_nat(batch.dists.mean(axis=0))


def plug_in_mi(batch: ConditionalBatch) -> float:
    """I(Y; X) with X uniform over the N samples: H(mean) - mean(H)."""
    mi = marginal_entropy(batch) - empirical_conditional_entropy(batch)
    if mi < -MI_ROUNDING_TOL:
        raise ArithmeticError(f"plug-in MI came out negative ({mi}); concavity violated")
    return max(mi, 0.0)
