"""Stable float64 primitives shared by the loss, game and trainer modules."""

from __future__ import annotations

import math
from itertools import combinations

import numpy as np

LOG_FLOOR = 1e-300
TIE_TOL = 1e-12
GRID_CAP = 10**7

LOWEST_INDEX = "lowest-index"
SEEDED_RANDOM = "seeded-random"
TIE_RULES = (LOWEST_INDEX, SEEDED_RANDOM)


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class DegenerateInputError(InvalidInputError):
    """Raised for inputs where the quantity is undefined (e.g. a zero-norm map)."""


class GridTooLargeError(RuntimeError):
    """Raised before allocating a simplex grid larger than the configured cap."""


class NumericError(ArithmeticError):
    """Raised when an iterative computation produces non-finite values."""


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; identical seeds give identical streams everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def as_vector(z, name="z") -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise InvalidInputError(f"{name} must be a non-empty 1-D vector, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return z


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return z - np.expand_dims(logsumexp(z, axis=axis), axis)


def softmax(z) -> np.ndarray:
    """Max-shifted softmax. Accepts a vector or a batch of row vectors."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = as_vector(z)
    elif not np.all(np.isfinite(z)):
        raise InvalidInputError("z contains non-finite entries")
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def log_clamped(x, floor: float = LOG_FLOOR):
    """Natural log of max(x, floor)."""
    return np.log(np.maximum(x, floor))


def entropy_nat(d) -> float | np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 ln 0 = 0."""
    d = np.asarray(d, dtype=np.float64)
    terms = np.where(d > 0, d * np.log(np.where(d > 0, d, 1.0)), 0.0)
    h = -np.sum(terms, axis=-1)
    # Rounding can leave -0.0 or -1e-17 for one-hot inputs.
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def argmin_with_ties(v, rule: str = LOWEST_INDEX, rng: np.random.Generator | None = None) -> int:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InvalidInputError("argmin_with_ties needs a non-empty vector")
    if rule == LOWEST_INDEX:
        return int(np.argmin(v))
    if rule == SEEDED_RANDOM:
        if rng is None:
            raise InvalidInputError("seeded-random tie rule requires an rng")
        ties = np.flatnonzero(v <= v.min() + TIE_TOL)
        return int(ties[rng.integers(ties.size)]) if ties.size > 1 else int(ties[0])
    raise InvalidInputError(f"unknown tie rule {rule!r}")


def simplex_grid_size(dim: int, m: int) -> int:
    return math.comb(m + dim - 1, dim - 1)


def simplex_grid(dim: int, mass: float, m: int, cap: int = GRID_CAP) -> np.ndarray:
    """All points (k_1, ..., k_dim) * mass / m with non-negative integer k summing to m.

    Row order follows the lexicographic order of the stars-and-bars bar positions,
    so brute-force argmax ties resolve to the same grid index on every run.
    """
    if dim < 1 or m < 1 or not mass > 0:
        raise InvalidInputError(f"bad simplex grid request dim={dim} mass={mass} m={m}")
    size = simplex_grid_size(dim, m)
    if size > cap:
        raise GridTooLargeError(f"simplex grid dim={dim} m={m} has {size} points (cap {cap})")
    if dim == 1:
        return np.array([[float(mass)]])
    # Stars and bars: choose dim-1 bar positions among m+dim-1 slots.
    bars = np.array(list(combinations(range(m + dim - 1), dim - 1)), dtype=np.int64)
    edges = np.hstack([np.full((size, 1), -1), bars, np.full((size, 1), m + dim - 1)])
    counts = np.diff(edges, axis=1) - 1
    return counts * (mass / m)


def frobenius_dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def frobenius_norm(a) -> float:
    return math.sqrt(frobenius_dot(a, a))
