"""Classification losses with analytic gradients.

Every loss has a batch kernel operating on a ``(B, n)`` logit matrix and returning
per-sample values plus per-sample gradients.  The single-sample functions
(``ce_loss``, ``mm_loss``, ...) validate their inputs and wrap those kernels.
Batch reductions are plain means in index order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    LOWEST_INDEX,
    SEEDED_RANDOM,
    TIE_RULES,
    TIE_TOL,
    DegenerateInputError,
    InvalidInputError,
    as_vector,
    log_softmax,
)

CE, LS, CP, MAXNTE, MM, MM_FRL = "CE", "LS", "CP", "MaxNTE", "MM", "MM_FRL"
LOSS_KINDS = (CE, LS, CP, MAXNTE, MM, MM_FRL)


@dataclass(frozen=True)
class LossConfig:
    loss_kind: str = MM
    p_t: float = 0.85
    ls_epsilon: float = 0.10
    cp_weight: float = 1.00
    maxnte_lambda: float = 1.0
    frl_lambda: float = 1.0
    frl_k: int = 10
    tie_rule: str = LOWEST_INDEX

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidInputError(f"unknown loss_kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if not 0.0 < self.p_t <= 1.0:
            raise InvalidInputError(f"p_t must lie in (0, 1], got {self.p_t}")
        if not 0.0 <= self.ls_epsilon < 1.0:
            raise InvalidInputError(f"ls_epsilon must lie in [0, 1), got {self.ls_epsilon}")
        if self.cp_weight < 0 or self.maxnte_lambda < 0 or self.frl_lambda < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if int(self.frl_k) != self.frl_k or self.frl_k < 2:
            raise InvalidInputError(f"frl_k must be an integer >= 2, got {self.frl_k}")
        if self.tie_rule not in TIE_RULES:
            raise InvalidInputError(f"unknown tie_rule {self.tie_rule!r}")

    @property
    def uses_frl(self) -> bool:
        return self.loss_kind == MM_FRL

    def replace(self, **changes) -> "LossConfig":
        return replace(self, **changes)


@dataclass
class LossResult:
    """Scalar loss in nats with its gradient.

    ``grad_features`` is only set by losses involving feature maps, ``chosen_k``
    only by the minimax loss.
    """

    value: float
    grad_logits: np.ndarray
    grad_features: np.ndarray | None = None
    chosen_k: int | None = None


@dataclass
class BatchLoss:
    """Per-sample values and gradients for a batch.

    ``value`` is the batch mean; the gradients are per-sample gradients of each
    sample's own loss, i.e. divide by B to get the gradient of the mean.
    """

    values: np.ndarray
    grad_logits: np.ndarray
    grad_features: np.ndarray | None = None
    chosen_k: np.ndarray | None = None
    frl_values: np.ndarray | None = None

    @property
    def value(self) -> float:
        return float(np.mean(self.values))


# ---------------------------------------------------------------------------
# batch kernels


def _check_batch(Z, T):
    Z = np.asarray(Z, dtype=np.float64)
    T = np.asarray(T, dtype=np.int64)
    if Z.ndim != 2 or T.shape != (Z.shape[0],):
        raise InvalidInputError(f"expected logits (B, n) and targets (B,), got {Z.shape} and {T.shape}")
    n = Z.shape[1]
    if n < 2:
        raise InvalidInputError("need at least two classes")
    if np.any(T < 0) or np.any(T >= n):
        raise InvalidInputError(f"target index out of range for n={n}")
    if not np.all(np.isfinite(Z)):
        raise InvalidInputError("logits contain non-finite entries")
    return Z, T


def _onehot(T, n):
    out = np.zeros((T.size, n))
    out[np.arange(T.size), T] = 1.0
    return out


def _soft_target_ce(lq, P):
    q = np.exp(lq)
    return -np.sum(P * lq, axis=1), q - P


def ce_batch(Z, T) -> BatchLoss:
    Z, T = _check_batch(Z, T)
    values, grad = _soft_target_ce(log_softmax(Z), _onehot(T, Z.shape[1]))
    return BatchLoss(values, grad)


def ls_batch(Z, T, epsilon: float) -> BatchLoss:
    Z, T = _check_batch(Z, T)
    n = Z.shape[1]
    P = np.full(Z.shape, epsilon / (n - 1))
    P[np.arange(T.size), T] = 1.0 - epsilon
    values, grad = _soft_target_ce(log_softmax(Z), P)
    return BatchLoss(values, grad)


def cp_batch(Z, T, beta: float) -> BatchLoss:
    Z, T = _check_batch(Z, T)
    lq = log_softmax(Z)
    values, grad = _soft_target_ce(lq, _onehot(T, Z.shape[1]))
    q = np.exp(lq)
    h = -np.sum(q * lq, axis=1)
    # dH/dz_j = -q_j (ln q_j + H)
    values = values - beta * h
    grad = grad + beta * q * (lq + h[:, None])
    return BatchLoss(values, grad)


def maxnte_batch(Z, T, lam: float) -> BatchLoss:
    Z, T = _check_batch(Z, T)
    B, n = Z.shape
    if n < 3:
        raise InvalidInputError("MaxNTE needs n >= 3 classes")
    values, grad = _soft_target_ce(log_softmax(Z), _onehot(T, n))
    keep = np.ones((B, n), dtype=bool)
    keep[np.arange(B), T] = False
    zn = Z[keep].reshape(B, n - 1)
    ls = log_softmax(zn)
    s = np.exp(ls)
    h = -np.sum(s * ls, axis=1)
    grad_nt = np.zeros((B, n))
    grad_nt[keep] = (lam * s * (ls + h[:, None])).ravel()
    return BatchLoss(values - lam * h, grad + grad_nt)


def select_min_nontarget(Q, T, tie_rule=LOWEST_INDEX, rng=None) -> np.ndarray:
    """Row-wise index of the smallest non-target probability."""
    Qm = np.array(Q, dtype=np.float64)
    Qm[np.arange(T.size), T] = np.inf
    if tie_rule == LOWEST_INDEX:
        return np.argmin(Qm, axis=1)
    if tie_rule != SEEDED_RANDOM:
        raise InvalidInputError(f"unknown tie rule {tie_rule!r}")
    if rng is None:
        raise InvalidInputError("seeded-random tie rule requires an rng")
    ks = np.empty(T.size, dtype=np.int64)
    mins = Qm.min(axis=1)
    for b in range(T.size):
        ties = np.flatnonzero(Qm[b] <= mins[b] + TIE_TOL)
        ks[b] = ties[rng.integers(ties.size)] if ties.size > 1 else ties[0]
    return ks


def mm_batch(Z, T, p_t: float, tie_rule=LOWEST_INDEX, rng=None) -> BatchLoss:
    """Minimax loss: soft target p_t at the label, 1 - p_t at the least likely other class.

    The argmin index is a selection, not differentiated through.
    """
    Z, T = _check_batch(Z, T)
    if not 0.0 < p_t <= 1.0:
        raise InvalidInputError(f"p_t must lie in (0, 1], got {p_t}")
    lq = log_softmax(Z)
    q = np.exp(lq)
    k = select_min_nontarget(q, T, tie_rule, rng)
    rows = np.arange(T.size)
    P = np.zeros(Z.shape)
    P[rows, k] = 1.0 - p_t
    P[rows, T] = p_t
    values = -p_t * lq[rows, T] - (1.0 - p_t) * lq[rows, k]
    return BatchLoss(values, q - P, chosen_k=k)


def frl_batch(phi, on_zero: str = "raise") -> BatchLoss:
    """Sum of pairwise cosine similarities of K feature maps, per sample.

    ``phi`` has shape (B, K, H, W).  With ``on_zero="ignore"`` a zero-norm map
    contributes nothing to the value and receives no gradient.
    """
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 4 or phi.shape[1] < 2:
        raise InvalidInputError(f"expected feature stacks (B, K>=2, H, W), got {phi.shape}")
    if not np.all(np.isfinite(phi)):
        raise InvalidInputError("feature maps contain non-finite entries")
    B, K = phi.shape[:2]
    flat = phi.reshape(B, K, -1)
    norms = np.sqrt(np.einsum("bkd,bkd->bk", flat, flat))
    zero = norms == 0.0
    if np.any(zero) and on_zero == "raise":
        raise DegenerateInputError("feature map with zero norm: cosine similarity undefined")
    safe = np.where(zero, 1.0, norms)
    unit = flat / safe[:, :, None]
    unit[zero] = 0.0
    S = np.einsum("bid,bjd->bij", unit, unit)
    diag = np.einsum("bii->bi", S)
    # Value from the raw Gram matrix: sqrt(g * g) == g in floating point, so
    # identical maps give a cosine of exactly 1.
    gram = np.einsum("bid,bjd->bij", flat, flat)
    g = np.einsum("bii->bi", gram)
    cos = gram / np.sqrt(np.where(zero, 1.0, g)[:, :, None] * np.where(zero, 1.0, g)[:, None, :])
    cos[zero] = 0.0
    cos.transpose(0, 2, 1)[zero] = 0.0
    values = np.triu(cos, k=1).sum(axis=(1, 2))
    others = unit.sum(axis=1, keepdims=True) - unit
    s_others = S.sum(axis=2) - diag
    grad = (others - s_others[:, :, None] * unit) / safe[:, :, None]
    grad[zero] = 0.0
    return BatchLoss(values, np.zeros((B, 0)), grad_features=grad.reshape(phi.shape), frl_values=values)


def batch_loss(Z, T, config: LossConfig, phi=None, rng=None, on_zero: str = "raise") -> BatchLoss:
    """Dispatch on ``config.loss_kind``; ``phi`` (already top-K selected) is needed for MM_FRL."""
    kind = config.loss_kind
    if kind == CE:
        return ce_batch(Z, T)
    if kind == LS:
        return ls_batch(Z, T, config.ls_epsilon)
    if kind == CP:
        return cp_batch(Z, T, config.cp_weight)
    if kind == MAXNTE:
        return maxnte_batch(Z, T, config.maxnte_lambda)
    mm = mm_batch(Z, T, config.p_t, config.tie_rule, rng)
    if kind == MM:
        return mm
    if phi is None:
        raise InvalidInputError("MM_FRL needs feature maps")
    frl = frl_batch(phi, on_zero=on_zero)
    lam = config.frl_lambda
    return BatchLoss(
        mm.values + lam * frl.values,
        mm.grad_logits,
        grad_features=lam * frl.grad_features,
        chosen_k=mm.chosen_k,
        frl_values=frl.values,
    )


# ---------------------------------------------------------------------------
# single-sample API


def _one(z, t):
    z = as_vector(z)
    if z.size < 2:
        raise InvalidInputError("need at least two classes")
    if int(t) != t or not 0 <= t < z.size:
        raise InvalidInputError(f"target {t} out of range for n={z.size}")
    return z[None, :], np.array([int(t)])


def _result(b: BatchLoss) -> LossResult:
    k = None if b.chosen_k is None else int(b.chosen_k[0])
    gf = None if b.grad_features is None else b.grad_features[0]
    return LossResult(float(b.values[0]), b.grad_logits[0], gf, k)


def ce_loss(z, t) -> LossResult:
    return _result(ce_batch(*_one(z, t)))


def ls_loss(z, t, epsilon: float = 0.10) -> LossResult:
    if not 0.0 <= epsilon < 1.0:
        raise InvalidInputError(f"epsilon must lie in [0, 1), got {epsilon}")
    return _result(ls_batch(*_one(z, t), epsilon))


def cp_loss(z, t, beta: float = 1.00) -> LossResult:
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    return _result(cp_batch(*_one(z, t), beta))


def maxnte_loss(z, t, lam: float = 1.0) -> LossResult:
    if lam < 0:
        raise InvalidInputError("lambda must be non-negative")
    return _result(maxnte_batch(*_one(z, t), lam))


def mm_loss(z, t, p_t: float = 0.85, tie_rule: str = LOWEST_INDEX, rng=None) -> LossResult:
    return _result(mm_batch(*_one(z, t), p_t, tie_rule, rng))


def frl_loss(phi) -> LossResult:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 3:
        raise InvalidInputError(f"expected a (K, H, W) feature stack, got {phi.shape}")
    b = frl_batch(phi[None])
    return LossResult(float(b.values[0]), np.zeros(0), grad_features=b.grad_features[0])


def select_top_k(channels, k: int):
    """Keep the K channels with the largest spatial mean activation.

    Works on a single (C, H, W) stack or a batch (B, C, H, W).  Returns the
    selected maps, ordered by mean descending (ties: lower channel index first),
    and their channel indices.
    """
    x = np.asarray(channels, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise InvalidInputError(f"expected (C, H, W) or (B, C, H, W), got {np.shape(channels)}")
    if k < 1 or x.shape[1] < k:
        raise InvalidInputError(f"cannot select top {k} of {x.shape[1]} channels")
    means = x.mean(axis=(2, 3))
    idx = np.argsort(-means, axis=1, kind="stable")[:, :k]
    sel = np.take_along_axis(x, idx[:, :, None, None], axis=1)
    return (sel[0], idx[0]) if single else (sel, idx)


def combined_loss(z, t, phi, config: LossConfig, rng=None) -> LossResult:
    """MM on the logits plus ``frl_lambda`` times FRL on the (already selected) maps."""
    mm = mm_loss(z, t, config.p_t, config.tie_rule, rng)
    frl = frl_loss(phi)
    return LossResult(
        mm.value + config.frl_lambda * frl.value,
        mm.grad_logits,
        grad_features=config.frl_lambda * frl.grad_features,
        chosen_k=mm.chosen_k,
    )


def loss_fn(config: LossConfig):
    """Single-sample loss ``f(z, t, rng=None)`` for the logit-only kinds."""
    kind = config.loss_kind
    if kind == CE:
        return lambda z, t, rng=None: ce_loss(z, t)
    if kind == LS:
        return lambda z, t, rng=None: ls_loss(z, t, config.ls_epsilon)
    if kind == CP:
        return lambda z, t, rng=None: cp_loss(z, t, config.cp_weight)
    if kind == MAXNTE:
        return lambda z, t, rng=None: maxnte_loss(z, t, config.maxnte_lambda)
    if kind in (MM, MM_FRL):
        return lambda z, t, rng=None: mm_loss(z, t, config.p_t, config.tie_rule, rng)
    raise InvalidInputError(kind)
