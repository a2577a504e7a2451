"""The p-q zero-sum game between a classifier and a label adversary.

The adversary chooses a target vector ``p`` with fixed mass ``p_t`` on the true
class ``t``; the model chooses an output ``q`` with fixed mass ``q_t`` on ``t``.
The adversary is paid the cross entropy ``-sum_i p_i ln q_i`` and the model is
paid its negation.

Closed-form best responses and the mixed equilibrium live next to brute-force
checks that enumerate both action sets on a simplex grid.  Action sets are
realised on the closed simplex, so grid points may carry zero probability; the
payoff then uses a clamped log (ln 1e-300) rather than +inf.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    GRID_CAP,
    GridTooLargeError,
    LOWEST_INDEX,
    TIE_TOL,
    InvalidInputError,
    NumericError,
    argmin_with_ties,
    as_vector,
    entropy_nat,
    log_clamped,
    logsumexp,
    make_rng,
    simplex_grid,
    simplex_grid_size,
)

CHUNK_ROWS = 1 << 16


@dataclass(frozen=True)
class GameSpec:
    n: int
    t: int
    p_t: float
    q_t: float

    def __post_init__(self):
        if self.n <= 2:
            raise InvalidInputError(f"the game needs n > 2 classes, got {self.n}")
        if not 0 <= self.t < self.n:
            raise InvalidInputError(f"target {self.t} out of range for n={self.n}")
        for name in ("p_t", "q_t"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InvalidInputError(f"{name} must lie strictly inside (0, 1), got {v}")

    @property
    def others(self) -> np.ndarray:
        return np.delete(np.arange(self.n), self.t)


@dataclass
class MixedStrategy:
    """Weights over a finite support of pure actions (one action per row)."""

    support: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.support = np.atleast_2d(np.asarray(self.support, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if self.support.shape[0] == 0 or self.weights.size != self.support.shape[0]:
            raise InvalidInputError("support and weights must be non-empty and the same length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise InvalidInputError("mixture weights must be a probability vector")

    @classmethod
    def pure(cls, action) -> "MixedStrategy":
        return cls(np.asarray(action, dtype=np.float64)[None, :], np.ones(1))

    def mean_action(self) -> np.ndarray:
        return self.weights @ self.support


@dataclass
class NashReport:
    is_epsilon_nash: bool
    max_adversary_gain: float
    max_model_gain: float
    epsilon: float
    grid_resolution: int
    equilibrium_payoff: float = 0.0
    adversary_grid_size: int = 0
    model_grid_size: int = 0
    best_adversary_deviation: list = field(default_factory=list)
    best_model_deviation: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def check_action(dist, spec: GameSpec, target_mass: float, name="action") -> np.ndarray:
    d = as_vector(dist, name)
    if d.size != spec.n:
        raise InvalidInputError(f"{name} has length {d.size}, expected {spec.n}")
    if np.any(d < 0) or abs(d.sum() - 1.0) > 1e-12 or abs(d[spec.t] - target_mass) > 1e-12:
        raise InvalidInputError(f"{name} is not in the action set (target mass {target_mass})")
    return d


# ---------------------------------------------------------------------------
# payoffs and closed forms


def payoff(p, q) -> float:
    """Adversary payoff ``-sum p_i ln q_i``; the model receives ``-payoff``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"length mismatch {p.shape} vs {q.shape}")
    return float(-np.sum(p * log_clamped(q)))


def model_payoff(p, q) -> float:
    return -payoff(p, q)


def point_mass_action(spec: GameSpec, k: int) -> np.ndarray:
    """Adversary action putting p_t on the target and 1 - p_t on class k."""
    if k == spec.t or not 0 <= k < spec.n:
        raise InvalidInputError(f"k={k} is not a non-target class")
    p = np.zeros(spec.n)
    p[spec.t] = spec.p_t
    p[k] = 1.0 - spec.p_t
    return p


def adversary_best_response(q, spec: GameSpec, tie_rule=LOWEST_INDEX, rng=None) -> np.ndarray:
    q = check_action(q, spec, spec.q_t, "q")
    others = spec.others
    k = others[argmin_with_ties(q[others], tie_rule, rng)]
    return point_mass_action(spec, int(k))


def model_best_response(spec: GameSpec) -> np.ndarray:
    q = np.full(spec.n, (1.0 - spec.q_t) / (spec.n - 1))
    q[spec.t] = spec.q_t
    return q


def worst_case_payoff(q, spec: GameSpec, tie_rule=LOWEST_INDEX, rng=None) -> float:
    return payoff(adversary_best_response(q, spec, tie_rule, rng), q)


def mixed_payoff(s_p: MixedStrategy, s_q: MixedStrategy) -> float:
    """Expected adversary payoff: sum_a sum_b s_p(a) s_q(b) payoff(a, b)."""
    if s_p.support.shape[1] != s_q.support.shape[1]:
        raise InvalidInputError("strategies act on different numbers of classes")
    table = -s_p.support @ log_clamped(s_q.support).T
    return float(s_p.weights @ table @ s_q.weights)


def equilibrium_strategies(spec: GameSpec) -> tuple[MixedStrategy, MixedStrategy]:
    """Adversary uniform over the n-1 point-mass actions; model plays q* purely."""
    support = np.array([point_mass_action(spec, int(k)) for k in spec.others])
    s_p = MixedStrategy(support, np.full(spec.n - 1, 1.0 / (spec.n - 1)))
    return s_p, MixedStrategy.pure(model_best_response(spec))


# ---------------------------------------------------------------------------
# brute-force oracles over the simplex grid


def action_grid(spec: GameSpec, target_mass: float, m: int, cap: int = GRID_CAP) -> np.ndarray:
    """Every grid action with ``target_mass`` fixed at t and the rest on a resolution-m simplex."""
    rest = simplex_grid(spec.n - 1, 1.0 - target_mass, m, cap)
    grid = np.empty((rest.shape[0], spec.n))
    grid[:, spec.others] = rest
    grid[:, spec.t] = target_mass
    return grid


def _chunked_extreme(grid, weights, sign):
    """max over rows of sign * (grid @ weights), first maximiser on ties, fixed chunk order."""
    best, best_i = -np.inf, -1
    for start in range(0, grid.shape[0], CHUNK_ROWS):
        vals = sign * (grid[start:start + CHUNK_ROWS] @ weights)
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, best_i = float(vals[i]), start + i
    return sign * best, best_i


def grid_best_response_payoff(q, spec: GameSpec, m: int):
    """Max adversary payoff against q over the p-grid; returns (value, argmax p)."""
    grid = action_grid(spec, spec.p_t, m)
    value, i = _chunked_extreme(grid, -log_clamped(np.asarray(q, dtype=np.float64)), 1.0)
    return value, grid[i]


def grid_worst_case_table(spec: GameSpec, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Worst-case payoff of every grid q, each found by enumerating every grid p.

    Returns (q grid, worst-case payoffs).  Nothing here uses the closed-form
    best response.
    """
    p_grid = action_grid(spec, spec.p_t, m)
    q_grid = action_grid(spec, spec.q_t, m)
    worst = np.empty(q_grid.shape[0])
    for start in range(0, q_grid.shape[0], CHUNK_ROWS // 16):
        block = -log_clamped(q_grid[start:start + CHUNK_ROWS // 16])
        worst[start:start + block.shape[0]] = np.max(block @ p_grid.T, axis=1)
    return q_grid, worst


def verify_nash(s_p: MixedStrategy, s_q: MixedStrategy, spec: GameSpec, m: int = 60,
                epsilon: float = 1e-9, cap: int = GRID_CAP) -> NashReport:
    """Search every pure grid deviation of each player against the other's mixture.

    A pure deviation is enough: the payoff is linear in a player's own mixture.
    """
    for name, s, mass in (("adversary", s_p, spec.p_t), ("model", s_q, spec.q_t)):
        for row in s.support:
            check_action(row, spec, mass, f"{name} support action")
    size = simplex_grid_size(spec.n - 1, m)
    if size > cap:
        raise GridTooLargeError(f"deviation grid has {size} points (cap {cap})")

    value = mixed_payoff(s_p, s_q)
    # Adversary deviation p against the model mixture: p . E_q[-ln q].
    p_grid = action_grid(spec, spec.p_t, m, cap)
    adv_best, ai = _chunked_extreme(p_grid, s_q.weights @ -log_clamped(s_q.support), 1.0)
    # Model deviation q against the adversary mixture: minimise E_p[p] . (-ln q).
    q_grid = action_grid(spec, spec.q_t, m, cap)
    p_bar = s_p.mean_action()
    best_loss, best_i = np.inf, -1
    for start in range(0, q_grid.shape[0], CHUNK_ROWS):
        vals = -log_clamped(q_grid[start:start + CHUNK_ROWS]) @ p_bar
        i = int(np.argmin(vals))
        if vals[i] < best_loss:
            best_loss, best_i = float(vals[i]), start + i

    adv_gain = adv_best - value
    model_gain = value - best_loss
    return NashReport(
        is_epsilon_nash=bool(adv_gain <= epsilon and model_gain <= epsilon),
        max_adversary_gain=float(adv_gain),
        max_model_gain=float(model_gain),
        epsilon=epsilon,
        grid_resolution=m,
        equilibrium_payoff=value,
        adversary_grid_size=int(p_grid.shape[0]),
        model_grid_size=int(q_grid.shape[0]),
        best_adversary_deviation=p_grid[ai].tolist(),
        best_model_deviation=q_grid[best_i].tolist(),
    )


def random_model_actions(spec: GameSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Model actions with Dirichlet(1) non-target mass, all strictly positive."""
    rest = rng.dirichlet(np.ones(spec.n - 1), size=count) * (1.0 - spec.q_t)
    q = np.empty((count, spec.n))
    q[:, spec.others] = rest
    q[:, spec.t] = spec.q_t
    return q


def perturb_action(q, spec: GameSpec, index: int, delta: float) -> np.ndarray:
    """Shift one non-target entry by delta, then rescale the non-targets back to 1 - q_t."""
    q = np.array(q, dtype=np.float64)
    q[index] += delta
    others = spec.others
    q[others] *= (1.0 - spec.q_t) / q[others].sum()
    return q


def check_adversary_best_response(spec: GameSpec, trials: int = 200, m: int = 60, seed: int = 0,
                                  tol: float = 1e-9) -> dict:
    """Closed-form p* against the grid maximum for ``trials`` random q."""
    rng = make_rng(seed)
    margins = []
    for q in random_model_actions(spec, trials, rng):
        closed = payoff(adversary_best_response(q, spec), q)
        grid_max, _ = grid_best_response_payoff(q, spec, m)
        margins.append(closed - grid_max)
    worst = float(min(margins))
    return {
        "check": "adversary_best_response",
        "n": spec.n, "p_t": spec.p_t, "q_t": spec.q_t, "grid_m": m, "trials": trials,
        "grid_size": simplex_grid_size(spec.n - 1, m),
        "min_margin": worst, "tolerance": tol, "passed": bool(worst >= -tol),
    }


def check_model_best_response(spec: GameSpec, m: int = 60, tol: float = 1e-9) -> dict:
    """Worst-case payoff at q* against the brute-force worst case of every grid q."""
    at_star = worst_case_payoff(model_best_response(spec), spec)
    q_grid, worst = grid_worst_case_table(spec, m)
    i = int(np.argmin(worst))
    margin = float(worst[i] - at_star)
    return {
        "check": "model_best_response",
        "n": spec.n, "p_t": spec.p_t, "q_t": spec.q_t, "grid_m": m,
        "grid_size": int(q_grid.shape[0]),
        "worst_case_at_q_star": at_star, "grid_min_worst_case": float(worst[i]),
        "grid_minimizer": q_grid[i].tolist(),
        "margin": margin, "tolerance": tol, "passed": bool(margin >= -tol),
    }


def indifference_spread(spec: GameSpec) -> float:
    """Max minus min payoff of the adversary's equilibrium support actions against q*."""
    s_p, s_q = equilibrium_strategies(spec)
    q = s_q.support[0]
    vals = [payoff(p, q) for p in s_p.support]
    return float(max(vals) - min(vals))


# ---------------------------------------------------------------------------
# repeated play


@dataclass
class Trajectory:
    q: np.ndarray
    worst_case: np.ndarray
    nontarget_entropy: np.ndarray

    def to_rows(self) -> list[dict]:
        return [
            {"round": r, "worst_case_payoff": float(w), "nontarget_entropy": float(h)}
            for r, (w, h) in enumerate(zip(self.worst_case, self.nontarget_entropy))
        ]


def _pinned(z, spec: GameSpec):
    """Reset z_t so softmax(z)_t == q_t; return (z, q) with q built from the non-target softmax."""
    others = spec.others
    lse = logsumexp(z[others])
    z = z.copy()
    z[spec.t] = np.log(spec.q_t / (1.0 - spec.q_t)) + lse
    q = np.empty(spec.n)
    q[others] = (1.0 - spec.q_t) * np.exp(z[others] - lse)
    q[spec.t] = spec.q_t
    return z, q


def dynamic_play(spec: GameSpec, z0, rounds: int, step: float) -> Trajectory:
    """Alternate adversary best responses with model gradient steps on the logits.

    Each round the adversary spreads 1 - p_t uniformly over every non-target class
    tied (within 1e-12) for the smallest probability, the mixed response used at
    the equilibrium.  The model then steps ``z -= step * (q - E[p])``, the logit
    gradient of the cross entropy, and z_t is reset to keep q_t fixed.
    """
    if rounds < 1 or not step > 0:
        raise InvalidInputError("rounds must be >= 1 and step > 0")
    z = as_vector(z0, "z0")
    if z.size != spec.n:
        raise InvalidInputError(f"initial logits have length {z.size}, expected {spec.n}")
    others = spec.others
    z, q = _pinned(z, spec)
    qs, wc, ent = [q], [], []
    for r in range(rounds + 1):
        qo = q[others]
        wc.append(-spec.p_t * np.log(spec.q_t) - (1.0 - spec.p_t) * np.log(qo.min()))
        ent.append(entropy_nat(qo / qo.sum()))
        if r == rounds:
            break
        ties = others[qo <= qo.min() + TIE_TOL]
        p_bar = np.zeros(spec.n)
        p_bar[spec.t] = spec.p_t
        p_bar[ties] = (1.0 - spec.p_t) / ties.size
        z, q = _pinned(z - step * (q - p_bar), spec)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"dynamic play diverged at round {r + 1}")
        qs.append(q)
    return Trajectory(np.array(qs), np.array(wc), np.array(ent))
