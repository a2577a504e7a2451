"""Central finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

import numpy as np

from . import losses as L
from .numerics import make_rng
from .trainer import PARAM_NAMES, backward, forward, init_model

LOGIT_TARGETS = ("CE", "LS", "CP", "MaxNTE", "MM")
ALL_TARGETS = LOGIT_TARGETS + ("FRL", "MM_FRL", "MLP")
MLP_KINDS = L.LOSS_KINDS

# Tiny model used for parameter checks.
TINY = dict(input_dim=6, hidden=8, n_classes=4, channels=2, map_hw=(2, 2), batch=4)


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """Numerical gradient of scalar f at x; x is restored afterwards."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """max |a - n| / max(max |a|, max |n|): infinity-norm relative error."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    diff = np.max(np.abs(a - n), initial=0.0)
    return 0.0 if scale == 0.0 else float(diff / scale)


def _nontarget_gap(q, t) -> float:
    """Distance between the two smallest non-target probabilities."""
    o = np.sort(np.delete(q, t))
    return float(o[1] - o[0]) if o.size > 1 else np.inf


def check_logit_loss(kind: str, n_values=(3, 10, 50), trials: int = 100, h: float = 1e-6,
                     seed: int = 0, config: L.LossConfig | None = None):
    """Worst relative error over ``trials`` random (z, t) per n.  Returns (err, used, skipped)."""
    config = (config or L.LossConfig()).replace(loss_kind=kind)
    fn = L.loss_fn(config)
    rng = make_rng(seed)
    worst, used, skipped = 0.0, 0, 0
    for n in n_values:
        done = 0
        while done < trials:
            z = rng.normal(0.0, 2.0, size=n)
            t = int(rng.integers(n))
            if kind == "MM" and _nontarget_gap(np.exp(z - np.logaddexp.reduce(z)), t) < 1e-6:
                skipped += 1
                continue
            res = fn(z, t)
            num = central_difference(lambda: fn(z, t).value, z, h)
            worst = max(worst, relative_error(res.grad_logits, num))
            done += 1
        used += done
    return worst, used, skipped


def check_frl(trials: int = 100, k: int = 4, hw=(3, 3), h: float = 1e-6, seed: int = 0):
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(trials):
        phi = rng.normal(size=(k, *hw))
        res = L.frl_loss(phi)
        num = central_difference(lambda: L.frl_loss(phi).value, phi, h)
        worst = max(worst, relative_error(res.grad_features, num))
    return worst, trials, 0


def check_combined(trials: int = 100, n: int = 10, k: int = 4, hw=(3, 3), h: float = 1e-6, seed: int = 0):
    """Gradient of MM + lambda * FRL with respect to logits and maps jointly."""
    rng = make_rng(seed)
    cfg = L.LossConfig(loss_kind="MM_FRL", frl_k=k)
    worst, done, skipped = 0.0, 0, 0
    while done < trials:
        z = rng.normal(0.0, 2.0, size=n)
        t = int(rng.integers(n))
        if _nontarget_gap(np.exp(z - np.logaddexp.reduce(z)), t) < 1e-6:
            skipped += 1
            continue
        phi = rng.normal(size=(k, *hw))
        res = L.combined_loss(z, t, phi, cfg)
        f = lambda: L.combined_loss(z, t, phi, cfg).value  # noqa: E731
        worst = max(worst,
                    relative_error(res.grad_logits, central_difference(f, z, h)),
                    relative_error(res.grad_features, central_difference(f, phi, h)))
        done += 1
    return worst, done, skipped


def _safe_point(model, x, y, config, margin=1e-3):
    """False when a ReLU pre-activation or an MM argmin is close enough to a kink to flip."""
    logits, _, (_, a1, _, a2, _) = forward(model, x)
    if min(np.min(np.abs(a1)), np.min(np.abs(a2))) < margin:
        return False
    if config.loss_kind in ("MM", "MM_FRL"):
        q = np.exp(logits - np.logaddexp.reduce(logits, axis=1, keepdims=True))
        if min(_nontarget_gap(qi, ti) for qi, ti in zip(q, y)) < margin:
            return False
    return True


def _perturbed_losses(model, x, y, config, name: str, h: float) -> np.ndarray:
    """Batch-mean loss for every +h / -h perturbation of one parameter tensor.

    All 2 * size perturbed models are evaluated in one broadcasted forward pass
    (a leading axis over perturbations), using only loss values.  Returns an
    array of shape (2, size): row 0 for +h, row 1 for -h.
    """
    base = model.params[name]
    size = base.size
    eye = np.eye(size).reshape(size, *base.shape)
    params = {k: v for k, v in model.params.items()}
    stacked = np.concatenate([base + h * eye, base - h * eye])
    params[name] = stacked[:, None, :] if name.startswith("b") else stacked
    a1 = x @ params["W1"] + params["b1"]
    h1 = np.maximum(a1, 0.0)
    a2 = h1 @ params["W2"] + params["b2"]
    h2 = np.maximum(a2, 0.0)
    logits = h2 @ params["W3"] + params["b3"]
    P = 2 * size
    B = x.shape[0]
    logits = np.broadcast_to(logits, (P, B, logits.shape[-1])).reshape(P * B, -1)
    h2 = np.broadcast_to(h2, (P, B, h2.shape[-1])).reshape(P * B, *model.feature_shape)
    phi = L.select_top_k(h2, config.frl_k)[0] if config.uses_frl else None
    values = L.batch_loss(logits, np.tile(y, P), config, phi=phi, on_zero="ignore").values
    return values.reshape(2, size, B).mean(axis=2)


def check_mlp(kind: str, trials: int = 100, h: float = 1e-5, seed: int = 0):
    """Backprop through the tiny MLP against finite differences of the batch-mean loss."""
    rng = make_rng(seed)
    config = L.LossConfig(loss_kind=kind, frl_k=TINY["channels"])
    worst, done, skipped = 0.0, 0, 0
    while done < trials:
        model = init_model(TINY["input_dim"], TINY["n_classes"], TINY["hidden"], TINY["channels"],
                           TINY["map_hw"], seed=int(rng.integers(2**32)))
        for name in PARAM_NAMES:
            if name.startswith("b"):
                model.params[name] = rng.normal(0.0, 0.5, size=model.params[name].shape)
        x = rng.normal(size=(TINY["batch"], TINY["input_dim"]))
        y = rng.integers(TINY["n_classes"], size=TINY["batch"])
        if not _safe_point(model, x, y, config):
            skipped += 1
            continue
        _, grads, _ = backward(model, x, y, config)
        for name in PARAM_NAMES:
            up, down = _perturbed_losses(model, x, y, config, name, h)
            num = ((up - down) / (2.0 * h)).reshape(model.params[name].shape)
            worst = max(worst, relative_error(grads[name], num))
        done += 1
    return worst, done, skipped


def run_grad_checks(targets=ALL_TARGETS, n_values=(3, 10, 50), trials: int = 100, tolerance: float = 1e-5,
                    mlp_tolerance: float = 1e-4, h: float = 1e-6, mlp_h: float = 1e-5, seed: int = 0) -> list[dict]:
    results = []
    for target in targets:
        if target in LOGIT_TARGETS:
            err, used, skipped = check_logit_loss(target, n_values, trials, h, seed)
            rows = [(target, err, used, skipped, tolerance)]
        elif target == "FRL":
            rows = [(target, *check_frl(trials, h=h, seed=seed), tolerance)]
        elif target == "MM_FRL":
            rows = [(target, *check_combined(trials, h=h, seed=seed), tolerance)]
        elif target == "MLP":
            rows = [(f"MLP/{k}", *check_mlp(k, trials, mlp_h, seed), mlp_tolerance) for k in MLP_KINDS]
        else:
            raise ValueError(f"unknown grad-check target {target!r}; choose from {ALL_TARGETS}")
        for name, err, used, skipped, tol in rows:
            results.append({
                "target": name, "max_rel_error": err, "trials": used, "skipped_near_kinks": skipped,
                "tolerance": tol, "passed": bool(err <= tol),
            })
    return results
