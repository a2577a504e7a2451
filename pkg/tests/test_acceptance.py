"""End-to-end acceptance checks, one test per criterion.

Each test prints a PASS/FAIL line (also collected in the terminal summary) and
asserts at the stated tolerance.  Run with ``pytest tests/test_acceptance.py -s``.
"""

import itertools
import json
import math
import time

import numpy as np
from conftest import record_criterion

from cufeat import game as G
from cufeat.cli import main
from cufeat.gradcheck import run_grad_checks
from cufeat.infotheory import ConditionalBatch, entropy_upper_bound, plug_in_mi
from cufeat.losses import LossConfig, ce_loss, frl_loss, mm_loss
from cufeat.numerics import make_rng
from cufeat.trainer import SyntheticSpec, TrainConfig, run_experiment

LN9 = math.log(9)
SPEC = SyntheticSpec()
_runs = {}


def history(kind="MM", seed=0, **loss):
    """Default-spec 60-epoch run, cached so criteria can share runs."""
    key = (kind, seed, tuple(sorted(loss.items())))
    if key not in _runs:
        cfg = TrainConfig(loss=LossConfig(loss_kind=kind, **loss), seed=seed)
        start = time.perf_counter()
        _runs[key] = run_experiment(SyntheticSpec(seed=seed), cfg)
        _runs[key + ("seconds",)] = time.perf_counter() - start
    return _runs[key]


def test_c01_gradients():
    start = time.perf_counter()
    results = run_grad_checks()
    elapsed = time.perf_counter() - start
    worst = {r["target"]: r["max_rel_error"] for r in results}
    ok = all(r["passed"] and r["trials"] >= 100 for r in results) and elapsed < 30
    record_criterion("C1 gradient checks", ok,
                     f"worst logit {max(v for k, v in worst.items() if not k.startswith('MLP')):.2e}, "
                     f"worst MLP {max(v for k, v in worst.items() if k.startswith('MLP')):.2e}, {elapsed:.1f}s")
    assert ok, results


def test_c02_adversary_best_response_oracle():
    start = time.perf_counter()
    margins = []
    for n, p_t in itertools.product((3, 4), (0.7, 0.85)):
        r = G.check_adversary_best_response(G.GameSpec(n, 0, p_t, 0.6), trials=200, m=60, seed=n)
        margins.append(r["min_margin"])
    elapsed = time.perf_counter() - start
    ok = min(margins) >= -1e-9 and elapsed < 60
    record_criterion("C2 adversary best response", ok, f"min margin {min(margins):.2e}, {elapsed:.1f}s")
    assert ok


def test_c03_model_best_response_oracle():
    start = time.perf_counter()
    margins = [G.check_model_best_response(G.GameSpec(4, 0, 0.85, q_t), m=60)["margin"] for q_t in (0.3, 0.6, 0.9)]
    elapsed = time.perf_counter() - start
    ok = min(margins) >= -1e-9 and elapsed < 120
    record_criterion("C3 model best response", ok, f"min margin {min(margins):.2e}, {elapsed:.1f}s")
    assert ok


def test_c04_equilibrium():
    gains, controls, spreads = [], [], []
    for n, p_t, q_t in itertools.product((3, 4, 5), (0.7, 0.85), (0.4, 0.6)):
        spec = G.GameSpec(n, 0, p_t, q_t)
        s_p, s_q = G.equilibrium_strategies(spec)
        rep = G.verify_nash(s_p, s_q, spec, m=60, epsilon=1e-9)
        gains.append(max(rep.max_adversary_gain, rep.max_model_gain) if rep.is_epsilon_nash else math.inf)
        bad = G.perturb_action(s_q.support[0], spec, 1, 0.01)
        controls.append(G.verify_nash(s_p, G.MixedStrategy.pure(bad), spec, m=60, epsilon=1e-9).is_epsilon_nash)
        spreads.append(G.indifference_spread(spec))
    ok = max(gains) <= 1e-9 and not any(controls) and max(spreads) <= 1e-12
    record_criterion("C4 equilibrium", ok, f"max gain {max(gains):.2e}, controls rejected "
                     f"{controls.count(False)}/{len(controls)}, indifference spread {max(spreads):.1e}")
    assert ok


def test_c05_uniform_conditionals_carry_no_information():
    mis = [plug_in_mi(ConditionalBatch(np.full((N, n - 1), 1 / (n - 1)))) for n in (3, 10, 50) for N in (1, 7, 100)]
    bound = entropy_upper_bound(10)
    ok = max(mis) <= 1e-12 and abs(bound - 2.197) <= 1e-3
    record_criterion("C5 information bound", ok, f"max MI {max(mis):.1e}, ln 9 = {bound:.4f}")
    assert ok


def test_c06_mm_at_full_target_mass_is_ce():
    rng = make_rng(6)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 20))
        z = rng.normal(0, 3, n)
        t = int(rng.integers(n))
        a, b = mm_loss(z, t, 1.0), ce_loss(z, t)
        worst = max(worst, abs(a.value - b.value), np.abs(a.grad_logits - b.grad_logits).max())
    ce, mm = history("CE"), history("MM", p_t=1.0)
    drift = max(abs(getattr(x, f) - getattr(y, f)) for x, y in zip(ce, mm)
                for f in ("train_loss", "test_accuracy", "mean_nontarget_entropy", "mean_topk_similarity"))
    ok = worst <= 1e-12 and drift <= 1e-9 and len(ce) == len(mm) == 60
    record_criterion("C6 MM(p_t=1) equals CE", ok, f"loss/grad diff {worst:.1e}, trajectory diff {drift:.1e}")
    assert ok


def test_c07_entropy_behaviour():
    start = time.perf_counter()
    mm, maxnte, ce = history("MM", p_t=0.85), history("MaxNTE", maxnte_lambda=1.0), history("CE")
    sweep = [history("MM", p_t=p)[-1].mean_nontarget_entropy for p in (1.0, 0.95, 0.9, 0.85)]
    elapsed = time.perf_counter() - start
    e_mm, e_max = mm[-1].mean_nontarget_entropy, maxnte[-1].mean_nontarget_entropy
    acc_gap = abs(mm[-1].test_accuracy - ce[-1].test_accuracy)
    checks = {
        "a": e_mm >= 0.95 * LN9,
        "b": e_max < e_mm,
        "c": acc_gap <= 0.02,
        "d": all(x <= y for x, y in zip(sweep, sweep[1:])),
        "ordering": e_mm > e_max > ce[-1].mean_nontarget_entropy,
    }
    ok = all(checks.values()) and elapsed < 600
    record_criterion("C7 entropy behaviour", ok,
                     f"MM {e_mm / LN9:.4f} ln9, MaxNTE {e_max / LN9:.4f} ln9, "
                     f"CE {ce[-1].mean_nontarget_entropy / LN9:.4f} ln9, acc gap {acc_gap:.4f}, "
                     f"sweep {[round(s / LN9, 4) for s in sweep]} ln9, {elapsed:.1f}s")
    assert ok, checks


def test_c08_redundancy_loss():
    k = 10
    dup = frl_loss(np.tile(make_rng(8).random((1, 4, 4)) + 0.1, (k, 1, 1))).value
    pairs = []
    for seed in (0, 1, 2):
        mm = history("MM", seed=seed, p_t=0.85)[-1].mean_topk_similarity
        both = history("MM_FRL", seed=seed, p_t=0.85, frl_lambda=1.0, frl_k=k)[-1].mean_topk_similarity
        pairs.append((mm, both))
    ok = dup == k * (k - 1) / 2 and all(b < a for a, b in pairs)
    record_criterion("C8 redundancy loss", ok, f"duplicated value {dup!r}, (MM, MM+FRL) similarity "
                     f"{[(round(a, 4), round(b, 4)) for a, b in pairs]}")
    assert ok


def test_c09_repeated_play():
    spec = G.GameSpec(10, 0, 0.85, 0.6)
    rng = make_rng(9)
    finals = [G.dynamic_play(spec, rng.normal(0, 2, 10), 2000, 0.5).nontarget_entropy[-1] for _ in range(50)]
    at_star = G.dynamic_play(spec, np.zeros(10), 500, 0.5)
    drift = float(np.abs(np.diff(at_star.q, axis=0)).max())
    ok = min(finals) >= 0.999 * LN9 and drift <= 1e-9
    record_criterion("C9 repeated play", ok, f"min final entropy {min(finals) / LN9:.6f} ln9, drift at q* {drift:.1e}")
    assert ok


def test_c10_determinism_and_exit_codes(tmp_path):
    small = {"data": {"train_per_class": 20, "test_per_class": 10}, "train": {"epochs": 3}}
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(small))
    codes = {}
    for cmd in ("train", "sweep", "game-verify"):
        for rep in ("a", "b"):
            extra = ["--config", str(cfg)] if cmd != "game-verify" else []
            if cmd == "sweep":
                sweep_cfg = tmp_path / "s.json"
                sweep_cfg.write_text(json.dumps({**small, "variants": [
                    {"name": "mm", "loss_kind": "MM"}, {"name": "mmfrl", "loss_kind": "MM_FRL"}]}))
                extra = ["--config", str(sweep_cfg)]
            codes[(cmd, rep)] = main([cmd, "--out", str(tmp_path / cmd / rep), "-q", *extra])
    identical = True
    for cmd in ("train", "sweep", "game-verify"):
        for f in sorted((tmp_path / cmd / "a").rglob("*")):
            if f.is_file():
                twin = tmp_path / cmd / "b" / f.relative_to(tmp_path / cmd / "a")
                identical &= f.read_bytes() == twin.read_bytes()
    grad_cfg = tmp_path / "g.json"
    grad_cfg.write_text(json.dumps({"targets": ["CE", "MM"], "n_values": [3], "trials": 5}))
    bad_grad = main(["grad-check", "--config", str(grad_cfg), "--tolerance", "0", "--out", str(tmp_path / "g"), "-q"])
    game_cfg = tmp_path / "v.json"
    game_cfg.write_text(json.dumps({"inject_perturbation": 0.01}))
    bad_game = main(["game-verify", "--config", str(game_cfg), "--out", str(tmp_path / "v"), "-q"])
    ok = identical and set(codes.values()) == {0} and bad_grad != 0 and bad_game != 0
    record_criterion("C10 determinism and exit codes", ok,
                     f"byte-identical {identical}, injected failure exits grad-check={bad_grad} game-verify={bad_game}")
    assert ok

