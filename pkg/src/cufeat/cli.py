"""Command-line entry point: ``cufeat {grad-check,game-verify,train,sweep}``.

Each command merges built-in defaults, an optional JSON config (``--config``) and
flag overrides, in that order of precedence, writes the merged result to
``resolved_config.json`` in the output directory, and then writes its reports
there.  Unknown config keys are rejected.  Exit status is 0 only when every
requested check or run succeeded.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .game import (
    GameSpec,
    MixedStrategy,
    check_adversary_best_response,
    check_model_best_response,
    equilibrium_strategies,
    indifference_spread,
    perturb_action,
    verify_nash,
)
from .gradcheck import ALL_TARGETS, run_grad_checks
from .losses import LossConfig
from .numerics import GridTooLargeError, InvalidInputError
from .trainer import CSV_FIELDS, SyntheticSpec, TrainConfig, TrainingError, run_experiment

SCHEMA_VERSION = 1
log = logging.getLogger("cufeat")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _dataclass_defaults(cls, drop=()) -> dict:
    d = asdict(cls())
    for k in drop:
        d.pop(k, None)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def default_config(command: str) -> dict:
    if command == "grad-check":
        return {
            "seed": 0, "targets": list(ALL_TARGETS), "n_values": [3, 10, 50], "trials": 100,
            "tolerance": 1e-5, "mlp_tolerance": 1e-4, "h": 1e-6, "mlp_h": 1e-5,
        }
    if command == "game-verify":
        return {
            "seed": 0, "n": 4, "t": 0, "p_t": 0.85, "q_t": 0.6, "grid_m": 60, "epsilon": 1e-9,
            "trials": 200, "margin_tolerance": 1e-9, "negative_control_delta": 0.01,
            "inject_perturbation": 0.0,
        }
    base = {
        "seed": 0,
        "record_wall_time": False,
        "data": _dataclass_defaults(SyntheticSpec, drop=("seed",)),
        "train": _dataclass_defaults(TrainConfig, drop=("loss", "seed")),
        "loss": _dataclass_defaults(LossConfig),
    }
    if command == "train":
        return base
    if command == "sweep":
        base["seeds"] = [0]
        base["variants"] = default_variants()
        return base
    raise ConfigError(f"unknown command {command!r}")


def default_variants() -> list[dict]:
    """The MM x FRL ablation grid plus p_t and MaxNTE lambda sweeps."""
    variants = []
    for mm_on in (False, True):
        for frl_on in (False, True):
            variants.append({
                "name": f"ablation_mm{'on' if mm_on else 'off'}_frl{'on' if frl_on else 'off'}",
                "loss_kind": "MM_FRL", "p_t": 0.85 if mm_on else 1.0, "frl_lambda": 1.0 if frl_on else 0.0,
            })
    for r in (0.0, 0.05, 0.1, 0.15, 0.3, 0.5):
        variants.append({"name": f"mm_residual_{r:g}", "loss_kind": "MM", "p_t": round(1.0 - r, 10)})
    for lam in (0.0, 0.05, 0.1, 0.15, 0.3, 0.5):
        variants.append({"name": f"maxnte_lambda_{lam:g}", "loss_kind": "MaxNTE", "maxnte_lambda": lam})
    return variants


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Recursively overlay ``override`` onto ``base``; unknown keys raise ConfigError."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge_config(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _flag_overrides(command: str, args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if command in ("train", "sweep"):
        loss = {}
        if getattr(args, "loss", None) is not None:
            loss["loss_kind"] = args.loss
        if getattr(args, "p_t", None) is not None:
            loss["p_t"] = args.p_t
        if getattr(args, "frl_lambda", None) is not None:
            loss["frl_lambda"] = args.frl_lambda
        if loss:
            o["loss"] = loss
        if getattr(args, "epochs", None) is not None:
            o["train"] = {"epochs": args.epochs}
    if command == "game-verify":
        for key in ("n", "p_t", "q_t", "grid_m", "epsilon"):
            value = getattr(args, key, None)
            if value is not None:
                o[key] = value
    if command == "grad-check":
        if getattr(args, "tolerance", None) is not None:
            o["tolerance"] = args.tolerance
        if getattr(args, "trials", None) is not None:
            o["trials"] = args.trials
    return o


def resolve_config(command: str, args) -> dict:
    cfg = default_config(command)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge_config(cfg, from_file)
    return merge_config(cfg, _flag_overrides(command, args))


def _build(cls, values: dict, **extra):
    names = {f.name for f in fields(cls)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items() if k in names}
    kwargs.update(extra)
    return cls(**kwargs)


def experiment_objects(cfg: dict, seed: int, loss_overrides: dict | None = None):
    """(SyntheticSpec, TrainConfig) for one run; ``seed`` drives both data and training."""
    loss_values = dict(cfg["loss"])
    loss_values.update(loss_overrides or {})
    loss = _build(LossConfig, loss_values)
    spec = _build(SyntheticSpec, cfg["data"], seed=seed)
    train = _build(TrainConfig, cfg["train"], loss=loss, seed=seed)
    return spec, train


# ---------------------------------------------------------------------------
# output helpers


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def metrics_rows(history):
    return [[getattr(r, f) for f in CSV_FIELDS] for r in history]


# ---------------------------------------------------------------------------
# commands


def cmd_grad_check(cfg: dict, out: Path) -> int:
    results = run_grad_checks(
        targets=cfg["targets"], n_values=tuple(cfg["n_values"]), trials=cfg["trials"],
        tolerance=cfg["tolerance"], mlp_tolerance=cfg["mlp_tolerance"], h=cfg["h"],
        mlp_h=cfg["mlp_h"], seed=cfg["seed"],
    )
    passed = all(r["passed"] for r in results)
    for r in results:
        log.info("%-12s max rel err %.3e  %s", r["target"], r["max_rel_error"], "ok" if r["passed"] else "FAIL")
    write_json(out / "grad_check.json", {"schema_version": SCHEMA_VERSION, "passed": passed, "results": results})
    return 0 if passed else 1


def cmd_game_verify(cfg: dict, out: Path) -> int:
    spec = GameSpec(cfg["n"], cfg["t"], cfg["p_t"], cfg["q_t"])
    m, eps, tol = cfg["grid_m"], cfg["epsilon"], cfg["margin_tolerance"]
    adversary = check_adversary_best_response(spec, cfg["trials"], m, cfg["seed"], tol)
    model = check_model_best_response(spec, m, tol)

    s_p, s_q = equilibrium_strategies(spec)
    if cfg["inject_perturbation"]:
        k = int(spec.others[0])
        s_q = MixedStrategy.pure(perturb_action(s_q.support[0], spec, k, cfg["inject_perturbation"]))
    nash = verify_nash(s_p, s_q, spec, m, eps)
    spread = indifference_spread(spec)

    q_star = equilibrium_strategies(spec)[1].support[0]
    bad_q = perturb_action(q_star, spec, int(spec.others[0]), cfg["negative_control_delta"])
    control = verify_nash(s_p, MixedStrategy.pure(bad_q), spec, m, eps)

    checks = {
        "adversary_best_response": adversary,
        "model_best_response": model,
        "equilibrium": {**nash.to_dict(), "passed": nash.is_epsilon_nash},
        "indifference": {"payoff_spread": spread, "tolerance": 1e-12, "passed": bool(spread <= 1e-12)},
        "negative_control": {
            **control.to_dict(), "delta": cfg["negative_control_delta"],
            "passed": not control.is_epsilon_nash,
        },
    }
    passed = all(c["passed"] for c in checks.values())
    for name, c in checks.items():
        log.info("%-24s %s", name, "ok" if c["passed"] else "FAIL")
    write_json(out / "game_verify.json", {
        "schema_version": SCHEMA_VERSION, "passed": passed, "spec": asdict(spec), "checks": checks,
    })
    return 0 if passed else 1


def _progress(rec):
    log.info("epoch %3d loss %.4f acc %.4f entropy %.4f sim %.4f", rec.epoch, rec.train_loss,
             rec.test_accuracy, rec.mean_nontarget_entropy, rec.mean_topk_similarity)


def cmd_train(cfg: dict, out: Path) -> int:
    spec, train = experiment_objects(cfg, cfg["seed"])
    history = run_experiment(spec, train, cfg["record_wall_time"], progress=_progress)
    write_csv(out / "metrics.csv", CSV_FIELDS, metrics_rows(history))
    write_json(out / "summary.json", {
        "schema_version": SCHEMA_VERSION,
        "final": asdict(history[-1]),
        "epochs": len(history),
        "config": cfg,
    })
    return 0


SWEEP_FIELDS = ("variant", "seed", "loss_kind", "p_t", "maxnte_lambda", "frl_lambda", "status") + CSV_FIELDS


def cmd_sweep(cfg: dict, out: Path) -> int:
    (out / "runs").mkdir(exist_ok=True)
    loss_keys = {f.name for f in fields(LossConfig)}
    rows, failures = [], 0
    for variant in cfg["variants"]:
        variant = dict(variant)
        name = variant.pop("name", None)
        if not name:
            raise ConfigError("every sweep variant needs a name")
        unknown = set(variant) - loss_keys
        if unknown:
            raise ConfigError(f"unknown keys in variant {name!r}: {sorted(unknown)}")
        for seed in cfg["seeds"]:
            lc = {**cfg["loss"], **variant}
            head = [name, seed, lc["loss_kind"], lc["p_t"], lc["maxnte_lambda"], lc["frl_lambda"]]
            log.info("variant %s seed %d", name, seed)
            try:
                spec, train = experiment_objects(cfg, seed, variant)
                history = run_experiment(spec, train, cfg["record_wall_time"])
            except (TrainingError, InvalidInputError, ArithmeticError) as exc:
                failures += 1
                log.error("variant %s seed %d aborted: %s", name, seed, exc)
                rows.append(head + [f"failed: {exc}"] + [""] * len(CSV_FIELDS))
                continue
            write_csv(out / "runs" / f"{name}_seed{seed}.csv", CSV_FIELDS, metrics_rows(history))
            rows.append(head + ["ok"] + metrics_rows(history[-1:])[0])
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    write_json(out / "summary.json", {
        "schema_version": SCHEMA_VERSION, "runs": len(rows), "failed": failures, "config": cfg,
    })
    return 0 if failures == 0 else 1


COMMANDS = {
    "grad-check": cmd_grad_check,
    "game-verify": cmd_game_verify,
    "train": cmd_train,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cufeat", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("-q", "--quiet", action="store_true")
        if name in ("train", "sweep"):
            p.add_argument("--loss", choices=["CE", "LS", "CP", "MaxNTE", "MM", "MM_FRL"])
            p.add_argument("--p-t", dest="p_t", type=float)
            p.add_argument("--frl-lambda", dest="frl_lambda", type=float)
            p.add_argument("--epochs", type=int)
        if name == "game-verify":
            p.add_argument("--n", type=int)
            p.add_argument("--p-t", dest="p_t", type=float)
            p.add_argument("--q-t", dest="q_t", type=float)
            p.add_argument("--grid-m", dest="grid_m", type=int)
            p.add_argument("--epsilon", type=float)
        if name == "grad-check":
            p.add_argument("--tolerance", type=float)
            p.add_argument("--trials", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "resolved_config.json", {"command": args.command, **cfg})
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, InvalidInputError) as exc:
        log.error("%s", exc)
        return 2
    except GridTooLargeError as exc:
        log.error("resource limit: %s", exc)
        return 3
    except TrainingError as exc:
        log.error("training aborted: %s", exc)
        return 4
    except OSError as exc:
        log.error("I/O error on %s: %s", getattr(exc, "filename", "?"), exc)
        return 5


if __name__ == "__main__":
    sys.exit(main())
