import csv
import json

import pytest

from cufeat.cli import ConfigError, default_config, default_variants, main, merge_config

HEADER = ["epoch", "train_loss", "test_accuracy", "mean_nontarget_entropy", "mean_topk_similarity", "wall_ms"]
TINY_DATA = {"data": {"train_per_class": 10, "test_per_class": 5}, "train": {"epochs": 2}}


def write_config(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def run(tmp_path, name, *argv, config=None):
    out = tmp_path / name
    args = list(argv) + ["--out", str(out), "-q"]
    if config is not None:
        args += ["--config", write_config(tmp_path / f"{name}.json", config)]
    return main(args), out


def test_merge_config_rejects_unknown_keys():
    base = default_config("train")
    with pytest.raises(ConfigError, match="train.epoch"):
        merge_config(base, {"train": {"epoch": 3}})
    with pytest.raises(ConfigError):
        merge_config(base, {"lr": 0.1})
    assert merge_config(base, {"loss": {"p_t": 0.9}})["loss"]["p_t"] == 0.9


def test_train_writes_outputs(tmp_path):
    code, out = run(tmp_path, "t", "train", "--loss", "MM", config=TINY_DATA)
    assert code == 0
    rows = list(csv.reader(open(out / "metrics.csv", newline="")))
    assert rows[0] == HEADER and len(rows) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["schema_version"] == 1 and summary["epochs"] == 2
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["command"] == "train" and resolved["loss"]["loss_kind"] == "MM"


def test_flags_override_config_file(tmp_path):
    cfg = {**TINY_DATA, "loss": {"loss_kind": "CE", "p_t": 0.7}, "seed": 4}
    code, out = run(tmp_path, "o", "train", "--loss", "MM", "--p-t", "0.9", "--epochs", "1", "--seed", "2",
                    config=cfg)
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["loss"]["loss_kind"] == "MM" and resolved["loss"]["p_t"] == 0.9
    assert resolved["train"]["epochs"] == 1 and resolved["seed"] == 2
    assert resolved["data"]["train_per_class"] == 10


def test_train_constant_rows_at_zero_lr(tmp_path):
    cfg = merge_config(TINY_DATA, {"train": {"epochs": 3}})
    cfg["train"]["learning_rate"] = 0.0
    code, out = run(tmp_path, "z", "train", "--loss", "CE", config=cfg)
    assert code == 0
    rows = list(csv.reader(open(out / "metrics.csv", newline="")))[1:]
    assert len({tuple(r[2:]) for r in rows}) == 1


def test_train_byte_identical(tmp_path):
    a = run(tmp_path, "a", "train", "--loss", "MM_FRL", config=TINY_DATA)[1]
    b = run(tmp_path, "b", "train", "--loss", "MM_FRL", config=TINY_DATA)[1]
    for name in ("metrics.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_unknown_key_exit_code(tmp_path):
    code, _ = run(tmp_path, "u", "train", config={"trian": {}})
    assert code == 2


def test_invalid_value_exit_code(tmp_path):
    code, _ = run(tmp_path, "v", "train", "--p-t", "1.5", config=TINY_DATA)
    assert code == 2


def test_unreadable_config(tmp_path):
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "m"), "-q"]) == 2


def test_unwritable_output_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["game-verify", "--out", str(blocker / "sub"), "-q"]) == 5


def test_sweep_ablation_grid(tmp_path):
    variants = [v for v in default_variants() if v["name"].startswith("ablation")]
    assert len(variants) == 4
    code, out = run(tmp_path, "s", "sweep", config={**TINY_DATA, "variants": variants, "seeds": [0]})
    assert code == 0
    rows = list(csv.DictReader(open(out / "sweep.csv", newline="")))
    assert len(rows) == 4 and all(r["status"] == "ok" for r in rows)
    assert {(r["p_t"], r["frl_lambda"]) for r in rows} == {("1.0", "0.0"), ("1.0", "1.0"), ("0.85", "0.0"), ("0.85", "1.0")}
    assert len(list((out / "runs").iterdir())) == 4


def test_default_sweep_grids():
    names = [v["name"] for v in default_variants()]
    assert len(names) == 16 and len(set(names)) == 16
    residuals = sorted(1 - v["p_t"] for v in default_variants() if v["loss_kind"] == "MM")
    assert residuals == pytest.approx([0, 0.05, 0.1, 0.15, 0.3, 0.5])


def test_sweep_partial_failure_recorded(tmp_path):
    variants = [{"name": "good", "loss_kind": "CE"}, {"name": "bad", "loss_kind": "MM", "p_t": 0.0}]
    code, out = run(tmp_path, "f", "sweep", config={**TINY_DATA, "variants": variants})
    assert code == 1
    rows = list(csv.DictReader(open(out / "sweep.csv", newline="")))
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")


def test_sweep_rejects_unknown_variant_key(tmp_path):
    code, _ = run(tmp_path, "k", "sweep", config={**TINY_DATA, "variants": [{"name": "x", "lr": 1}]})
    assert code == 2


def test_grad_check_pass_and_forced_failure(tmp_path):
    cfg = {"targets": ["CE", "MaxNTE", "MM"], "n_values": [3], "trials": 10}
    code, out = run(tmp_path, "g", "grad-check", config=cfg)
    report = json.loads((out / "grad_check.json").read_text())
    assert code == 0 and report["passed"]
    assert [r["target"] for r in report["results"]] == ["CE", "MaxNTE", "MM"]
    code, out = run(tmp_path, "g0", "grad-check", "--tolerance", "0", config=cfg)
    assert code == 1 and not json.loads((out / "grad_check.json").read_text())["passed"]


def test_game_verify_default(tmp_path):
    code, out = run(tmp_path, "gv", "game-verify")
    report = json.loads((out / "game_verify.json").read_text())
    assert code == 0 and report["passed"]
    assert set(report["checks"]) == {"adversary_best_response", "model_best_response", "equilibrium",
                                     "indifference", "negative_control"}
    assert report["checks"]["equilibrium"]["max_adversary_gain"] <= 1e-9
    assert report["checks"]["equilibrium"]["max_model_gain"] <= 1e-9


def test_game_verify_n3_fine_grid(tmp_path):
    code, out = run(tmp_path, "g3", "game-verify", "--n", "3", "--grid-m", "100")
    report = json.loads((out / "game_verify.json").read_text())
    assert code == 0
    assert report["checks"]["equilibrium"]["adversary_grid_size"] == 101


def test_game_verify_injected_failure(tmp_path):
    code, out = run(tmp_path, "gi", "game-verify", config={"inject_perturbation": 0.01})
    assert code == 1
    assert not json.loads((out / "game_verify.json").read_text())["checks"]["equilibrium"]["passed"]


def test_game_verify_grid_cap(tmp_path):
    code, _ = run(tmp_path, "gc", "game-verify", "--n", "9", "--grid-m", "60")
    assert code == 3


def test_game_verify_json_byte_identical(tmp_path):
    a = run(tmp_path, "j1", "game-verify")[1]
    b = run(tmp_path, "j2", "game-verify")[1]
    assert (a / "game_verify.json").read_bytes() == (b / "game_verify.json").read_bytes()
