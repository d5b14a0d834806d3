import csv
import json

import numpy as np
import pytest

from binflow.cli import main

BASE_CONFIG = {
    "target": {"family": "poisson", "params": {"rate": 5.0}, "support_cap": 40},
    "train": {"epochs": 0, "batch_size": 32, "n_samples": 256,
              "width": 32, "depth": 2, "time_dim": 16},
    "sampler": {"n_steps": 100, "n_chains": 500, "scheme": "tau-leap"},
    "likelihood": {"mode": "quadrature", "n_eval": 50, "n_nodes": 128},
    "diagnostics": {"n_chains": 1000, "n_steps": 100, "n_nll_eval": 200},
    "seed": 7,
    "_notes": "exercise config",
}


def write_config(tmp_path, overrides=None, name="config.json"):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for path, value in (overrides or {}).items():
        node = cfg
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    assert "not found" in capsys.readouterr().err


def test_usage_error_exit_code(capsys):
    assert main(["train"]) == 1                  # --config is required
    assert main(["teleport", "--config", "x"]) == 1
    capsys.readouterr()


def test_trajectory_output(tmp_path):
    cfg = write_config(tmp_path, {"sampler.record_trajectory": True,
                                  "sampler.n_chains": 4, "sampler.n_steps": 10})
    out = tmp_path / "traj"
    assert main(["sample", "--config", str(cfg), "--oracle", "--out", str(out)]) == 0
    with open(out / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["chain_id", "step", "t", "x"]
    assert len(rows) == 1 + 4 * 11
    xs = np.array([int(r[3]) for r in rows[1:]]).reshape(11, 4)
    assert np.all(np.diff(xs, axis=0) >= 0)


def test_invalid_family_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path, {"target.family": "gaussian"})
    assert main(["train", "--config", str(cfg)]) == 1
    assert "target.family" in capsys.readouterr().err


def test_invalid_train_value(tmp_path, capsys):
    cfg = write_config(tmp_path, {"train.learning_rate": -1.0})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "train" in err and "learning_rate" in err


def test_train_writes_checkpoint_and_history(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "checkpoint.bnfw").exists()
    with open(out / "loss_history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "mean_loss", "floor_events"]
    assert len(rows) == 1   # epochs=0: header only
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["tool_version"] and summary["config_digest"]


def test_train_byte_identical_repeats(tmp_path):
    cfg = write_config(tmp_path, {"train.epochs": 1})
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out1)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "checkpoint.bnfw").read_bytes() == (out2 / "checkpoint.bnfw").read_bytes()
    assert (out1 / "loss_history.csv").read_bytes() == (out2 / "loss_history.csv").read_bytes()
    assert (out1 / "train_summary.json").read_bytes() == (out2 / "train_summary.json").read_bytes()


def test_sample_oracle_and_summary(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "s"
    assert main(["sample", "--config", str(cfg), "--oracle", "--out", str(out)]) == 0
    with open(out / "samples.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["chain_id", "x_final"]
    assert len(rows) == 501
    summary = json.loads((out / "sample_summary.json").read_text())
    assert summary["scheme"] == "tau-leap"
    assert abs(summary["mean"] - 5.0) < 0.5
    assert summary["denoiser"] == "oracle"


def test_sample_zero_chains(tmp_path):
    cfg = write_config(tmp_path, {"sampler.n_chains": 0})
    out = tmp_path / "s0"
    assert main(["sample", "--config", str(cfg), "--oracle", "--out", str(out)]) == 0
    with open(out / "samples.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["chain_id", "x_final"]]


def test_sample_requires_model_or_oracle(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 1
    assert "--oracle" in capsys.readouterr().err


def test_sample_determinism_and_scheme_tagging(tmp_path):
    cfg = write_config(tmp_path)
    out1, out2 = tmp_path / "d1", tmp_path / "d2"
    main(["sample", "--config", str(cfg), "--oracle", "--out", str(out1)])
    main(["sample", "--config", str(cfg), "--oracle", "--out", str(out2)])
    assert (out1 / "samples.csv").read_bytes() == (out2 / "samples.csv").read_bytes()
    cfg_euler = write_config(tmp_path, {"sampler.scheme": "euler"}, name="euler.json")
    out3 = tmp_path / "d3"
    main(["sample", "--config", str(cfg_euler), "--oracle", "--out", str(out3)])
    assert json.loads((out3 / "sample_summary.json").read_text())["scheme"] == "euler"
    assert (out1 / "samples.csv").read_bytes() != (out3 / "samples.csv").read_bytes()


def test_nll_single_sample_quadrature(tmp_path):
    cfg = write_config(tmp_path)
    eval_csv = tmp_path / "eval.csv"
    eval_csv.write_text("x\n5\n")
    out = tmp_path / "n"
    assert main(["nll", "--config", str(cfg), "--oracle",
                 "--eval-set", str(eval_csv), "--out", str(out)]) == 0
    summary = json.loads((out / "nll_summary.json").read_text())
    assert summary["mean_nll"] == pytest.approx(1.7403, abs=1e-3)
    assert summary["std_error"] == 0.0
    with open(out / "nll.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "nll", "std_error", "mode"]
    assert rows[1][0] == "5" and rows[1][3] == "quadrature"


def test_nll_empty_eval_set(tmp_path, capsys):
    cfg = write_config(tmp_path)
    eval_csv = tmp_path / "empty.csv"
    eval_csv.write_text("x\n")
    assert main(["nll", "--config", str(cfg), "--oracle",
                 "--eval-set", str(eval_csv), "--out", str(tmp_path / "n")]) == 1
    assert "empty" in capsys.readouterr().err


def test_nll_parse_error_names_line(tmp_path, capsys):
    cfg = write_config(tmp_path)
    eval_csv = tmp_path / "bad.csv"
    eval_csv.write_text("x\n5\nseven\n")
    assert main(["nll", "--config", str(cfg), "--oracle",
                 "--eval-set", str(eval_csv), "--out", str(tmp_path / "n")]) == 1
    assert ":3:" in capsys.readouterr().err


def test_nll_mean_over_sampled_set(tmp_path):
    cfg = write_config(tmp_path, {"likelihood.n_eval": 400})
    out = tmp_path / "nm"
    assert main(["nll", "--config", str(cfg), "--oracle", "--out", str(out)]) == 0
    summary = json.loads((out / "nll_summary.json").read_text())
    assert abs(summary["mean_nll"] - 2.2) < 0.15


def test_validate_oracle_exit_codes(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "v"
    assert main(["validate", "--config", str(cfg), "--oracle", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True
    # impossible thresholds flip the exit code but the report is still written
    cfg2 = write_config(tmp_path, {"diagnostics.tweedie_threshold": 0.0}, name="strict.json")
    out2 = tmp_path / "v2"
    assert main(["validate", "--config", str(cfg2), "--oracle", "--out", str(out2)]) == 3
    report = json.loads((out2 / "report.json").read_text())
    assert report["passed"] is False


@pytest.mark.parametrize("family,cap", [
    ("poisson", 40), ("poisson_mixture", 140), ("zip", 50), ("nbm", 150),
    ("bnb", 100), ("zipf", 50), ("yule_simon", 50),
])
def test_validate_oracle_all_families(tmp_path, family, cap):
    cfg = write_config(tmp_path, {
        "target.family": family, "target.params": {}, "target.support_cap": cap,
        "diagnostics.n_chains": 0, "diagnostics.n_nll_eval": 0,
        "diagnostics.tweedie_threshold": 1e-6 if family in ("bnb", "zipf", "yule_simon")
        else 1e-8,
        "diagnostics.tweedie_mass_floor": 1e-10,
    }, name=f"{family}.json")
    assert main(["validate", "--config", str(cfg), "--oracle",
                 "--out", str(tmp_path / family)]) == 0


def test_validate_unknown_check_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, {"diagnostics.checks": ["tweedie", "nonsense"]})
    assert main(["validate", "--config", str(cfg), "--oracle",
                 "--out", str(tmp_path / "v")]) == 1
    assert "diagnostics" in capsys.readouterr().err


def test_checkpoint_roundtrip_through_cli(tmp_path):
    cfg = write_config(tmp_path, {"train.epochs": 1})
    out = tmp_path / "t"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    out_s = tmp_path / "ts"
    assert main(["sample", "--config", str(cfg), "--checkpoint",
                 str(out / "checkpoint.bnfw"), "--out", str(out_s)]) == 0
    summary = json.loads((out_s / "sample_summary.json").read_text())
    assert summary["denoiser"] == "model"


def test_report_empty_directory(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    assert main(["report", str(empty)]) == 0
    assert "No runs found" in (empty / "report.md").read_text()


def test_report_aggregates_runs(tmp_path):
    cfg = write_config(tmp_path)
    runs = tmp_path / "runs"
    for seed in range(5):
        out = runs / f"poisson-{seed}"
        assert main(["nll", "--config", str(cfg), "--oracle", "--seed", str(seed),
                     "--out", str(out)]) == 0
    zipc = write_config(tmp_path, {"target.family": "zip", "target.params": {},
                                   "target.support_cap": 50}, name="zip.json")
    assert main(["nll", "--config", str(zipc), "--oracle", "--out", str(runs / "zip-0")]) == 0
    assert main(["report", str(runs)]) == 0
    text = (runs / "report.md").read_text()
    assert "| poisson |" in text and "| zip |" in text
    with open(runs / "nll_table.csv") as fh:
        rows = {r[0]: r for r in csv.reader(fh)}
    assert rows["poisson"][3] == "5"
    assert abs(float(rows["poisson"][1]) - 2.2) < 0.2


def test_run_dir_naming_from_digest(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = write_config(tmp_path, {"io": {"output_dir": str(tmp_path / "auto")},
                                  "sampler.n_chains": 10})
    assert main(["sample", "--config", str(cfg), "--oracle"]) == 0
    children = list((tmp_path / "auto").iterdir())
    assert len(children) == 1
    assert children[0].name.endswith("-seed7")
