"""Command-line interface tests, driven through cli.main(argv)."""

import csv
import filecmp
import json

import pytest

from fedtte import cli

CONFIG_TEXT = """
[world]
grid_rows = 2
grid_cols = 3
n_drivers = 4
trips_per_day = 6
congestion = flat
obs_sigma_s = 0.0
bias_spread_s = 0.0
time_slots = 8
seed = 5

[model]
time_slots = 8
embed_dim = 8
head_width = 8

[federated]
clients_per_round = 4
local_epochs = 2
base_lr = 1e-6

[experiment]
days = 1
max_rounds = 4

[attack]
epsilons = inf, 0.1
seeds = 2
rounds = 1
k = 5
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text(CONFIG_TEXT)
    return path


def _dir_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    return all(_dir_equal(a / sub, b / sub) for sub in cmp.common_dirs)


def test_generate_twice_identical(tmp_path, config_file):
    out1, out2 = tmp_path / "w1", tmp_path / "w2"
    assert cli.main(["generate", "--config", str(config_file), "--out", str(out1)]) == 0
    assert cli.main(["generate", "--config", str(config_file), "--out", str(out2)]) == 0
    assert _dir_equal(out1, out2)


def test_train_writes_artifacts_and_prints_metrics(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "rounds" in stdout
    for split in ("baseline", "global", "personalized"):
        assert split in stdout
    assert (out / "round_log.jsonl").exists()
    assert (out / "checkpoints" / "global_final.bin").exists()
    assert (out / "predictions.csv").exists()
    assert (out / "metrics.json").exists()


def test_train_then_attack_uses_checkpoint(tmp_path, config_file, capsys):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    assert cli.main(["attack", "--config", str(config_file), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "checkpoint" in stdout
    risk_csv = out / "risk.csv"
    assert risk_csv.exists()
    with open(risk_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert set(rows[0]) == {"epsilon", "seed", "client_id", "k", "risk"}
    aggregates = [r for r in rows if r["seed"] == "all"]
    assert {r["epsilon"] for r in aggregates} == {"inf", "0.1"}


def test_attack_single_epsilon_without_checkpoint(tmp_path, config_file):
    out = tmp_path / "atk"
    assert cli.main(["attack", "--config", str(config_file), "--out", str(out), "--epsilon", "inf"]) == 0
    assert (out / "risk.csv").exists()


def test_export_state_from_checkpoint(tmp_path, config_file):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    dest = tmp_path / "state.csv"
    assert (
        cli.main(
            ["export-state", "--config", str(config_file), "--out", str(out), "--time", "08:00", "--csv", str(dest)]
        )
        == 0
    )
    with open(dest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    assert set(rows[0]) == {"slot", "entity_kind", "entity_id", "travel_time_s", "bucket"}


def test_metrics_on_perfect_dump_reports_zeros(tmp_path, capsys):
    dump = tmp_path / "predictions.csv"
    with open(dump, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "route_seq", "y_true_s", "y_hat_s", "y_final_s"])
        writer.writerow(["d000", "e0", "100.0", "100.0", "100.0"])
        writer.writerow(["d001", "e1|v1|e2", "250.0", "250.0", "250.0"])
    assert cli.main(["metrics", str(dump)]) == 0
    stdout = capsys.readouterr().out
    assert "mae=0" in stdout.replace(" ", "")


def test_metrics_json_output(tmp_path):
    dump = tmp_path / "predictions.csv"
    with open(dump, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "route_seq", "y_true_s", "y_hat_s", "y_final_s"])
        writer.writerow(["d000", "e0", "100.0", "90.0", "95.0"])
    report_path = tmp_path / "report.json"
    assert cli.main(["metrics", str(dump), "--json", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["global"]["mae"] == pytest.approx(10.0)
    assert report["personalized"]["mae"] == pytest.approx(5.0)


def test_metrics_rejects_wrong_header(tmp_path, capsys):
    dump = tmp_path / "bad.csv"
    dump.write_text("a,b\n1,2\n")
    assert cli.main(["metrics", str(dump)]) == 1
    assert "error" in capsys.readouterr().err


def test_missing_file_is_reported_not_raised(tmp_path, capsys):
    assert cli.main(["metrics", str(tmp_path / "nope.csv")]) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_flag_exits_nonzero(capsys):
    assert cli.main(["train", "--not-a-flag"]) == 1
    capsys.readouterr()


def test_no_subcommand_exits_nonzero(capsys):
    assert cli.main([]) == 1
    capsys.readouterr()


def test_generate_requires_out(capsys):
    assert cli.main(["generate"]) == 1
    assert "error" in capsys.readouterr().err
