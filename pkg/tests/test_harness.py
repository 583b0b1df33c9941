"""Harness contracts: config parsing, run orchestration, summaries, CLI."""

import json
import math
import os

import numpy as np
import pytest

from perinvfl.analysis import Theorem1SpecError
from perinvfl.cli import main as cli_main
from perinvfl.harness import (
    ConfigError,
    ExperimentConfig,
    RunOutcome,
    build_federation,
    check_gradients,
    parse_config,
    rebuild_report,
    render_summary_table,
    run_experiment,
    run_name,
    summarize_outcomes,
    verify_theorem1,
)
from perinvfl.metrics import CSV_HEADER, MetricsLog


TINY_CFG = """\
# tiny smoke experiment
dataset = sem_synthetic
output_dir = {out}
seeds = 0
ood_cases = 0.10, 0.50
methods = perinvfl

hyper.T = 3
hyper.R = 1
hyper.S = 1
hyper.lambda = 2.0
hyper.lambda_warmup_rounds = 1
hyper.eval_every = 2

arch.hidden_dims = 6, 6
sem.n_train = 60
sem.n_test = 80
"""


def write_cfg(tmp_path, text=None, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text if text is not None else TINY_CFG.format(out=tmp_path / "out"))
    return path


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_parse_config_dotted_keys(tmp_path):
    config = parse_config(write_cfg(tmp_path))
    assert config.dataset == "sem_synthetic"
    assert config.seeds == (0,)
    assert config.ood_cases == (0.10, 0.50)
    assert config.methods == ("perinvfl",)
    assert config.hyper.T == 3
    assert config.hyper.lam == 2.0
    assert config.hidden_dims == (6, 6)
    assert config.sem["n_train"] == 60


def test_parse_config_reports_offending_keys(tmp_path):
    bad = "dataset = nowhere\nhyper.bogus = 3\nwhatkey = 1\nseeds = \n"
    with pytest.raises(ConfigError) as err:
        parse_config(write_cfg(tmp_path, bad))
    message = str(err.value)
    assert "nowhere" in message
    assert "hyper.bogus" in message
    assert "whatkey" in message
    assert "seeds" in message


def test_parse_config_rejects_bad_hyper(tmp_path):
    with pytest.raises(ConfigError, match="alpha"):
        parse_config(write_cfg(tmp_path, "hyper.alpha = 3.0\n"))


def test_parse_config_defaults():
    config = ExperimentConfig()
    assert config.ood_cases == (0.10, 0.20, 0.30, 0.40, 0.50)
    assert config.seeds == (0, 1, 2)
    assert config.run_methods() == ("perinvfl",)


def test_build_federation_requires_idx_paths():
    config = ExperimentConfig(dataset="rc_mnist")
    with pytest.raises(ConfigError, match="data.images"):
        build_federation(config, 0.10, seed=0)


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_report(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("exp")
    config = parse_config(write_cfg(tmp_path))
    return config, run_experiment(config)


def test_run_experiment_outputs(tiny_report):
    config, report = tiny_report
    assert len(report.outcomes) == 2  # 1 method x 1 seed x 2 cases
    assert not report.any_divergence
    for outcome in report.outcomes:
        assert os.path.exists(outcome.csv_path)
        assert 0.0 <= outcome.accuracy <= 1.0
    assert os.path.exists(report.summary_path)
    assert os.path.exists(report.json_path)


def test_run_experiment_csv_schema(tiny_report):
    _, report = tiny_report
    log = MetricsLog.from_csv(report.outcomes[0].csv_path)
    assert len(log) > 0
    with open(report.outcomes[0].csv_path) as fh:
        assert fh.readline().rstrip("\n") == ",".join(CSV_HEADER)
    rows = log.sorted_rows()
    assert rows == log.rows  # already totally ordered


def test_run_experiment_deterministic_bytes(tmp_path):
    config = parse_config(write_cfg(tmp_path))
    first = run_experiment(config)
    blobs = {o.csv_path: open(o.csv_path, "rb").read() for o in first.outcomes}
    summary_blob = open(first.summary_path, "rb").read()
    second = run_experiment(config)
    for outcome in second.outcomes:
        assert open(outcome.csv_path, "rb").read() == blobs[outcome.csv_path]
    assert open(second.summary_path, "rb").read() == summary_blob


def test_summary_average_column_math():
    cases = (0.1, 0.2)
    outcomes = [
        RunOutcome("m", 0, 0.1, 0.50, False, ""),
        RunOutcome("m", 1, 0.1, 0.60, False, ""),
        RunOutcome("m", 0, 0.2, 0.70, False, ""),
        RunOutcome("m", 1, 0.2, 0.80, False, ""),
    ]
    summary = summarize_outcomes(outcomes, ["m"], cases)
    row = summary["methods"]["m"]
    assert row["0.10"]["mean"] == pytest.approx(55.0)
    assert row["0.10"]["std"] == pytest.approx(5.0)
    assert row["Average"]["mean"] == pytest.approx((55.0 + 75.0) / 2)
    assert row["Average"]["std"] == pytest.approx(np.std([55.0, 75.0]))


def test_summary_single_run_zero_std():
    outcomes = [RunOutcome("m", 0, 0.1, 0.5, False, "")]
    summary = summarize_outcomes(outcomes, ["m"], (0.1,))
    row = summary["methods"]["m"]
    assert row["0.10"]["std"] == 0.0
    assert "50.00 (±0.00)" in render_summary_table(summary)


def test_rebuild_report_matches_summary(tiny_report):
    config, report = tiny_report
    rebuilt = rebuild_report(config.output_dir)
    for method, row in report.summary["methods"].items():
        for key, cell in row.items():
            got = rebuilt["methods"][method][key]
            assert got["mean"] == pytest.approx(cell["mean"], abs=1e-9)
            assert got["std"] == pytest.approx(cell["std"], abs=1e-9)


def test_run_name_format():
    assert run_name("fedavg", 2, 0.1) == "run_fedavg_seed2_case0.10.csv"


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------


def test_check_gradients_passes():
    report = check_gradients(n_trials=5, seed=0)
    assert report.passed
    assert set(report.max_errors) == {"risk", "irm_loss", "local_objective"}
    assert all(err <= 1e-4 for err in report.max_errors.values())


def test_check_gradients_fault_injection_names_objective():
    report = check_gradients(n_trials=2, seed=0, corrupt="irm_loss")
    assert not report.passed
    assert report.failures == ["irm_loss"]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


THM_SPEC_OK = """\
features: a b
client: phi = a b | z = b
client: phi = a
joint:
0 0 0 0.2225
1 0 0 0.0275
0 0 1 0.1375
1 0 1 0.1125
0 1 0 0.1125
1 1 0 0.1375
0 1 1 0.0275
1 1 1 0.2225
"""

# features are exact copies: the additive bound genuinely fails
THM_SPEC_FAIL = """\
features: a b
client: phi = a b | z = b
client: phi = a
joint:
0 0 0 0.475
1 0 0 0.025
0 1 1 0.025
1 1 1 0.475
"""


def test_cli_verify_theorem1_exit_codes(tmp_path, capsys):
    ok = tmp_path / "ok.txt"
    ok.write_text(THM_SPEC_OK)
    assert cli_main(["verify-theorem1", "--spec", str(ok)]) == 0
    out = capsys.readouterr().out
    assert "holds = True" in out

    bad = tmp_path / "fail.txt"
    bad.write_text(THM_SPEC_FAIL)
    assert cli_main(["verify-theorem1", "--spec", str(bad)]) == 2

    garbled = tmp_path / "garbled.txt"
    garbled.write_text("features: a\nwhat\n")
    assert cli_main(["verify-theorem1", "--spec", str(garbled)]) == 1


def test_cli_verify_theorem1_bits_flag(tmp_path, capsys):
    ok = tmp_path / "ok.txt"
    ok.write_text(THM_SPEC_OK)
    assert cli_main(["verify-theorem1", "--spec", str(ok), "--bits"]) == 0
    assert "bits" in capsys.readouterr().out


def test_cli_check_gradients(capsys):
    assert cli_main(["check-gradients", "--trials", "3"]) == 0
    assert "passed" in capsys.readouterr().out


def test_cli_run_and_report(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli_main(["run", "--config", str(cfg)]) == 0
    out_dir = str(tmp_path / "out")
    capsys.readouterr()
    assert cli_main(["report", "--dir", out_dir]) == 0
    assert "perinvfl" in capsys.readouterr().out
    assert cli_main(["report", "--dir", out_dir, "--json"]) == 0
    json.loads(capsys.readouterr().out)


def test_cli_run_invalid_config(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("dataset = nope\n")
    assert cli_main(["run", "--config", str(bad)]) == 1
    assert cli_main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_verify_theorem1_report_values(tmp_path):
    ok = tmp_path / "ok.txt"
    ok.write_text(THM_SPEC_OK)
    report = verify_theorem1(ok)
    assert report.applicable and report.holds
    assert report.p == pytest.approx(0.5)
