# pylint: disable=redefined-outer-name,unused-argument
"""
ldplcm CLI Test Suite

This test suite validates the command-line interface: dataset generation,
protocol runs, estimation from persisted artifacts, the bench and sweeps.

Key Features Tested:
- Byte-identical dataset generation for a fixed seed
- Run artifacts (model, sketch, per-item CSV, summary) and rerun determinism
- Estimation with branch labels, header checks and --all
- Sweep directories with one index row per value
- Exit codes: 2 config/usage, 3 I/O or artifact, 4 contract, 130 interrupted

Test Environment:
- Uses tmp_path for every output directory
- Patches setup_logging so loguru stays off the runner's streams
- Small populations (a few thousand clients) keep each invocation fast

Replication Guide (for Python or other languages):
1. Invoke each subcommand with explicit --seed and --out
2. Compare written files byte for byte across reruns
3. Feed run artifacts back into estimate
4. Check the exit code of each failure family

Dependencies for replication:
- pytest for test framework
- click.testing.CliRunner for CLI testing
- unittest.mock for patching
"""

import json
from unittest.mock import patch

import numpy as np
import pytest
from click.testing import CliRunner

from ldplcm.cli import main
from ldplcm.datasets import read_ground_truth
from ldplcm.utils import read_csv_rows

SMALL = ["--n", "4000", "--m", "32", "--k", "4", "--t", "200"]


@pytest.fixture
def runner():
    """CliRunner fixture for testing click commands."""
    return CliRunner()


@pytest.fixture
def no_logging():
    with patch("ldplcm.cli.setup_logging") as mocked:
        yield mocked


@pytest.fixture
def oracle_run(runner, no_logging, tmp_path):
    """Artifacts of a small run with the exact-frequency model."""
    out = tmp_path / "run"
    result = runner.invoke(main, ["--quiet", "run", *SMALL, "--model", "oracle", "--no-baseline", "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_gen_data_is_deterministic(runner, no_logging, tmp_path):
    """
    Test seeded dataset generation.

    Replication steps:
    1. Run gen-data --zipf 50000 --s 1.1 --seed 1 into two directories

    Key validations:
    - items.csv and ground_truth.csv are byte-identical
    - Ground-truth totals equal n
    - The realized domain size is printed
    """
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        result = runner.invoke(main, ["gen-data", "--zipf", "50000", "--s", "1.1", "--seed", "1", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "Realized domain size:" in result.output
        outputs.append(out)
    for filename in ("items.csv", "ground_truth.csv"):
        assert (outputs[0] / filename).read_bytes() == (outputs[1] / filename).read_bytes()
    assert read_ground_truth(outputs[0] / "ground_truth.csv").sum() == 50000


def test_gen_data_uniform(runner, no_logging, tmp_path):
    """
    Test --s 0.

    Key validations:
    - Tallies over 10 ranks are within 4 sigma of uniform
    """
    result = runner.invoke(
        main, ["gen-data", "--zipf", "20000", "--s", "0", "--max-rank", "10", "--out", str(tmp_path)]
    )
    assert result.exit_code == 0, result.output
    counts = read_ground_truth(tmp_path / "ground_truth.csv")
    assert counts.shape == (10,)
    assert np.all(np.abs(counts - 2000) <= 4 * np.sqrt(20000 * 0.1 * 0.9))


def test_gen_data_from_csv(runner, no_logging, tmp_path):
    source = tmp_path / "tokens.csv"
    source.write_text("apple\nbanana,3\napple\n", encoding="utf-8")
    out = tmp_path / "out"
    result = runner.invoke(main, ["gen-data", "--csv", str(source), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "key_mapping.csv").exists()
    assert read_ground_truth(out / "ground_truth.csv").tolist() == [2, 3]


@pytest.mark.parametrize("args", [[], ["--zipf", "10", "--csv", "x.csv"]])
def test_gen_data_needs_one_source(runner, no_logging, tmp_path, args):
    result = runner.invoke(main, ["gen-data", *args, "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_gen_data_malformed_csv(runner, no_logging, tmp_path):
    """A malformed dataset line is an I/O-family error naming the line."""
    source = tmp_path / "bad.csv"
    source.write_text("a\nb,x\n", encoding="utf-8")
    result = runner.invoke(main, ["gen-data", "--csv", str(source), "--out", str(tmp_path / "out")])
    assert result.exit_code == 3
    assert "line 2" in result.output


def test_run_writes_artifacts(runner, no_logging, tmp_path):
    """
    Test a run with the baseline.

    Replication steps:
    1. Run with a small population into one directory, twice

    Key validations:
    - Model, sketch, estimates and summary files are written for LDPLCM and the baseline
    - The resolved config is echoed
    - Reruns with the same seed give a byte-identical summary.json
    """
    summaries = []
    for name in ("first", "second"):
        out = tmp_path / name
        result = runner.invoke(main, ["--quiet", "run", *SMALL, "--seed", "5", "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert "Resolved config:" in result.output
        for filename in ("model.json", "sketch.bin", "estimates.csv", "baseline_estimates.csv", "summary.json"):
            assert (out / filename).exists()
        summaries.append((out / "summary.json").read_bytes())
    assert summaries[0] == summaries[1]
    assert json.loads(summaries[0])["ldplcm"]["config"]["seed"] == 5


def test_run_jobs_keep_summary(runner, no_logging, tmp_path):
    """--jobs changes the worker count only; the summary stays byte-identical."""
    summaries = []
    for jobs in ("1", "8"):
        out = tmp_path / jobs
        result = runner.invoke(main, ["--quiet", "run", *SMALL, "--jobs", jobs, "--out", str(out)])
        assert result.exit_code == 0, result.output
        summaries.append((out / "summary.json").read_bytes())
    assert summaries[0] == summaries[1]


def test_run_accepts_headline_setting(runner, no_logging, tmp_path):
    """The headline flags --epsilon 4 --theta 0.5 --r 0.1 --m 1024 --k 64 are accepted."""
    args = ["--epsilon", "4", "--theta", "0.5", "--r", "0.1", "--m", "1024", "--k", "64", "--n", "3000", "--t", "300"]
    result = runner.invoke(main, ["--quiet", "run", *args, "--no-baseline", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output


def test_run_out_dir_from_environment(runner, no_logging, tmp_path):
    out = tmp_path / "from-env"
    result = runner.invoke(main, ["--quiet", "run", *SMALL, "--no-baseline"], env={"LDPLCM_OUT_DIR": str(out)})
    assert result.exit_code == 0, result.output
    assert (out / "summary.json").exists()


def test_run_exit_codes(runner, no_logging, tmp_path):
    """
    Test the error families.

    Key validations:
    - Invalid config values exit 2, an unreadable config exits 3
    - An empty phase 1 is a contract error, exit 4
    """
    bad = tmp_path / "bad.yaml"
    bad.write_text("theta: 3\n", encoding="utf-8")
    assert runner.invoke(main, ["run", "--config", str(bad), "--out", str(tmp_path)]).exit_code == 2
    missing = runner.invoke(main, ["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path)])
    assert missing.exit_code == 3
    empty_phase = runner.invoke(main, ["run", *SMALL, "--r", "0.0001", "--out", str(tmp_path)])
    assert empty_phase.exit_code == 4
    assert "Error:" in empty_phase.output


def test_run_interrupted(runner, no_logging, tmp_path):
    with patch("ldplcm.cli.run_protocol", side_effect=KeyboardInterrupt):
        result = runner.invoke(main, ["run", *SMALL, "--out", str(tmp_path)])
    assert result.exit_code == 130


def test_estimate_model_branch(runner, oracle_run, tmp_path):
    """
    Test estimation from run artifacts.

    Replication steps:
    1. Run with the oracle model
    2. Estimate item 0, the most frequent item

    Key validations:
    - Item 0 takes the model branch and gets its exact count
    - Output CSV starts with the config line
    """
    output = tmp_path / "est.csv"
    result = runner.invoke(
        main,
        ["estimate", "--sketch", str(oracle_run / "sketch.bin"), "--model", str(oracle_run / "model.json")]
        + ["--item", "0", "--output", str(output)],
    )
    assert result.exit_code == 0, result.output
    rows = [row for _, row in read_csv_rows(output, ["item", "estimate", "branch"])]
    assert rows[0][0] == "0" and rows[0][2] == "model"
    ours = [row for _, row in read_csv_rows(oracle_run / "estimates.csv", ["item", "true_count", "estimate", "branch"])]
    assert float(rows[0][1]) == float(ours[0][1])
    assert output.read_text(encoding="utf-8").startswith("# ldplcm ")


def test_estimate_all_items(runner, oracle_run, tmp_path):
    """
    Test --all.

    Key validations:
    - One row per domain item, the domain size read from the sketch header
    - Estimates equal those written by the run
    """
    output = tmp_path / "all.csv"
    result = runner.invoke(
        main,
        ["estimate", "--sketch", str(oracle_run / "sketch.bin"), "--model", str(oracle_run / "model.json")]
        + ["--all", "--output", str(output)],
    )
    assert result.exit_code == 0, result.output
    domain_size = json.loads((oracle_run / "summary.json").read_text(encoding="utf-8"))["ldplcm"]["domain_size"]
    rows = [row for _, row in read_csv_rows(output, ["item", "estimate", "branch"])]
    assert len(rows) == domain_size
    written = [row for _, row in read_csv_rows(oracle_run / "estimates.csv", ["item", "true_count", "estimate", "branch"])]
    for ours, theirs in zip(rows, written):
        assert float(ours[1]) == pytest.approx(float(theirs[2]), rel=1e-9, abs=1e-6)
        assert ours[2] == theirs[3]


def test_estimate_refuses_mismatch(runner, oracle_run):
    """
    Test header checks.

    Key validations:
    - Requesting a different m exits 3 with a diagnostic
    - Neither --item nor --all is a usage error
    """
    base = ["estimate", "--sketch", str(oracle_run / "sketch.bin"), "--model", str(oracle_run / "model.json")]
    mismatch = runner.invoke(main, [*base, "--item", "1", "--m", "64"])
    assert mismatch.exit_code == 3
    assert "m=32" in mismatch.output
    assert runner.invoke(main, base).exit_code == 2


def test_estimate_refuses_foreign_model(runner, no_logging, oracle_run, tmp_path):
    """A model published for another sketch is refused."""
    other = tmp_path / "other"
    result = runner.invoke(
        main, ["--quiet", "run", *SMALL, "--seed", "9", "--model", "oracle", "--no-baseline", "--out", str(other)]
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main, ["estimate", "--sketch", str(oracle_run / "sketch.bin"), "--model", str(other / "model.json"), "--item", "0"]
    )
    assert result.exit_code == 3


def test_sweep_index_rows(runner, no_logging, tmp_path):
    """
    Test a theta sweep.

    Key validations:
    - index.csv has one row per value
    - One directory per value
    """
    result = runner.invoke(
        main,
        ["--quiet", "sweep", "--axis", "theta", "--values", "0.3,0.4,0.5,0.6", "--trials", "1", *SMALL]
        + ["--model", "oracle", "--out", str(tmp_path)],
    )
    assert result.exit_code == 0, result.output
    lines = (tmp_path / "index.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# ldplcm ")
    assert lines[1].startswith("axis,value,sse_total")
    assert [line.split(",")[1] for line in lines[2:]] == ["0.3", "0.4", "0.5", "0.6"]
    assert (tmp_path / "theta=0.6" / "summary.json").exists()


@pytest.mark.parametrize("values", [",", "7..1"])
def test_sweep_empty_values(runner, no_logging, tmp_path, values):
    result = runner.invoke(main, ["sweep", "--axis", "epsilon", "--values", values, "--out", str(tmp_path)])
    assert result.exit_code == 2


def test_bench(runner, no_logging, tmp_path):
    """
    Test the bench.

    Key validations:
    - Summary holds both methods and the win count
    """
    result = runner.invoke(main, ["--quiet", "bench", *SMALL, "--trials", "2", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert {"ldplcm", "apple_cms", "ldplcm_low_sse_wins"} <= set(summary)
    assert "trials" in result.output
