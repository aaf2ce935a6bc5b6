"""
PA-EWC Desk Lab - Experiment CLI Test Suite
Tests grid runs, reports, the self-check command and task dumps end to end
"""

import contextlib
import io
import json
import logging
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd

from continual_trainer import ContinualTrainer, RunRecord
from errors import NumericError
from experiment_cli import (
    EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NO_RUNS, EXIT_NUMERIC, EXIT_OK, EXIT_RUN_FAILED, FAILURE_FILE, METRIC_COLUMNS,
    main, metrics_frame, verify_manifest,
)
from self_check import CheckResult, run_checks

logging.basicConfig(level=logging.WARNING)

TINY_YAML = """\
methods: [{methods}]
orders: [order_A]
prompt_tiers: [comprehensive]
seeds: [43]
output_dir: {output_dir}
model:
  image_size: 16
  embed_dim: 8
trainer:
  epochs_per_task: 1
  batch_size: 4
  fisher_samples: 4
  stability_batches: 2
  probe_samples: 4
tasks:
  n_train: 8
  n_val: 4
  n_test: 4
"""


def _write_config(directory: Path, output_dir: Path, methods: str = "sequential, pa_ewc", extra: str = "") -> Path:
    path = directory / "experiment.yaml"
    path.write_text(TINY_YAML.format(methods=methods, output_dir=output_dir) + extra, encoding="utf-8")
    return path


def _main(*argv):
    """Run the CLI, returning (exit code, stdout, stderr)"""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class TestGridRun(unittest.TestCase):
    """run and report over one tiny grid"""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.base = Path(cls.tmp.name)
        cls.root = cls.base / "runs"
        cls.config = _write_config(cls.base, cls.root)
        cls.code, cls.out, _ = _main("run", "--config", cls.config, "--jobs", 2)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_run_succeeds(self):
        self.assertEqual(self.code, EXIT_OK)
        self.assertIn("2 runs trained", self.out)

    def test_run_artifacts(self):
        run_dir = self.root / "pa_ewc__order_A__comprehensive__seed43"
        for relative in ("record.json", "metrics.csv", "checkpoint.bin", "assignments/task1.json",
                         "fisher/task1.snap", "fisher/task2.snap"):
            self.assertTrue((run_dir / relative).is_file(), relative)
        record = RunRecord.load(run_dir / "record.json")
        self.assertTrue(record.complete)
        self.assertEqual(record.order, [1, 2, 3, 4, 5])
        self.assertEqual(len(record.config_hash), 64)
        self.assertFalse((self.root / "sequential__order_A__comprehensive__seed43" / "fisher").exists())

    def test_combined_metrics(self):
        frame = pd.read_csv(self.root / "metrics.csv")
        self.assertEqual(list(frame.columns), METRIC_COLUMNS)
        self.assertEqual(len(frame), 2 * 5 * 5)
        self.assertEqual(set(frame["method"]), {"sequential", "pa_ewc"})
        trained = frame.dropna(subset=["forgetting"])
        self.assertTrue((trained["forgetting"] >= 0).all())

    def test_manifest_matches_files(self):
        self.assertEqual(verify_manifest(self.root), [])
        manifest = json.loads((self.root / "manifest.json").read_text(encoding="utf-8"))
        self.assertEqual(len(manifest["runs"]), 2)
        self.assertIn("metrics.csv", manifest["files"])

    def test_rerun_skips_completed_runs(self):
        record_path = self.root / "sequential__order_A__comprehensive__seed43" / "record.json"
        before = record_path.read_bytes()
        code, out, _ = _main("run", "--config", self.config)
        self.assertEqual(code, EXIT_OK)
        self.assertIn("0 runs trained, 2 skipped", out)
        self.assertEqual(record_path.read_bytes(), before)

    def test_report_csv_is_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / "a", Path(tmp) / "b"
            self.assertEqual(_main("report", "--runs", self.root, "--out", first)[0], EXIT_OK)
            self.assertEqual(_main("report", "--runs", self.root, "--out", second)[0], EXIT_OK)
            for name in ("method_summary.csv", "order_forgetting.csv", "tier_forgetting.csv"):
                self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)
            summary = pd.read_csv(first / "method_summary.csv")
        self.assertEqual(list(summary["method"]), ["sequential", "pa_ewc"])
        self.assertIn("forgetting_reduction_vs_sequential", summary.columns)
        self.assertTrue(summary["avg_dice"].between(0.0, 1.0).all())

    def test_report_writes_exactly_the_content_named_tables(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(_main("report", "--runs", self.root, "--out", tmp)[0], EXIT_OK)
            written = sorted(path.name for path in Path(tmp).iterdir())
            summary = pd.read_csv(Path(tmp) / "method_summary.csv")
        self.assertEqual(written, ["method_summary.csv", "order_forgetting.csv", "tier_forgetting.csv"])
        self.assertEqual(len(summary), 2)

    def test_report_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = _main("report", "--runs", self.root, "--out", tmp, "--format", "json")
            payload = json.loads((Path(tmp) / "report.json").read_text(encoding="utf-8"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(set(payload), {"method_summary", "order_forgetting", "tier_forgetting"})
        self.assertEqual(len(payload["order_forgetting"]), 2 * 4)


class TestRunFailures(unittest.TestCase):
    """Exit codes for configuration, numeric and other run failures"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.base = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_unknown_key_exits_2(self):
        config = _write_config(self.base, self.base / "runs", extra="surprise: 1\n")
        code, _, err = _main("run", "--config", config)
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("line 19", err)

    def test_missing_config_exits_2(self):
        self.assertEqual(_main("run", "--config", self.base / "absent.yaml")[0], EXIT_CONFIG)

    def test_unwritable_output_exits_2(self):
        blocker = self.base / "not_a_dir"
        blocker.write_text("x", encoding="utf-8")
        config = _write_config(self.base, blocker / "runs", methods="sequential")
        self.assertEqual(_main("run", "--config", config)[0], EXIT_CONFIG)

    def test_divergence_exits_3(self):
        config = _write_config(self.base, self.base / "runs", methods="sequential")
        error = NumericError("run sequential__order_A__comprehensive__seed43, task 1, epoch 0: loss is nan",
                             epoch=0, run_id="sequential__order_A__comprehensive__seed43")
        with patch.object(ContinualTrainer, "run_sequence", side_effect=error):
            code, _, err = _main("run", "--config", config)
        self.assertEqual(code, EXIT_NUMERIC)
        self.assertIn("sequential__order_A__comprehensive__seed43", err)
        self.assertFalse((self.base / "runs" / "sequential__order_A__comprehensive__seed43" / "record.json").exists())

    def test_unexpected_failure_marks_cell_and_exits_5(self):
        config = _write_config(self.base, self.base / "runs", methods="sequential")
        run_dir = self.base / "runs" / "sequential__order_A__comprehensive__seed43"
        with patch.object(ContinualTrainer, "run_sequence", side_effect=KeyError("decoder.fc9.weight")):
            code, _, err = _main("run", "--config", config)
        self.assertEqual(code, EXIT_RUN_FAILED)
        self.assertIn("sequential__order_A__comprehensive__seed43", err)
        failure = json.loads((run_dir / FAILURE_FILE).read_text(encoding="utf-8"))
        self.assertEqual(failure["error"], "KeyError")
        self.assertFalse((run_dir / "record.json").exists())

        self.assertEqual(_main("run", "--config", config)[0], EXIT_OK)
        self.assertFalse((run_dir / FAILURE_FILE).exists())

    def test_report_without_runs_exits_4(self):
        (self.base / "empty").mkdir()
        self.assertEqual(_main("report", "--runs", self.base / "empty")[0], EXIT_NO_RUNS)

    def test_incomplete_records_ignored(self):
        record = RunRecord(method="sequential", seed=1, order=[1, 2], dice_matrix=[[0.5, 0.1]])
        record.save(self.base / "runs" / "partial" / "record.json")
        self.assertEqual(_main("report", "--runs", self.base / "runs")[0], EXIT_NO_RUNS)


class TestMetricsFrame(unittest.TestCase):
    """Per-checkpoint metrics rows"""

    def test_forgetting_uses_running_peak(self):
        record = RunRecord(method="pa_ewc", seed=43, order=[2, 1, 3], order_name="order_X",
                           dice_matrix=[[0.9, 0.1, 0.0], [0.7, 0.8, 0.1], [0.6, 0.5, 0.9]])
        frame = metrics_frame(record)
        self.assertEqual(len(frame), 9)
        row = frame[(frame["checkpoint"] == 2) & (frame["task"] == 2)].iloc[0]
        self.assertAlmostEqual(row["forgetting"], 0.3)
        self.assertTrue(np.isnan(frame[(frame["checkpoint"] == 0) & (frame["task"] == 1)]["forgetting"].iloc[0]))
        self.assertEqual(frame[(frame["checkpoint"] == 1) & (frame["task"] == 1)]["forgetting"].iloc[0], 0.0)


class TestCheckCommand(unittest.TestCase):
    """check subcommand output and exit codes"""

    def test_json_output(self):
        subset = ["oracle:complexity", "oracle:dice_coeff", "invariant:classify"]
        with patch("experiment_cli.run_checks", side_effect=lambda fixtures: run_checks(fixtures, names=subset)):
            code, out, _ = _main("check", "--json")
        payload = json.loads(out)
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(payload["passed"])
        self.assertEqual([c["name"] for c in payload["checks"]], subset)

    def test_default_fixture_count(self):
        passing = [CheckResult(name="oracle:dice_coeff", passed=True, detail="ok", seconds=0.0)]
        with patch("experiment_cli.run_checks", return_value=passing) as runner:
            self.assertEqual(_main("check")[0], EXIT_OK)
        runner.assert_called_once_with(fixtures=100)

    def test_failure_exits_1(self):
        failing = [CheckResult(name="gradient:mul", passed=False, detail="error 3.2e-01", seconds=0.0)]
        with patch("experiment_cli.run_checks", return_value=failing):
            code, out, _ = _main("check")
        self.assertEqual(code, EXIT_CHECK_FAILED)
        self.assertIn("❌ gradient:mul", out)


class TestGenTasks(unittest.TestCase):
    """gen-tasks dumps every family"""

    def test_dump_all_tasks(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = _main("gen-tasks", "--out", tmp, "--seed", 1, "--tier", "basic", "--image-size", 16)
            names = sorted(p.name for p in Path(tmp).iterdir())
            images = np.load(Path(tmp) / names[0] / "train" / "images.npy")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(names), 5)
        self.assertTrue(names[0].startswith("task1_"))
        self.assertEqual(images.shape[1:], (3, 16, 16))


if __name__ == "__main__":
    unittest.main()
