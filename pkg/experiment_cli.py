"""
PA-EWC Desk Lab - Command Line Entry Point

Subcommands:
    run        train every cell of an experiment grid (method x order x tier x seed)
    report     summary tables over completed runs
    check      self-check suite (gradient, closed-form and invariant oracles)
    gen-tasks  dump the synthetic tasks to disk

Per-run artifacts live in <output_dir>/<run_id>/:
    record.json              RunRecord (written last; marks the run complete)
    metrics.csv              method, order, tier, seed, checkpoint, task, dice, forgetting
    assignments/task<id>.json
    fisher/task<id>.snap
    checkpoint.bin           final parameters
    failure.json             error type and message, only while the run is failing

The output root additionally receives a combined metrics.csv and manifest.json.

Exit codes: 0 success, 1 self-check failure, 2 configuration error,
3 numeric divergence, 4 no complete runs to report, 5 any other run failure.
"""

import argparse
import hashlib
import json
import logging
import queue
import sys
import threading
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from checkpoint_io import save_checkpoint, save_snapshot
from continual_trainer import ContinualTrainer, RunRecord
from errors import ConfigError, NoCompleteRunsError, NumericError
from experiment_config import ExperimentConfig, RunCell, load_config
from experiment_report import RECORD_FILE, write_report
from param_classifier import save_assignment
from prompt_taxonomy import TIER_SETTINGS, Lexicon, Vocabulary
from self_check import DEFAULT_FIXTURES, print_results, run_checks
from synth_tasks import default_suite, dump_task, make_task
from toy_model import build_model

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_NO_RUNS = 4
EXIT_RUN_FAILED = 5

METRIC_COLUMNS = ["method", "order", "tier", "seed", "checkpoint", "task", "dice", "forgetting"]
MANIFEST_FILE = "manifest.json"
FAILURE_FILE = "failure.json"


# ---------------------------------------------------------------------------
# Per-run artifacts
# ---------------------------------------------------------------------------

def metrics_frame(record: RunRecord) -> pd.DataFrame:
    """
    Long-format metrics of one run

    forgetting at checkpoint k for a task trained at position i <= k is its best
    Dice so far minus its current Dice; tasks not trained yet have no value.
    """
    matrix = np.array(record.dice_matrix, dtype=np.float64)
    rows = []
    for k in range(matrix.shape[0]):
        for i, task_id in enumerate(record.order):
            forgetting = float(matrix[i:k + 1, i].max() - matrix[k, i]) if i <= k else np.nan
            rows.append({"method": record.method, "order": record.order_name, "tier": record.tier,
                         "seed": record.seed, "checkpoint": k, "task": task_id,
                         "dice": float(matrix[k, i]), "forgetting": forgetting})
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def write_metrics(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(root: Path, records: Dict[str, RunRecord]) -> Path:
    """Record every run artifact under root with its SHA-256 digest"""
    runs = {}
    for run_id in sorted(records):
        record = records[run_id]
        run_dir = root / run_id
        files = {str(p.relative_to(root)): _sha256(p) for p in sorted(run_dir.rglob("*")) if p.is_file()}
        runs[run_id] = {"config_hash": record.config_hash, "wall_time": record.wall_time, "files": files}
    combined = root / "metrics.csv"
    manifest = {
        "code_version": __version__,
        "runs": runs,
        "files": {"metrics.csv": _sha256(combined)} if combined.is_file() else {},
    }
    path = root / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def verify_manifest(root: Union[str, Path]) -> List[str]:
    """Problems found when checking a manifest against the files on disk (empty when consistent)"""
    root = Path(root)
    manifest = json.loads((root / MANIFEST_FILE).read_text(encoding="utf-8"))
    expected = dict(manifest.get("files", {}))
    for run in manifest.get("runs", {}).values():
        expected.update(run["files"])
    problems = []
    for relative, digest in sorted(expected.items()):
        path = root / relative
        if not path.is_file():
            problems.append(f"missing: {relative}")
        elif _sha256(path) != digest:
            problems.append(f"digest mismatch: {relative}")
    return problems


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------

class GridRunner:
    """
    Runs the cells of an experiment grid on a pool of worker threads

    Each cell owns its output subdirectory. Cells whose record.json already
    carries the same config hash are skipped.
    """

    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        self.config = config
        self.jobs = max(1, jobs)
        self.root = config.resolved_output_dir()
        self.lexicon = Lexicon.from_file(config.lexicon) if config.lexicon else Lexicon.default()
        self.vocab = Vocabulary.default(self.lexicon)
        self.vocab.check_fits(config.model.vocab_size)

        self.cell_queue: "queue.Queue[RunCell]" = queue.Queue()
        self.lock = threading.Lock()
        self.records: Dict[str, RunRecord] = {}
        self.failures: Dict[str, BaseException] = {}

        # Statistics
        self.runs_completed = 0
        self.runs_skipped = 0

        logger.info(f"GridRunner initialized: {len(list(config.grid()))} runs, {self.jobs} workers, "
                    f"output {self.root}")

    def prepare_output(self):
        """Create the output root and make sure it is writable"""
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            probe = self.root / ".write_test"
            probe.write_text("ok", encoding="utf-8")
            probe.unlink()
        except OSError as e:
            raise ConfigError(f"output_dir {self.root} is not writable: {e}")

    def completed_record(self, cell: RunCell, config_hash: str) -> Optional[RunRecord]:
        path = self.root / cell.run_id / RECORD_FILE
        if not path.is_file():
            return None
        try:
            record = RunRecord.load(path)
        except (OSError, ValueError, TypeError) as e:
            logger.warning(f"Unreadable record for {cell.run_id}, rerunning: {e}")
            return None
        if record.config_hash == config_hash and record.complete:
            return record
        return None

    def run_cell(self, cell: RunCell) -> RunRecord:
        """Train one grid cell and persist its artifacts"""
        config = self.config
        config_hash = config.config_hash(cell)
        existing = self.completed_record(cell, config_hash)
        if existing is not None:
            logger.warning(f"⏭️ Skipping {cell.run_id}: already complete with config hash {config_hash[:12]}")
            with self.lock:
                self.runs_skipped += 1
            return existing

        run_dir = self.root / cell.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        suite = default_suite(cell.seed, config.tasks)
        tasks = suite.datasets(cell.order, cell.tier, config.model.image_size, config.model.channels)
        params = build_model(config.model, cell.seed)
        trainer = ContinualTrainer(params, config.trainer_for(cell), self.lexicon, self.vocab, run_id=cell.run_id)
        trainer.set_assignment_callback(lambda task_id, assignment, matrix: save_assignment(
            run_dir / "assignments" / f"task{task_id}.json", assignment, task_id, matrix))
        trainer.set_snapshot_callback(lambda snapshot: save_snapshot(
            run_dir / "fisher" / f"task{snapshot.task_id}.snap", snapshot))

        logger.info(f"🚀 Run {cell.run_id} started")
        record = trainer.run_sequence(tasks, cell.order, config_hash)
        save_checkpoint(run_dir / "checkpoint.bin", params, {"run_id": cell.run_id, "config_hash": config_hash})
        write_metrics(metrics_frame(record), run_dir / "metrics.csv")
        record.save(run_dir / RECORD_FILE)
        (run_dir / FAILURE_FILE).unlink(missing_ok=True)
        with self.lock:
            self.runs_completed += 1
        logger.info(f"✅ Run {cell.run_id} finished in {record.wall_time:.1f}s")
        return record

    def mark_failed(self, cell: RunCell, error: BaseException):
        """Leave a failure.json in the cell's run directory"""
        payload = {"run_id": cell.run_id, "error": type(error).__name__, "message": str(error)}
        try:
            run_dir = self.root / cell.run_id
            run_dir.mkdir(parents=True, exist_ok=True)
            (run_dir / FAILURE_FILE).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            logger.warning(f"Could not mark {cell.run_id} failed: {e}")

    def _worker(self):
        while True:
            try:
                cell = self.cell_queue.get_nowait()
            except queue.Empty:
                return
            try:
                record = self.run_cell(cell)
                with self.lock:
                    self.records[cell.run_id] = record
            except Exception as e:
                logger.error(f"Run {cell.run_id} failed: {type(e).__name__}: {e}")
                with self.lock:
                    self.failures[cell.run_id] = e
                self.mark_failed(cell, e)
            finally:
                self.cell_queue.task_done()

    def run(self) -> Dict[str, RunRecord]:
        self.prepare_output()
        for cell in self.config.grid():
            self.cell_queue.put(cell)
        workers = [threading.Thread(target=self._worker, name=f"grid-worker-{i}") for i in range(self.jobs)]
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()

        if self.records:
            frames = [metrics_frame(self.records[run_id]) for run_id in sorted(self.records)]
            write_metrics(pd.concat(frames, ignore_index=True), self.root / "metrics.csv")
            write_manifest(self.root, self.records)
        return self.records

    def get_grid_stats(self) -> Dict[str, object]:
        return {
            "runs_completed": self.runs_completed,
            "runs_skipped": self.runs_skipped,
            "runs_failed": len(self.failures),
            "output_dir": str(self.root),
        }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _first_failure(failures: Dict[str, BaseException]) -> Tuple[str, BaseException]:
    run_id = sorted(failures)[0]
    return run_id, failures[run_id]


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        runner = GridRunner(config, jobs=args.jobs)
        runner.run()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"❌ config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if runner.failures:
        numeric = {k: v for k, v in runner.failures.items() if isinstance(v, NumericError)}
        run_id, error = _first_failure(numeric or runner.failures)
        print(f"❌ run {run_id} failed: {error}", file=sys.stderr)
        if numeric:
            return EXIT_NUMERIC
        if isinstance(error, ConfigError):
            return EXIT_CONFIG
        logger.error(f"{len(runner.failures)} run(s) failed; see {FAILURE_FILE} in each failed run directory")
        return EXIT_RUN_FAILED

    stats = runner.get_grid_stats()
    print(f"✅ {stats['runs_completed']} runs trained, {stats['runs_skipped']} skipped; output in {stats['output_dir']}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        written = write_report(args.runs, args.out, args.format)
    except NoCompleteRunsError as e:
        logger.error(f"Report failed: {e}")
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NO_RUNS
    for name, path in written.items():
        print(f"✅ {name}: {path}")
    return EXIT_OK


def cmd_check(args) -> int:
    started = time.time()
    results = run_checks(fixtures=args.fixtures)
    success = print_results(results, as_json=args.json)
    logger.info(f"Self-check finished in {time.time() - started:.1f}s")
    return EXIT_OK if success else EXIT_CHECK_FAILED


def cmd_gen_tasks(args) -> int:
    suite = default_suite(args.seed)
    for task_id in sorted(suite.specs):
        spec = suite.specs[task_id]
        dump_task(make_task(spec, args.tier, args.seed, args.image_size), args.out)
    print(f"✅ {len(suite.specs)} tasks written to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="PA-EWC desk lab: prompt-aware continual segmentation experiments")
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment grid from a YAML config.")
    run.add_argument("--config", type=str, required=True, help="Path to YAML configuration file.")
    run.add_argument("--jobs", type=int, default=1, help="Number of grid cells trained in parallel.")
    run.set_defaults(func=cmd_run)

    report = sub.add_parser("report", help="Write summary tables over completed runs.")
    report.add_argument("--runs", type=str, required=True, help="Runs directory.")
    report.add_argument("--out", type=str, default=None, help="Destination directory (default: the runs directory).")
    report.add_argument("--format", choices=("csv", "json"), default="csv")
    report.set_defaults(func=cmd_report)

    check = sub.add_parser("check", help="Run the self-check suite.")
    check.add_argument("--json", action="store_true", help="Machine-readable results.")
    check.add_argument("--fixtures", type=int, default=DEFAULT_FIXTURES, help="Random fixtures per gradient check.")
    check.set_defaults(func=cmd_check)

    gen = sub.add_parser("gen-tasks", help="Dump the synthetic tasks to disk.")
    gen.add_argument("--out", type=str, required=True)
    gen.add_argument("--seed", type=int, default=43)
    gen.add_argument("--tier", choices=TIER_SETTINGS, default="comprehensive")
    gen.add_argument("--image-size", type=int, default=32)
    gen.set_defaults(func=cmd_gen_tasks)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(levelname)s - %(message)s')
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
