"""
PA-EWC Desk Lab - Report Module

Summary tables over completed runs. The report is a pure function of the
record.json files under a runs directory:

    method_summary.csv    method x {avg dice, avg forgetting, wall time, reduction vs sequential}
    order_forgetting.csv  order x method x task forgetting
    tier_forgetting.csv   prompt tier x method average forgetting
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
import pandas as pd

from continual_trainer import METHODS, RunRecord
from errors import NoCompleteRunsError
from metrics_eval import forgetting_rate, relative_reduction
from prompt_taxonomy import TIER_SETTINGS

logger = logging.getLogger(__name__)

RECORD_FILE = "record.json"
REPORT_TABLES = ("method_summary", "order_forgetting", "tier_forgetting")
FLOAT_FORMAT = "%.6f"


def load_records(runs_dir: Union[str, Path]) -> List[RunRecord]:
    """All complete run records under runs_dir, in a deterministic order"""
    runs_dir = Path(runs_dir)
    records = []
    for path in sorted(runs_dir.glob(f"*/{RECORD_FILE}")):
        try:
            record = RunRecord.load(path)
        except (OSError, ValueError, TypeError) as e:
            logger.warning(f"Skipping unreadable run record {path}: {e}")
            continue
        if not record.complete:
            logger.warning(f"Skipping incomplete run record {path}")
            continue
        records.append(record)
    if not records:
        raise NoCompleteRunsError(f"no complete runs under {runs_dir}")
    records.sort(key=lambda r: (_rank(METHODS, r.method), r.order_name, _rank(TIER_SETTINGS, r.tier), r.seed))
    logger.info(f"Loaded {len(records)} complete runs from {runs_dir}")
    return records


def _rank(known, value) -> int:
    return known.index(value) if value in known else len(known)


def run_frame(records: List[RunRecord]) -> pd.DataFrame:
    """One row per run: identifiers plus its forgetting summary"""
    rows = []
    for record in records:
        result = forgetting_rate(record)
        rows.append({
            "method": record.method,
            "order": record.order_name,
            "tier": record.tier,
            "seed": record.seed,
            "avg_dice": result.average_dice,
            "forgetting_total": result.forgetting_total,
            "avg_forgetting": result.forgetting_mean_percent,
            "wall_time": record.wall_time,
        })
    return pd.DataFrame(rows)


def method_summary(records: List[RunRecord]) -> pd.DataFrame:
    runs = run_frame(records)
    table = (runs.groupby("method", sort=False)
             .agg(n_runs=("seed", "size"), avg_dice=("avg_dice", "mean"), avg_forgetting=("avg_forgetting", "mean"),
                  forgetting_total=("forgetting_total", "mean"), wall_time=("wall_time", "mean"))
             .reset_index())
    baseline = table.loc[table["method"] == "sequential", "forgetting_total"]
    reductions = []
    for value in table["forgetting_total"]:
        reduction = relative_reduction(value, float(baseline.iloc[0])) if len(baseline) else None
        reductions.append(np.nan if reduction is None else reduction)
    table["forgetting_reduction_vs_sequential"] = reductions
    return table


def order_forgetting(records: List[RunRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        result = forgetting_rate(record)
        for position, forgetting in enumerate(result.per_task_forgetting):
            rows.append({"order": record.order_name, "method": record.method, "position": position,
                         "task": record.order[position], "forgetting": forgetting})
    columns = ["order", "method", "position", "task", "forgetting"]
    frame = pd.DataFrame(rows, columns=columns)
    return (frame.groupby(["order", "method", "position", "task"], sort=False)
            .agg(forgetting=("forgetting", "mean"), n_runs=("forgetting", "size"))
            .reset_index())


def tier_forgetting(records: List[RunRecord]) -> pd.DataFrame:
    runs = run_frame(records)
    return (runs.groupby(["tier", "method"], sort=False)
            .agg(avg_forgetting=("avg_forgetting", "mean"), forgetting_total=("forgetting_total", "mean"),
                 avg_dice=("avg_dice", "mean"), n_runs=("seed", "size"))
            .reset_index())


def build_report(records: List[RunRecord]) -> Dict[str, pd.DataFrame]:
    return {"method_summary": method_summary(records), "order_forgetting": order_forgetting(records),
            "tier_forgetting": tier_forgetting(records)}


def _json_rows(frame: pd.DataFrame) -> List[dict]:
    rows = []
    for row in frame.to_dict(orient="records"):
        rows.append({key: (None if isinstance(value, float) and np.isnan(value) else
                           value.item() if isinstance(value, np.generic) else value)
                     for key, value in row.items()})
    return rows


def write_report(runs_dir: Union[str, Path], out_dir: Union[str, Path, None] = None,
                 fmt: str = "csv") -> Dict[str, Path]:
    """
    Build every table from the runs directory and write it out

    Args:
        runs_dir: directory holding one subdirectory per run
        out_dir: destination (defaults to runs_dir)
        fmt: "csv" writes one file per table, "json" writes report.json

    Returns:
        Mapping of table name (or "report") to written path
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format '{fmt}'")
    tables = build_report(load_records(runs_dir))
    out_dir = Path(out_dir) if out_dir is not None else Path(runs_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    written: Dict[str, Path] = {}
    if fmt == "csv":
        for name in REPORT_TABLES:
            path = out_dir / f"{name}.csv"
            tables[name].to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
            written[name] = path
    else:
        path = out_dir / "report.json"
        payload = {name: _json_rows(tables[name]) for name in REPORT_TABLES}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written["report"] = path

    for name, path in written.items():
        logger.info(f"📊 Report {name} written to {path}")
    return written
