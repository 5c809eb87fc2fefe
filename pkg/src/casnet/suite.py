"""Experiment sweeps: baselines, ablations, groupings, reduction ratio, insertion positions.

A suite is a list of named variants, each a set of ``TrainConfig`` overrides,
run over several seeds.  Outputs in the suite directory:

    runs.csv        one row per finished run: ``<variant>/seed<k>`` then the
                    five test metrics (readable with ``MetricReport.from_row``)
    summary.csv     per variant: finished/failed counts, mean and std per metric
    runs/<variant>/seed<k>.json   full run records
    failures.txt    variant, seed and error of each run that raised
    <suite>_f1.png  bar chart of mean test F1
"""

from __future__ import annotations

import csv
import logging
import traceback
from pathlib import Path

import numpy as np

from casnet.errors import ConfigError
from casnet.metrics import METRIC_NAMES, MetricReport
from casnet.sharing import ABLATION_VARIANTS
from casnet.train import RunRecord, TrainConfig, make_datasets, train

log = logging.getLogger(__name__)


def consecutive_masks(n: int = 4) -> list[tuple[bool, ...]]:
    """All masks switching on one run of consecutive stages (10 for 4 stages)."""
    out = []
    for length in range(1, n + 1):
        for start in range(n - length + 1):
            out.append(tuple(start <= i < start + length for i in range(n)))
    return out


def _mask_name(mask) -> str:
    on = [str(i + 1) for i, m in enumerate(mask) if m]
    return "layers" + "".join(on)


def suite_variants(name: str, base: TrainConfig) -> list[tuple[str, dict]]:
    if name == "baselines":
        return [("hard", {"sharing_kind": "hard"}), ("vanilla", {"sharing_kind": "none"}),
                ("cross_stitch", {"sharing_kind": "cross_stitch"}), ("sluice", {"sharing_kind": "sluice"}),
                ("cas", {"sharing_kind": "cas"})]
    if name == "ablations":
        return [(v, {"sharing_kind": "cas", "ablation": v}) for v in ABLATION_VARIANTS]
    if name == "grouping":
        return [(g, {"sharing_kind": "cas", "grouping": g})
                for g in ("global_local", "rare_frequent", "top_down", "random")]
    if name == "reduction":
        return [(f"r{r}", {"sharing_kind": "cas", "r": r}) for r in (2, 4, 8, 16, 32)]
    if name == "integration":
        n = len(base.stages)
        return [(_mask_name(m), {"sharing_kind": "cas", "insertion_mask": m}) for m in consecutive_masks(n)]
    raise ConfigError(f"unknown suite {name!r}; choose from {SUITES}")


SUITES = ("baselines", "ablations", "grouping", "reduction", "integration")


def summarize(rows: dict[str, list[MetricReport]], failed: dict[str, int]) -> list[dict]:
    out = []
    for variant in rows.keys() | failed.keys():
        reps = rows.get(variant, [])
        row = {"variant": variant, "runs": len(reps), "failed": failed.get(variant, 0)}
        vals = np.array([r.values() for r in reps]) if reps else np.full((0, 5), np.nan)
        for j, m in enumerate(METRIC_NAMES):
            row[f"{m}_mean"] = float(vals[:, j].mean()) if reps else float("nan")
            row[f"{m}_std"] = float(vals[:, j].std(ddof=1)) if len(reps) > 1 else 0.0
        out.append(row)
    order = list(rows) + [v for v in failed if v not in rows]
    return sorted(out, key=lambda r: order.index(r["variant"]))


def write_summary(summary: list[dict], path) -> Path:
    path = Path(path)
    cols = ["variant", "runs", "failed"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, cols, lineterminator="\n")
        wr.writeheader()
        for row in summary:
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def read_runs(path) -> list[tuple[str, MetricReport]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MetricReport.header():
        raise ValueError(f"{path}: not a runs table")
    return [MetricReport.from_row(line) for line in lines[1:] if line]


def run_suite(name: str, base: TrainConfig, seeds, out_dir, data=None, plot: bool = True,
              variants: list[tuple[str, dict]] | None = None, progress=None) -> list[dict]:
    """Train every variant for every seed; a run that raises is logged and skipped."""
    from casnet import plots

    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    variants = suite_variants(name, base) if variants is None else variants
    data = make_datasets(base.data) if data is None else data
    rows: dict[str, list[MetricReport]] = {}
    failed: dict[str, int] = {}
    runs_csv = open(out / "runs.csv", "w")
    fail_log = out / "failures.txt"
    fail_log.write_text("")
    try:
        runs_csv.write(MetricReport.header() + "\n")
        for variant, overrides in variants:
            for seed in seeds:
                run_id = f"{variant}/seed{seed}"
                try:
                    cfg = base.with_(seed=int(seed), **overrides)
                    record, _ = train(cfg, data)
                except Exception as exc:  # keep sweeping; the failure is recorded
                    failed[variant] = failed.get(variant, 0) + 1
                    log.error("run %s failed: %s", run_id, exc)
                    with open(fail_log, "a") as fh:
                        fh.write(f"{run_id}\t{type(exc).__name__}: {exc}\n")
                        fh.write(traceback.format_exc() + "\n")
                    continue
                (out / "runs" / variant).mkdir(parents=True, exist_ok=True)
                record.save(out / "runs" / variant / f"seed{seed}.json")
                rep = record.test_report
                rows.setdefault(variant, []).append(rep)
                runs_csv.write(rep.to_row(run_id) + "\n")
                runs_csv.flush()
                if progress is not None:
                    progress(run_id, record)
    finally:
        runs_csv.close()
    summary = summarize(rows, failed)
    write_summary(summary, out / "summary.csv")
    if plot and rows:
        plots.plot_suite(summary, out / f"{name}_f1.png")
    return summary


def load_suite_records(out_dir) -> dict[str, list[RunRecord]]:
    out = {}
    for path in sorted(Path(out_dir, "runs").glob("*/seed*.json")):
        out.setdefault(path.parent.name, []).append(RunRecord.load(path))
    return out
