"""Results persistence: runs.csv, cells.csv, plot series, comparison tables.

Everything here is a pure transformation of stored run rows.  Numeric
output uses a fixed 6-significant-digit format so emitted files are
byte-for-byte reproducible from the same results.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np

from .engine import GridResult, run_scalars
from .errors import ConfigError
from .metrics import MeasureKind, bps_binary

__all__ = [
    "runs_table_from_grid",
    "write_runs_csv",
    "read_runs_csv",
    "cells_from_runs",
    "write_cells_csv",
    "emit_results",
    "emit_plot_series",
    "emit_comparison_tables",
    "write_manifest",
    "literature_constants",
    "file_digest",
    "fmt",
]

CELL_FIELDS = ("measures", "variant", "beta", "power", "alpha")
RUN_FIELDS = CELL_FIELDS + ("iteration", "seed", "diverged", "divergence_epoch")
BASE_SCALARS = ("accuracy", "bce", "best_epoch")
GROUP_SCALARS = tuple(
    f"{kind.value.lower()}_g{slot}" for kind in MeasureKind for slot in (0, 1)
)
BPS_SCALARS = tuple(f"bps_{kind.value.lower()}" for kind in MeasureKind)


def fmt(value) -> str:
    """Fixed formatting: 6 significant digits, empty for missing."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return ""
    return f"{v:.6g}"


def _scalar_columns(max_terms: int):
    cols = list(BASE_SCALARS) + list(BPS_SCALARS) + list(GROUP_SCALARS)
    for i in range(max_terms):
        cols += [f"term{i}_loss", f"term{i}_soft_bps"]
    return cols


def runs_table_from_grid(result: GridResult):
    """Flatten a GridResult into per-run row dicts."""
    rows = []
    for cell in result.cells:
        key = cell.key
        for run in cell.runs:
            row = {
                "measures": key.measures_label,
                "variant": key.variant.name,
                "beta": key.variant.beta,
                "power": key.power,
                "alpha": key.alpha,
                "iteration": run.iteration,
                "seed": run.seed,
                "diverged": run.diverged,
                "divergence_epoch": run.divergence_epoch,
            }
            row.update(run_scalars(run))
            rows.append(row)
    return rows


def _max_terms(rows) -> int:
    best = 0
    for row in rows:
        i = 0
        while f"term{i}_loss" in row:
            i += 1
        best = max(best, i)
    return best


def write_runs_csv(rows, path):
    """One row per training run, fixed documented column order."""
    columns = list(RUN_FIELDS) + _scalar_columns(_max_terms(rows))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])


def read_runs_csv(path):
    """Inverse of write_runs_csv; numeric fields parsed, blanks to NaN."""
    int_fields = {"power", "iteration", "seed", "best_epoch", "divergence_epoch"}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = {}
            for key, val in raw.items():
                if key in ("measures", "variant"):
                    row[key] = val
                elif key == "diverged":
                    row[key] = val == "1"
                elif val == "" or val is None:
                    row[key] = None if key in int_fields else float("nan")
                elif key in int_fields:
                    row[key] = int(val)
                else:
                    row[key] = float(val)
            rows.append(row)
    return rows


def cells_from_runs(rows):
    """Group runs by cell and compute means and unbiased variances."""
    groups: dict = {}
    for row in rows:
        key = tuple(row[f] for f in CELL_FIELDS)
        groups.setdefault(key, []).append(row)
    max_terms = _max_terms(rows)
    scalar_cols = _scalar_columns(max_terms)
    cells = []
    for key in sorted(groups):
        runs = groups[key]
        ok = [r for r in runs if not r.get("diverged")]
        cell = dict(zip(CELL_FIELDS, key))
        cell["n_runs"] = len(ok)
        cell["n_diverged"] = len(runs) - len(ok)
        for col in scalar_cols:
            vals = np.array(
                [r[col] for r in ok if r.get(col) is not None and not math.isnan(r.get(col, float("nan")))]
            )
            if vals.size == 0:
                cell[f"mean_{col}"] = float("nan")
                cell[f"var_{col}"] = float("nan")
            else:
                cell[f"mean_{col}"] = float(vals.mean())
                cell[f"var_{col}"] = float(vals.var(ddof=1)) if vals.size > 1 else 0.0
        cells.append(cell)
    return cells


def write_cells_csv(cells, path):
    if not cells:
        raise ConfigError("no cells to write")
    stat_cols = [c for c in cells[0] if c not in CELL_FIELDS + ("n_runs", "n_diverged")]
    columns = list(CELL_FIELDS) + ["n_runs", "n_diverged"] + stat_cols
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for cell in cells:
            writer.writerow([fmt(cell.get(c)) for c in columns])


def emit_results(result_or_rows, out_dir):
    """Write runs.csv and cells.csv; returns the stored run rows.

    cells.csv is aggregated from the re-read runs.csv, so stored results
    are the single source of truth and `report` rebuilds every derived
    file byte-for-byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = (
        runs_table_from_grid(result_or_rows)
        if isinstance(result_or_rows, GridResult)
        else result_or_rows
    )
    if not rows:
        raise ConfigError("no run results to emit")
    write_runs_csv(rows, out / "runs.csv")
    stored = read_runs_csv(out / "runs.csv")
    write_cells_csv(cells_from_runs(stored), out / "cells.csv")
    return stored


def _series_name(measures: str, variant: str, beta, power) -> str:
    tag = variant if variant != "sigmoided" or beta in (None, 1.0) else f"{variant}-b{beta:g}"
    safe_measures = measures.replace("*", "x")
    return f"series_{safe_measures}_{tag}_k{power}.csv"


def emit_plot_series(cells, out_dir, measures=None):
    """One CSV per (measure set, variant, power): metric curves over alpha.

    Accuracy, BCE, and term losses are scaled by 100 so every curve
    shares the BPS percentage axis; variance columns ride along as bands.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not cells:
        raise ConfigError("no aggregated cells: nothing to plot")
    series: dict = {}
    for cell in cells:
        series.setdefault(
            (cell["measures"], cell["variant"], cell["beta"], cell["power"]), []
        ).append(cell)

    bps_cols = [f"mean_{c}" for c in BPS_SCALARS]
    written = []
    for (meas, variant, beta, power), cell_list in sorted(series.items()):
        if measures is not None and meas not in measures:
            continue
        cell_list.sort(key=lambda c: c["alpha"])
        term_cols = sorted(
            c[len("mean_"):] for c in cell_list[0]
            if c.startswith("mean_term") and c.endswith("_loss")
        )
        header = (
            ["alpha"]
            + [c[5:] for c in bps_cols]
            + ["accuracy_x100", "bce_x100"]
            + [f"{t}_x100" for t in term_cols]
            + [f"var_{c[5:]}" for c in bps_cols]
            + ["var_accuracy", "var_bce"]
        )
        path = out / _series_name(meas, variant, beta, power)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for cell in cell_list:
                row = [fmt(cell["alpha"])]
                row += [fmt(cell[c]) for c in bps_cols]
                row += [fmt(100.0 * cell["mean_accuracy"]), fmt(100.0 * cell["mean_bce"])]
                row += [fmt(100.0 * cell[f"mean_{t}"]) for t in term_cols]
                row += [fmt(cell[f"var_{c[5:]}"]) for c in bps_cols]
                row += [fmt(cell["var_accuracy"]), fmt(cell["var_bce"])]
                writer.writerow(row)
        written.append(path)
    return written


def literature_constants() -> dict:
    """Published comparison rows shipped as data, never recomputed."""
    blob = (
        importlib_resources.files("bpsfair.resources")
        .joinpath("comparison_constants.json")
        .read_text(encoding="utf-8")
    )
    return json.loads(blob)


def _find_cell(cells, selector):
    matches = []
    for cell in cells:
        checks = (
            ("measures", cell["measures"]),
            ("variant", cell["variant"]),
            ("beta", cell["beta"]),
            ("power", cell["power"]),
            ("alpha", cell["alpha"]),
        )
        if all(key not in selector or selector[key] == value for key, value in checks):
            matches.append(cell)
    if len(matches) != 1:
        raise ConfigError(f"cell selector {selector} matched {len(matches)} cells")
    return matches[0]


def emit_comparison_tables(cells, out_dir, table_rows):
    """Write the p-rule/accuracy table and the per-group FPR/FNR table.

    ``table_rows`` maps row labels to cell selectors for the debiased
    configurations.  The without-debiasing column always comes from the
    alpha = 0 baseline cell, which shares its Monte Carlo seeds with
    every other cell of the same grid.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    baselines = [c for c in cells if c["alpha"] == 0.0]
    if not baselines:
        raise ConfigError("comparison tables need an alpha=0 baseline cell")
    baseline = baselines[0]
    lit = literature_constants()

    prule_path = out / "prule_table.csv"
    with open(prule_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["technique", "prule", "accuracy", "source"])
        for row in lit["prule"]:
            writer.writerow([row["technique"], fmt(row["prule"]), fmt(row["accuracy"]),
                             "literature"])
        writer.writerow(
            ["Baseline", fmt(baseline["mean_bps_stp"]),
             fmt(100.0 * baseline["mean_accuracy"]), "this run"]
        )
        for label, selector in table_rows.items():
            cell = _find_cell(cells, selector)
            writer.writerow(
                [label, fmt(cell["mean_bps_stp"]), fmt(100.0 * cell["mean_accuracy"]),
                 "this run"]
            )

    error_path = out / "error_rate_table.csv"
    with open(error_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["technique", "measure", "group0_without", "group0_with",
             "group1_without", "group1_with", "bps", "source"]
        )
        for row in lit["error_rates"]:
            writer.writerow(
                [row["technique"], row["measure"], fmt(row["group0_without"]),
                 fmt(row["group0_with"]), fmt(row["group1_without"]),
                 fmt(row["group1_with"]), fmt(row["bps"]), "literature"]
            )
        for label, selector in table_rows.items():
            cell = _find_cell(cells, selector)
            for measure in ("fpr", "fnr"):
                with_g0 = cell[f"mean_{measure}_g0"]
                with_g1 = cell[f"mean_{measure}_g1"]
                writer.writerow(
                    [label, measure.upper(), fmt(baseline[f"mean_{measure}_g0"]),
                     fmt(with_g0), fmt(baseline[f"mean_{measure}_g1"]), fmt(with_g1),
                     fmt(bps_binary(with_g0, with_g1)), "this run"]
                )
    return [prule_path, error_path]


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, config_path=None, dataset_path=None, grid_spec=None, version="0"):
    """Record digests of the exact inputs that produced a result directory."""
    manifest = {
        "tool_version": version,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config_digest": file_digest(config_path) if config_path else None,
        "config_path": str(config_path) if config_path else None,
        "dataset_digest": file_digest(dataset_path) if dataset_path else None,
        "dataset_path": str(dataset_path) if dataset_path else None,
        "grid_spec": grid_spec,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
