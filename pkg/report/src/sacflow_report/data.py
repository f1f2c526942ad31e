"""CSV loading and the band/aggregation math, kept free of any plotting so it
is checkable against raw files.

Band convention: mean across seeds with a 95% normal-approximation interval,
mean +- 1.96 * sample_std / sqrt(n_runs).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Z95 = 1.96


class MissingColumn(KeyError):
    pass


def read_csv_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(x) for x in row] for row in reader]
    data = np.array(rows) if rows else np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


def column(table: dict[str, np.ndarray], name: str, path="") -> np.ndarray:
    if name not in table:
        raise MissingColumn(f"{path}: no column {name!r}; available: {sorted(table)}")
    return table[name]


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; window 1 is the identity."""
    if window <= 1:
        return values
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = values[lo:i + 1].mean()
    return out


@dataclass
class CurveBand:
    steps: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    n_runs: int


def metric_band(run_dirs, metric: str, smoothing: int = 1) -> CurveBand:
    """Mean metric across run directories with the 95% CI band.

    Runs are aligned on their common step grid; a single run collapses the
    band onto the line.
    """
    if not run_dirs:
        raise ValueError("need at least one run directory")
    series = []
    steps_ref = None
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        table = read_csv_columns(path)
        steps = column(table, "step", path)
        vals = smooth(column(table, metric, path), smoothing)
        if steps_ref is None:
            steps_ref = steps
        n = min(len(steps_ref), len(steps))
        steps_ref = steps_ref[:n]
        series = [s[:n] for s in series]
        series.append(vals[:n])
    mat = np.vstack(series)
    mean = mat.mean(axis=0)
    if mat.shape[0] == 1:
        half = np.zeros_like(mean)
    else:
        half = Z95 * mat.std(axis=0, ddof=1) / math.sqrt(mat.shape[0])
    return CurveBand(steps_ref, mean, mean - half, mean + half, mat.shape[0])


def gradnorm_bars(run_dirs, step_range: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(k values, mean norm per k) from gradnorms.csv files, averaged over a
    step range (inclusive) and across runs."""
    per_k: dict[int, list[float]] = {}
    for d in run_dirs:
        path = Path(d) / "gradnorms.csv"
        table = read_csv_columns(path)
        steps = column(table, "step", path)
        ks = column(table, "k", path)
        norms = column(table, "norm", path)
        mask = np.ones(len(steps), dtype=bool)
        if step_range is not None:
            mask = (steps >= step_range[0]) & (steps <= step_range[1])
        for k, n in zip(ks[mask], norms[mask]):
            per_k.setdefault(int(k), []).append(float(n))
    if not per_k:
        raise ValueError("no gradient-norm rows in the requested step range")
    ks_sorted = np.array(sorted(per_k))
    means = np.array([np.mean(per_k[k]) for k in ks_sorted])
    return ks_sorted, means


def gradnorm_bars_from_metrics(run_dirs, step_range: tuple | None = None):
    """Same bars, computed from the grad_norm_k* columns of metrics.csv."""
    per_k: dict[int, list[float]] = {}
    for d in run_dirs:
        path = Path(d) / "metrics.csv"
        table = read_csv_columns(path)
        steps = column(table, "step", path)
        mask = np.ones(len(steps), dtype=bool)
        if step_range is not None:
            mask = (steps >= step_range[0]) & (steps <= step_range[1])
        k_cols = sorted((c for c in table if c.startswith("grad_norm_k")),
                        key=lambda c: int(c.removeprefix("grad_norm_k")))
        if not k_cols:
            raise MissingColumn(f"{path}: no grad_norm_k columns; available: {sorted(table)}")
        for c in k_cols:
            vals = table[c][mask]
            vals = vals[~np.isnan(vals)]
            if len(vals):
                per_k.setdefault(int(c.removeprefix("grad_norm_k")), []).extend(vals.tolist())
    if not per_k:
        raise ValueError("no gradient-norm values in the requested step range")
    ks_sorted = np.array(sorted(per_k))
    means = np.array([np.mean(per_k[k]) for k in ks_sorted])
    return ks_sorted, means
