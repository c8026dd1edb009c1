"""Summaries and study reports computed from the result CSVs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from scipy import stats

METRICS = ("completion", "qoe_lin", "total_stall_s", "stall_exit_rate")


class ReportError(ValueError):
    pass


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _num(v: str) -> float:
    return float(v) if v != "" else math.nan


def mean_se(values) -> tuple[float, float]:
    """Mean and standard error (ddof=1); SE is 0 for a single value."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def group_key(row: dict) -> str:
    """Fixed-parameter rows are grouped per parameter set, tuned rows per mode."""
    if row["mode"] == "fixed":
        return f"fixed {row['final_param_json']}"
    return row["mode"]


def summarize(results) -> dict:
    """Per group and metric: mean over cells within each seed, then mean and SE across seeds."""
    rows = read_csv(results) if isinstance(results, (str, Path)) else list(results)
    groups: dict = {}
    for r in rows:
        groups.setdefault(group_key(r), []).append(r)
    out = {}
    for g, rs in sorted(groups.items()):
        seeds = sorted({r["seed"] for r in rs}, key=int)
        entry = {"cells": len(rs), "seeds": len(seeds)}
        for m in METRICS:
            per_seed = []
            for s in seeds:
                vals = [_num(r[m]) for r in rs if r["seed"] == s]
                vals = [v for v in vals if not math.isnan(v)]
                per_seed.append(float(np.mean(vals)) if vals else math.nan)
            mu, se = mean_se(per_seed)
            entry[m] = {"mean": None if math.isnan(mu) else mu, "se": None if math.isnan(se) else se}
        out[g] = entry
    return out


def best_fixed(summary: dict) -> tuple[str, float]:
    fixed = {k: v["completion"]["mean"] for k, v in summary.items() if k.startswith("fixed")}
    if not fixed:
        raise ReportError("no fixed-parameter groups")
    k = max(fixed, key=lambda g: (fixed[g], g))
    return k, fixed[k]


def _parse_rule(user_id: str) -> tuple[int, int]:
    try:
        _, t, c = user_id.split("_")
        return int(t), int(c)
    except ValueError:
        raise ReportError(f"not a rule-grid user id: {user_id!r}") from None


def heatmap_report(results, param: str | None = None, out_csv=None) -> dict:
    """Mean final parameter per (stall-time threshold, stall-count threshold).

    ``param`` defaults to ``stall_weight`` for MPC and ``beta`` for HYB. The
    Spearman correlation is between the threshold sum and the per-user mean.
    """
    rows = read_csv(results) if isinstance(results, (str, Path)) else list(results)
    rows = [r for r in rows if r["mode"] != "fixed"] or rows
    if not rows:
        raise ReportError("no rows")
    if param is None:
        param = "stall_weight" if rows[0]["abr"] == "mpc" else "beta"
    cells: dict = {}
    for r in rows:
        cells.setdefault(_parse_rule(r["user_id"]), []).append(json.loads(r["final_param_json"])[param])
    thresholds = range(2, 10)
    missing = [(t, c) for t in thresholds for c in thresholds if (t, c) not in cells]
    if missing:
        raise ReportError(f"missing grid cells: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    grid = np.array([[np.mean(cells[(t, c)]) for c in thresholds] for t in thresholds])
    sums = np.array([t + c for t in thresholds for c in thresholds], dtype=float)
    vals = grid.ravel()
    if np.ptp(vals) == 0:
        rho, p = None, None
    else:
        res = stats.spearmanr(sums, vals)
        rho, p = float(res.statistic), float(res.pvalue)
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stall_time_threshold", "stall_count_threshold", f"mean_{param}"])
            for i, t in enumerate(thresholds):
                for j, c in enumerate(thresholds):
                    w.writerow([t, c, repr(float(grid[i, j]))])
    return {"param": param, "grid": grid.tolist(), "spearman_rho": rho, "spearman_p": p}


def pearson(x, y) -> float | None:
    """Pearson r; ``None`` when undefined (fewer than 2 points or a constant input)."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, y).statistic)


def correlation_report(days, param: str = "beta", min_stalls: int = 11, column: str = "mean_selected_param_json",
                       out_csv=None) -> dict:
    """Per-day and pooled Pearson r of (stall-exit rate, mean selected parameter).

    Only user-days with at least ``min_stalls`` stalls count. By default the
    parameter is the mean of the values the tuner selected that day, so
    user-days without an invocation are skipped; pass
    ``column="mean_param_json"`` for the time-weighted parameter in force.
    """
    rows = read_csv(days) if isinstance(days, (str, Path)) else list(days)
    keep = [r for r in rows if r["mode"] != "fixed" and int(r["stalls"]) >= min_stalls and r[column]]
    if len(keep) < 3:
        raise ReportError(f"only {len(keep)} qualifying user-days (need >= 3)")
    pts = [(int(r["day"]), r["user_id"], r["trace_id"], r["seed"], float(r["stall_exit_rate"]),
            json.loads(r[column])[param]) for r in keep]
    per_day = {}
    for d in sorted({p[0] for p in pts}):
        sel = [p for p in pts if p[0] == d]
        per_day[str(d)] = {"n": len(sel), "r": pearson([p[4] for p in sel], [p[5] for p in sel]) if len(sel) >= 3
                           else None}
    pooled = pearson([p[4] for p in pts], [p[5] for p in pts])
    if out_csv is not None:
        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["day", "user_id", "trace_id", "seed", "stall_exit_rate", f"mean_{param}"])
            for p in pts:
                w.writerow([p[0], p[1], p[2], p[3], repr(p[4]), repr(float(p[5]))])
    return {"param": param, "per_day": per_day, "pooled_r": pooled, "n": len(pts)}
