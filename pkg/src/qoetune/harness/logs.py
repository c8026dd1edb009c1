"""Synthetic playback logs: CSV I/O, feature replay and predictor training."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..core import VideoManifest
from ..engine import SimulationResult
from ..predictor.features import FeatureSpec, StateBatch
from ..predictor.hybrid import HybridExitPredictor
from ..predictor.os_tables import OSTables
from ..predictor.train import ExitNetClassifier, classification_metrics, train_exit_net

LOG_HEADER = ["user_id", "session_id", "segment_idx", "level", "bitrate_kbps", "throughput_kbps", "buffer_s",
              "stall_s", "switched", "exited"]
ROW_SETS = ("stall", "stall_switch", "all")


def log_from_result(result: SimulationResult, seed_label: str | None = None) -> dict:
    """Per-segment log arrays (ordered by instance, session, segment) from a recorded run."""
    rec = result.records
    if rec is None:
        raise ValueError("simulation was not run with record=True")
    order = np.lexsort((rec["segment"], rec["session"], rec["cell"]))
    ids = np.array([f"{u}@{t}" + (f"#{seed_label}" if seed_label else "")
                    for u, t in zip(result.user_ids, result.trace_ids)])
    return {
        "user_id": ids[rec["cell"][order]],
        "session_id": rec["session"][order],
        "segment_idx": rec["segment"][order],
        "level": rec["level"][order].astype(int),
        "bitrate_kbps": rec["bitrate"][order],
        "throughput_kbps": rec["throughput"][order],
        "buffer_s": rec["buffer"][order],
        "stall_s": rec["stall"][order],
        "switched": rec["switched"][order].astype(bool),
        "exited": rec["exited"][order].astype(bool),
    }


def write_log(log: dict, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        cols = [log[k] for k in LOG_HEADER]
        for row in zip(*cols):
            w.writerow([row[0], int(row[1]), int(row[2]), int(row[3]), repr(float(row[4])), repr(float(row[5])),
                        repr(float(row[6])), repr(float(row[7])), int(bool(row[8])), int(bool(row[9]))])


def read_log(path) -> dict:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_HEADER:
            raise ValueError(f"{path}: expected header {','.join(LOG_HEADER)}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: empty log")
    cols = list(zip(*rows))
    out = {"user_id": np.array(cols[0])}
    for i, k in enumerate(LOG_HEADER[1:], start=1):
        if k in ("session_id", "segment_idx", "level"):
            out[k] = np.array(cols[i], dtype=int)
        elif k in ("switched", "exited"):
            out[k] = np.array(cols[i], dtype=int).astype(bool)
        else:
            out[k] = np.array(cols[i], dtype=float)
    return out


def replay_features(log: dict, segment_length_s: float, spec: FeatureSpec) -> dict:
    """Rebuild feature matrices and previous levels by replaying the log.

    Each distinct ``user_id`` is one simulated history; rows must be in
    playback order within a user. Returns ``{"features", "prev_level"}``
    aligned with the log rows.
    """
    uid, inst = np.unique(log["user_id"], return_inverse=True)
    n = log["session_id"].size
    # position of each row within its user's history
    order = np.lexsort((log["segment_idx"], log["session_id"], inst))
    pos = np.empty(n, dtype=int)
    starts = np.r_[0, np.nonzero(np.diff(inst[order]))[0] + 1]
    counts = np.diff(np.r_[starts, n])
    pos[order] = np.arange(n) - np.repeat(starts, counts)
    state = StateBatch(uid.size, spec)
    feats = np.empty((n, 5, 8))
    prev_level = np.empty(n, dtype=int)
    by_pos = np.argsort(pos, kind="stable")
    bounds = np.r_[0, np.nonzero(np.diff(pos[by_pos]))[0] + 1, n]
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        rows = by_pos[lo:hi]
        users = inst[rows]
        fresh = log["segment_idx"][rows] == 0
        if fresh.any():
            state.new_session(users[fresh])
        state.push_segment(users, log["level"][rows], log["bitrate_kbps"][rows], log["throughput_kbps"][rows],
                           log["stall_s"][rows], segment_length_s)
        sub = state.take(users)
        feats[rows] = sub.features()
        prev_level[rows] = sub.prev_level
        ex = log["exited"][rows]
        if ex.any():
            state.mark_exit(users[ex])
    return {"features": feats, "prev_level": prev_level}


def select_rows(log: dict, which: str) -> np.ndarray:
    if which == "stall":
        return log["stall_s"] > 0
    if which == "stall_switch":
        return (log["stall_s"] > 0) | log["switched"]
    if which == "all":
        return np.ones(log["stall_s"].size, dtype=bool)
    raise ValueError(f"row set must be one of {ROW_SETS}")


def build_os_tables(log: dict, prev_level, n_levels: int, min_count: int = 50) -> OSTables:
    return OSTables(n_levels, min_count).fit(log["level"], prev_level, log["stall_s"], log["exited"])


def train_predictor(log: dict, manifest: VideoManifest, spec: FeatureSpec, *, rows: str = "stall",
                    lr: float = 0.01, epochs: int = 40, batch_size: int = 64, seed: int = 0,
                    balanced: bool = True, replay: dict | None = None):
    """Fit the network on the chosen rows and the OS tables on all rows.

    Returns ``(HybridExitPredictor, metrics)``; metrics are on a stratified
    held-out 20% of the chosen rows.
    """
    replay = replay or replay_features(log, manifest.segment_length_s, spec)
    mask = select_rows(log, rows)
    clf, metrics = train_exit_net(replay["features"][mask], log["exited"][mask].astype(int), lr=lr, epochs=epochs,
                                  batch_size=batch_size, seed=seed, balanced=balanced)
    tables = build_os_tables(log, replay["prev_level"], manifest.n_levels)
    metrics.update(rows=rows, balanced=balanced, seed=seed, prior_odds=clf.prior_odds_)
    return HybridExitPredictor(clf.net_, tables, spec, clf.prior_odds_), metrics


__all__ = ["LOG_HEADER", "ROW_SETS", "log_from_result", "write_log", "read_log", "replay_features", "select_rows",
           "build_os_tables", "train_predictor", "ExitNetClassifier", "classification_metrics"]
