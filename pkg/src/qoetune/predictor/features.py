"""Per-user QoS/engagement state and its 5x8 feature matrix.

Channels, oldest position first and newest last:

0. bitrate of the last 8 segments / ``bitrate_scale``
1. throughput of the last 8 segments / ``throughput_scale``
2. duration of the last 8 stall events / ``stall_scale``
3. seconds since the previous stall, per stall event / ``gap_scale``
4. seconds since the previous stall-triggered exit, per stall event / ``gap_scale``

Missing history is zero. Intervals run on the user's viewing clock (segment
playback plus stall time) and are capped at ``gap_cap`` seconds; "no
previous event" also maps to the cap. An exit is stall-triggered when the
exit segment or the one before it (same session) stalled.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

WINDOW = 8
N_CHANNELS = 5


@dataclass(frozen=True)
class FeatureSpec:
    bitrate_scale: float = 2850.0
    throughput_scale: float = 4000.0
    stall_scale: float = 5.0
    gap_scale: float = 120.0
    gap_cap: float = 600.0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def for_setup(cls, manifest, traces=None, **kw) -> "FeatureSpec":
        """Bitrate scaled by the ladder top, throughput by the traces' 95th percentile."""
        thr = float(np.percentile(np.concatenate([t.throughputs for t in traces]), 95)) if traces else 4000.0
        return cls(bitrate_scale=float(manifest.max_bitrate), throughput_scale=thr, **kw)


@dataclass(frozen=True)
class SegmentRecord:
    bitrate_kbps: float
    throughput_kbps: float
    stall_s: float
    exited: bool = False
    session_start: bool = False
    segment_length_s: float = 2.0


def build_features(history: Sequence[SegmentRecord], spec: FeatureSpec = FeatureSpec()) -> np.ndarray:
    """Feature matrix after the last record in ``history`` (direct construction)."""
    clock = 0.0
    last_stall = None
    last_exit = None
    stalls = []  # (duration, gap, exit_gap)
    prev_stall_clock = None  # stall clock of the previous segment in the same session
    for rec in history:
        if rec.session_start:
            prev_stall_clock = None
        this_stall_clock = None
        if rec.stall_s > 0:
            gap = spec.gap_cap if last_stall is None else min(clock - last_stall, spec.gap_cap)
            egap = spec.gap_cap if last_exit is None else min(clock - last_exit, spec.gap_cap)
            stalls.append((rec.stall_s, gap, egap))
            last_stall = this_stall_clock = clock
        if rec.exited:
            trig = this_stall_clock if this_stall_clock is not None else prev_stall_clock
            if trig is not None:
                last_exit = trig
        prev_stall_clock = this_stall_clock
        clock += rec.stall_s + rec.segment_length_s

    out = np.zeros((N_CHANNELS, WINDOW))
    segs = history[-WINDOW:]
    for j, rec in enumerate(segs):
        pos = WINDOW - len(segs) + j
        out[0, pos] = rec.bitrate_kbps / spec.bitrate_scale
        out[1, pos] = rec.throughput_kbps / spec.throughput_scale
    ev = stalls[-WINDOW:]
    for j, (d, g, e) in enumerate(ev):
        pos = WINDOW - len(ev) + j
        out[2, pos] = d / spec.stall_scale
        out[3, pos] = g / spec.gap_scale
        out[4, pos] = e / spec.gap_scale
    return out


class StateBatch:
    """Rolling user state for many rows at once (one row per user/rollout).

    Besides the feature windows this carries the context the hybrid
    predictor needs for the current segment: its level, whether it switched
    and its stall.
    """

    _ARRAYS = ("bitrate", "throughput", "stall", "gap", "exit_gap", "n_seg", "n_stall", "clock",
               "last_stall_clock", "last_exit_clock", "prev_stall_clock", "cur_stall_clock", "level", "prev_level",
               "cur_stall")

    def __init__(self, n: int = 1, spec: FeatureSpec = FeatureSpec()):
        self.spec = spec
        self.bitrate = np.zeros((n, WINDOW))
        self.throughput = np.zeros((n, WINDOW))
        self.stall = np.zeros((n, WINDOW))
        self.gap = np.zeros((n, WINDOW))
        self.exit_gap = np.zeros((n, WINDOW))
        self.n_seg = np.zeros(n, dtype=int)
        self.n_stall = np.zeros(n, dtype=int)
        self.clock = np.zeros(n)
        self.last_stall_clock = np.full(n, np.nan)
        self.last_exit_clock = np.full(n, np.nan)
        self.prev_stall_clock = np.full(n, np.nan)
        self.cur_stall_clock = np.full(n, np.nan)
        self.level = np.full(n, -1, dtype=int)
        self.prev_level = np.full(n, -1, dtype=int)
        self.cur_stall = np.zeros(n)

    def __len__(self):
        return self.clock.size

    def take(self, idx) -> "StateBatch":
        out = StateBatch.__new__(StateBatch)
        out.spec = self.spec
        for name in self._ARRAYS:
            setattr(out, name, getattr(self, name)[idx].copy())
        return out

    def assign(self, idx, other: "StateBatch"):
        for name in self._ARRAYS:
            getattr(self, name)[idx] = getattr(other, name)

    @property
    def switched(self) -> np.ndarray:
        return (self.prev_level >= 0) & (self.level >= 0) & (self.level != self.prev_level)

    def new_session(self, rows=None):
        rows = slice(None) if rows is None else rows
        self.level[rows] = -1
        self.prev_level[rows] = -1
        self.cur_stall[rows] = 0.0
        self.prev_stall_clock[rows] = np.nan
        self.cur_stall_clock[rows] = np.nan

    def push_segment(self, rows, level, bitrate, throughput, stall, segment_length_s):
        rows = np.asarray(rows)
        cap = self.spec.gap_cap
        self.bitrate[rows] = np.roll(self.bitrate[rows], -1, axis=1)
        self.bitrate[rows, -1] = bitrate
        self.throughput[rows] = np.roll(self.throughput[rows], -1, axis=1)
        self.throughput[rows, -1] = throughput
        self.n_seg[rows] += 1
        stall = np.broadcast_to(np.asarray(stall, dtype=float), rows.shape)
        st = stall > 0
        c = self.clock[rows]
        if st.any():
            r = rows[st]
            cs = c[st]
            gap = np.where(np.isnan(self.last_stall_clock[r]), cap, np.minimum(cs - self.last_stall_clock[r], cap))
            egap = np.where(np.isnan(self.last_exit_clock[r]), cap, np.minimum(cs - self.last_exit_clock[r], cap))
            for arr, val in ((self.stall, stall[st]), (self.gap, gap), (self.exit_gap, egap)):
                arr[r] = np.roll(arr[r], -1, axis=1)
                arr[r, -1] = val
            self.n_stall[r] += 1
            self.last_stall_clock[r] = cs
        self.prev_stall_clock[rows] = self.cur_stall_clock[rows]
        self.cur_stall_clock[rows] = np.where(st, c, np.nan)
        self.prev_level[rows] = self.level[rows]
        self.level[rows] = level
        self.cur_stall[rows] = stall
        self.clock[rows] = c + stall + segment_length_s

    def mark_exit(self, rows):
        """Record exits at the current segment; returns the stall-triggered mask."""
        rows = np.asarray(rows)
        cur = self.cur_stall_clock[rows]
        prev = self.prev_stall_clock[rows]
        trig_clock = np.where(np.isfinite(cur), cur, prev)
        trig = np.isfinite(trig_clock)
        self.last_exit_clock[rows[trig]] = trig_clock[trig]
        return trig

    def features(self) -> np.ndarray:
        s = self.spec
        out = np.empty((len(self), N_CHANNELS, WINDOW))
        out[:, 0] = self.bitrate / s.bitrate_scale
        out[:, 1] = self.throughput / s.throughput_scale
        out[:, 2] = self.stall / s.stall_scale
        out[:, 3] = self.gap / s.gap_scale
        out[:, 4] = self.exit_gap / s.gap_scale
        return out
