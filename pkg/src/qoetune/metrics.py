"""Session scoring: linear QoE, completion rate and stall-exit rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import SegmentOutcome, VideoManifest

EXIT_CAUSES = ("stall", "random", "none")


@dataclass(frozen=True)
class SessionTrace:
    """One playback session.

    ``exited_at`` is the index of the segment during which the user left;
    segments before it count as watched.
    """

    outcomes: tuple[SegmentOutcome, ...]
    exited_at: int | None = None
    exit_cause: str = "none"
    user_id: str = ""
    segment_length_s: float = 1.0
    watch_time: float = field(default=-1.0)

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        if self.exit_cause not in EXIT_CAUSES:
            raise ValueError(f"exit_cause must be one of {EXIT_CAUSES}")
        if self.exited_at is not None and not 0 <= self.exited_at < len(self.outcomes):
            raise ValueError("exited_at must index into outcomes")
        if self.watch_time < 0:
            object.__setattr__(self, "watch_time", self.segments_watched * self.segment_length_s)

    @property
    def segments_watched(self) -> int:
        return self.exited_at if self.exited_at is not None else len(self.outcomes)

    @property
    def stall_times(self) -> np.ndarray:
        return np.array([o.stall_time for o in self.outcomes])

    @property
    def levels(self) -> np.ndarray:
        return np.array([o.level_index for o in self.outcomes], dtype=int)

    @property
    def total_stall(self) -> float:
        return float(self.stall_times.sum()) if self.outcomes else 0.0

    @property
    def stall_count(self) -> int:
        return int(np.count_nonzero(self.stall_times > 0)) if self.outcomes else 0


def qoe_lin_arrays(qualities, stalls, stall_weight: float, switch_weight: float = 1.0) -> float:
    q = np.asarray(qualities, dtype=float)
    t = np.asarray(stalls, dtype=float)
    return float(q.sum() - stall_weight * t.sum() - switch_weight * np.abs(np.diff(q)).sum())


def qoe_lin(trace: SessionTrace, manifest: VideoManifest, stall_weight: float | None = None,
            switch_weight: float = 1.0) -> float:
    """Quality sum minus weighted stall time minus weighted quality changes.

    ``stall_weight`` defaults to the ladder's top quality value.
    """
    if not trace.outcomes:
        raise ValueError("trace has no segments")
    if stall_weight is None:
        stall_weight = manifest.max_quality
    q = manifest.qualities[trace.levels]
    return qoe_lin_arrays(q, trace.stall_times, stall_weight, switch_weight)


def completion_rate(traces: Sequence[SessionTrace], manifest: VideoManifest) -> float:
    if not manifest.bounded:
        raise ValueError("completion rate needs a bounded video (num_segments > 0)")
    if not traces:
        raise ValueError("no traces")
    done = sum(1 for t in traces if t.exited_at is None and len(t.outcomes) >= manifest.num_segments)
    return done / len(traces)


def stall_exit_counts(traces: Sequence[SessionTrace]) -> tuple[int, int]:
    """``(stalls followed by an exit at that or the next segment, total stalls)``."""
    hits = total = 0
    for tr in traces:
        stalled = np.nonzero(tr.stall_times > 0)[0] if tr.outcomes else np.array([], dtype=int)
        total += stalled.size
        if tr.exited_at is not None:
            hits += int(np.count_nonzero((stalled == tr.exited_at) | (stalled + 1 == tr.exited_at)))
    return hits, total


def stall_exit_rate(traces: Sequence[SessionTrace], min_stalls: int = 1) -> float | None:
    """Fraction of stalls followed by an exit; ``None`` below ``min_stalls`` stalls."""
    hits, total = stall_exit_counts(traces)
    if total < max(min_stalls, 1):
        return None
    return hits / total
