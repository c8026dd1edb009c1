"""Segment-level playback buffer dynamics.

One call to :func:`step` downloads one segment::

    download  = d(Q) / C
    stall     = max(download - B, 0)
    B'        = max(B - download, 0) + L
    wait      = max(B' - B_max, 0) + RTT
    B_next    = max(B' - wait, 0)

The self-referential wait term is resolved in two phases: the tentative
buffer B' is computed first, then the wait, then the clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from ._validation import check_index, check_non_negative, check_positive
from .core import BandwidthModel, SegmentOutcome, VideoManifest


@dataclass(frozen=True)
class PlayerEnv:
    buffer: float = 0.0
    buffer_max: float = 10.0
    rtt: float = 0.0
    last_level: int = -1
    segments_played: int = 0
    clock: float = 0.0

    def __post_init__(self):
        check_positive(self.buffer_max, "buffer_max")
        check_non_negative(self.rtt, "rtt")
        if not 0.0 <= self.buffer <= self.buffer_max + 1e-9:
            raise ValueError(f"buffer {self.buffer} outside [0, {self.buffer_max}]")


def stall_time(buffer: float, download_time: float) -> float:
    return max(download_time - buffer, 0.0)


def step(env: PlayerEnv, manifest: VideoManifest, level: int, bandwidth_kbps: float):
    """Advance ``env`` by one segment; returns ``(next_env, outcome)``."""
    level = check_index(level, "level", manifest.n_levels)
    check_positive(bandwidth_kbps, "bandwidth_kbps")
    download = manifest.download_time(level, bandwidth_kbps)
    stall = stall_time(env.buffer, download)
    tentative = max(env.buffer - download, 0.0) + manifest.segment_length_s
    wait = max(tentative - env.buffer_max, 0.0) + env.rtt
    nxt = max(tentative - wait, 0.0)
    new_env = replace(env, buffer=nxt, last_level=level, segments_played=env.segments_played + 1,
                      clock=env.clock + download + wait)
    outcome = SegmentOutcome(level, download, stall, wait, nxt, float(bandwidth_kbps),
                             manifest.levels[level].bitrate_kbps)
    return new_env, outcome


def step_arrays(buffer, sizes_mbit, bandwidth_kbps, segment_length_s, buffer_max, rtt=0.0):
    """Vectorised :func:`step` core.

    Returns ``(download, stall, wait, next_buffer)`` arrays broadcast over the
    inputs. Used by the batched simulator and the MPC lookahead.
    """
    download = sizes_mbit * 1000.0 / bandwidth_kbps
    stall = np.maximum(download - buffer, 0.0)
    tentative = np.maximum(buffer - download, 0.0) + segment_length_s
    wait = np.maximum(tentative - buffer_max, 0.0) + rtt
    return download, stall, wait, np.maximum(tentative - wait, 0.0)


BufferCap = Callable[[BandwidthModel | None], float]


def constant_buffer_cap(value: float = 10.0) -> BufferCap:
    def cap(model=None):
        return value
    return cap


def affine_buffer_cap(base: float = 6.0, per_mbps: float = -1.0, low: float = 4.0,
                      high: float = 20.0) -> BufferCap:
    """``B_max = clip(base + per_mbps * mean_Mbps, low, high)``; ``base`` without a model."""
    def cap(model=None):
        if model is None:
            return float(np.clip(base, low, high))
        return float(np.clip(base + per_mbps * model.mean / 1000.0, low, high))
    return cap


def make_buffer_cap(spec: dict | float | None) -> BufferCap:
    """Build a buffer-cap function from its config form."""
    if spec is None:
        return constant_buffer_cap()
    if isinstance(spec, (int, float)):
        return constant_buffer_cap(float(spec))
    spec = dict(spec)
    kind = spec.pop("kind", "constant")
    if kind == "constant":
        return constant_buffer_cap(float(spec.get("value", 10.0)))
    if kind == "affine":
        return affine_buffer_cap(**spec)
    raise ValueError(f"unknown buffer cap kind {kind!r}")
