"""Domain types, manifest and trace I/O, and the bandwidth model.

Units used throughout the package: bitrates and throughputs in kbps, segment
sizes in megabits, times in seconds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Iterable, Sequence

import numpy as np

from ._validation import check_1d, check_in_range, check_non_negative, check_positive

BANDWIDTH_FLOOR_KBPS = 1.0
SIGMA_FLOOR_KBPS = 1.0


class ManifestError(ValueError):
    """Raised when a manifest fails to parse or violates a ladder invariant."""


class TraceError(ValueError):
    """Raised for malformed bandwidth traces."""


@dataclass(frozen=True)
class QualityLevel:
    bitrate_kbps: float
    quality_value: float
    segment_size_mbit: float


@dataclass(frozen=True)
class VideoManifest:
    """Bitrate ladder plus segment geometry.

    ``num_segments == 0`` marks an unbounded (looping) video.
    """

    levels: tuple[QualityLevel, ...]
    segment_length_s: float
    num_segments: int = 0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ManifestError("levels: ladder must contain at least one level")
        if not (isinstance(self.segment_length_s, (int, float)) and self.segment_length_s > 0):
            raise ManifestError(f"segment_length_s: must be > 0, got {self.segment_length_s!r}")
        if int(self.num_segments) != self.num_segments or self.num_segments < 0:
            raise ManifestError(f"num_segments: must be a non-negative integer, got {self.num_segments!r}")
        for i, lvl in enumerate(self.levels):
            if not lvl.segment_size_mbit > 0:
                raise ManifestError(f"levels[{i}].segment_size_mbit: must be > 0")
            if not lvl.bitrate_kbps > 0:
                raise ManifestError(f"levels[{i}].bitrate_kbps: must be > 0")
        for i in range(1, len(self.levels)):
            prev, cur = self.levels[i - 1], self.levels[i]
            if cur.bitrate_kbps <= prev.bitrate_kbps:
                raise ManifestError(f"levels[{i}].bitrate_kbps: non-monotone ladder")
            if cur.quality_value < prev.quality_value:
                raise ManifestError(f"levels[{i}].quality_value: non-monotone ladder")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def bitrates(self) -> np.ndarray:
        return np.array([lvl.bitrate_kbps for lvl in self.levels], dtype=float)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([lvl.segment_size_mbit for lvl in self.levels], dtype=float)

    @property
    def qualities(self) -> np.ndarray:
        return np.array([lvl.quality_value for lvl in self.levels], dtype=float)

    @property
    def max_bitrate(self) -> float:
        return self.levels[-1].bitrate_kbps

    @property
    def max_quality(self) -> float:
        return self.levels[-1].quality_value

    @property
    def bounded(self) -> bool:
        return self.num_segments > 0

    @property
    def duration_s(self) -> float:
        return self.num_segments * self.segment_length_s

    def download_time(self, level: int, bandwidth_kbps: float) -> float:
        # Mbit / (kbps / 1000) -> s
        return self.levels[level].segment_size_mbit * 1000.0 / bandwidth_kbps

    def to_dict(self) -> dict:
        return {
            "segment_length_s": self.segment_length_s,
            "num_segments": self.num_segments,
            "levels": [
                {
                    "bitrate_kbps": lvl.bitrate_kbps,
                    "quality_value": lvl.quality_value,
                    "segment_size_mbit": lvl.segment_size_mbit,
                }
                for lvl in self.levels
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "VideoManifest":
        try:
            levels = [
                QualityLevel(
                    bitrate_kbps=float(item["bitrate_kbps"]),
                    quality_value=float(item["quality_value"]),
                    segment_size_mbit=float(item["segment_size_mbit"]),
                )
                for item in data["levels"]
            ]
            return cls(levels=tuple(levels), segment_length_s=float(data["segment_length_s"]),
                       num_segments=int(data.get("num_segments", 0)))
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc!r}") from exc

    @classmethod
    def from_bitrates(cls, bitrates_kbps: Sequence[float], segment_length_s: float,
                      num_segments: int = 0, quality_values: Sequence[float] | None = None):
        """Constant-bitrate ladder; quality defaults to level index + 1."""
        if quality_values is None:
            quality_values = [i + 1.0 for i in range(len(bitrates_kbps))]
        levels = tuple(
            QualityLevel(float(b), float(q), float(b) * segment_length_s / 1000.0)
            for b, q in zip(bitrates_kbps, quality_values)
        )
        return cls(levels, float(segment_length_s), int(num_segments))


def load_manifest(path) -> VideoManifest:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest parse error: {exc}") from exc
    return VideoManifest.from_dict(data)


def save_manifest(manifest: VideoManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2))


def default_manifest(num_segments: int = 15) -> VideoManifest:
    """Four-tier LD/SD/HD/FullHD ladder with 2 s segments."""
    return VideoManifest.from_bitrates([750, 1200, 1850, 2850], 2.0, num_segments)


class BandwidthTrace:
    """Throughput samples over time; lookups loop past the last sample."""

    def __init__(self, timestamps, throughputs, trace_id: str = ""):
        ts = check_1d(timestamps, "timestamps")
        tp = check_1d(throughputs, "throughputs")
        if ts.shape != tp.shape:
            raise TraceError("timestamps and throughputs differ in length")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise TraceError("timestamps must be strictly increasing")
        if np.any(tp <= 0):
            raise TraceError("throughput must be > 0")
        ts.setflags(write=False)
        tp.setflags(write=False)
        self.timestamps = ts
        self.throughputs = tp
        self.trace_id = trace_id
        step = float(np.median(np.diff(ts))) if ts.size > 1 else 1.0
        self._period = float(ts[-1] - ts[0]) + step

    def __len__(self):
        return self.timestamps.size

    def __eq__(self, other):
        return (isinstance(other, BandwidthTrace)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.throughputs, other.throughputs))

    def __repr__(self):
        return f"BandwidthTrace(id={self.trace_id!r}, n={len(self)}, mean={self.throughputs.mean():.0f}kbps)"

    @property
    def period(self) -> float:
        return self._period

    def throughput_at(self, t):
        """Piecewise-constant throughput at time(s) ``t``, looping the trace."""
        rel = np.mod(np.asarray(t, dtype=float), self._period) + self.timestamps[0]
        idx = np.searchsorted(self.timestamps, rel, side="right") - 1
        idx = np.clip(idx, 0, len(self) - 1)
        out = self.throughputs[idx]
        return float(out) if np.ndim(out) == 0 else out


def load_trace(path, trace_id: str | None = None) -> BandwidthTrace:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"timestamp_s", "throughput_kbps"}:
            raise TraceError(f"{path}: expected header 'timestamp_s,throughput_kbps'")
        rows = [(float(r["timestamp_s"]), float(r["throughput_kbps"])) for r in reader]
    if not rows:
        raise TraceError(f"{path}: no samples")
    ts, tp = zip(*rows)
    return BandwidthTrace(ts, tp, trace_id=trace_id if trace_id is not None else path.stem)


def save_trace(trace: BandwidthTrace, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp_s", "throughput_kbps"])
        for t, c in zip(trace.timestamps, trace.throughputs):
            writer.writerow([repr(float(t)), repr(float(c))])


def synthetic_traces(n: int, seed: int, *, duration_s: float = 600.0, mean_range=(600.0, 3000.0),
                     volatility: float = 0.35, corr: float = 0.8, outage_prob: float = 0.02,
                     outage_factor: float = 0.15) -> list[BandwidthTrace]:
    """Generate ``n`` one-sample-per-second traces.

    Log-throughput follows an AR(1) process around a per-trace mean drawn
    log-uniformly from ``mean_range``; each second independently drops to
    ``outage_factor`` of its value with probability ``outage_prob``.
    """
    rng = np.random.default_rng(seed)
    steps = int(duration_s)
    ts = np.arange(steps, dtype=float)
    out = []
    lo, hi = np.log(mean_range[0]), np.log(mean_range[1])
    for i in range(n):
        mu = rng.uniform(lo, hi)
        innov = rng.normal(0.0, volatility * math.sqrt(1 - corr**2), size=steps)
        z = np.empty(steps)
        z[0] = rng.normal(0.0, volatility)
        for k in range(1, steps):
            z[k] = corr * z[k - 1] + innov[k]
        tp = np.exp(mu + z - volatility**2 / 2)
        tp = np.where(rng.random(steps) < outage_prob, tp * outage_factor, tp)
        out.append(BandwidthTrace(ts, np.maximum(tp, BANDWIDTH_FLOOR_KBPS), trace_id=f"syn{i:03d}"))
    return out


@dataclass(frozen=True)
class BandwidthModel:
    """Normal model of recent throughput."""

    mean: float
    std: float
    window: int = 0

    def __post_init__(self):
        check_positive(self.mean, "mean")
        check_non_negative(self.std, "std")

    def sample(self, rng: np.random.Generator, size=None):
        """Draw throughputs, sigma floored and truncated below at 1 kbps."""
        sigma = max(self.std, SIGMA_FLOOR_KBPS)
        return np.maximum(rng.normal(self.mean, sigma, size=size), BANDWIDTH_FLOOR_KBPS)

    def lower_bound(self, k: float = 3.0) -> float:
        return self.mean - k * self.std


def fit_bandwidth_model(samples: Iterable[float], window: int = 8) -> BandwidthModel:
    """Sample mean and n-1 standard deviation over the trailing ``window`` samples."""
    arr = np.asarray(list(samples), dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    tail = arr[-window:]
    if tail.size < 2:
        raise ValueError("insufficient samples: need at least 2 in window")
    return BandwidthModel(float(tail.mean()), float(tail.std(ddof=1)), int(tail.size))


@dataclass(frozen=True)
class MPCParams:
    """Stall and switch weights of the linear QoE objective."""

    stall_weight: float = 4.0
    switch_weight: float = 1.0

    kind: ClassVar[str] = "mpc"
    names: ClassVar[tuple[str, ...]] = ("stall_weight", "switch_weight")
    box: ClassVar[tuple[tuple[float, float], ...]] = ((1.0, 20.0), (0.0, 4.0))
    # index of the component whose increase lowers stall risk, and its direction
    risk_axis: ClassVar[tuple[int, int]] = (0, +1)

    def __post_init__(self):
        check_in_range(self.stall_weight, "stall_weight", *self.box[0])
        check_in_range(self.switch_weight, "switch_weight", *self.box[1])

    def as_vector(self) -> np.ndarray:
        return np.array([self.stall_weight, self.switch_weight])

    @classmethod
    def from_vector(cls, v) -> "MPCParams":
        v = np.clip(np.asarray(v, dtype=float), [b[0] for b in cls.box], [b[1] for b in cls.box])
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class HYBParams:
    """Aggressiveness of the buffer/throughput rule."""

    beta: float = 0.5

    kind: ClassVar[str] = "hyb"
    names: ClassVar[tuple[str, ...]] = ("beta",)
    box: ClassVar[tuple[tuple[float, float], ...]] = ((0.1, 1.0),)
    risk_axis: ClassVar[tuple[int, int]] = (0, -1)

    def __post_init__(self):
        check_in_range(self.beta, "beta", 0.0, 1.0, low_open=True)

    def as_vector(self) -> np.ndarray:
        return np.array([self.beta])

    @classmethod
    def from_vector(cls, v) -> "HYBParams":
        v = np.clip(np.asarray(v, dtype=float), cls.box[0][0], cls.box[0][1])
        return cls(float(v[0]))


QoEParams = MPCParams | HYBParams
PARAM_TYPES = {"mpc": MPCParams, "hyb": HYBParams}


def params_to_json(params: QoEParams) -> str:
    return json.dumps({"kind": params.kind, **{n: float(getattr(params, n)) for n in params.names}},
                      sort_keys=True)


def params_from_json(text: str | dict) -> QoEParams:
    data = json.loads(text) if isinstance(text, str) else dict(text)
    cls = PARAM_TYPES[data.pop("kind")]
    return cls(**data)


@dataclass(frozen=True)
class SegmentOutcome:
    level_index: int
    download_time: float
    stall_time: float
    wait_time: float
    buffer_after: float
    throughput_observed: float
    bitrate_kbps: float = field(default=0.0)
