"""Synthetic user engagement models.

Two families drive exits in simulation:

* :class:`RuleUser` -- deterministic: leaves once the session's cumulative
  stall time or stall count reaches a threshold. The 8x8 grid of thresholds
  in ``{2..9}`` is :func:`grid`.
* :class:`HazardUser` -- stochastic per-segment exit probability built from
  a base rate, per-level quality offsets, a switch offset and a stall
  response curve.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

SHAPES = ("linear", "threshold", "saturating")


@dataclass(frozen=True)
class RuleUser:
    stall_time_threshold: int
    stall_count_threshold: int

    def __post_init__(self):
        for name in ("stall_time_threshold", "stall_count_threshold"):
            v = getattr(self, name)
            if int(v) != v or not 2 <= v <= 9:
                raise ValueError(f"{name} must be an integer in [2, 9], got {v!r}")

    @property
    def user_id(self) -> str:
        return f"rule_{self.stall_time_threshold}_{self.stall_count_threshold}"

    @property
    def threshold_sum(self) -> int:
        return self.stall_time_threshold + self.stall_count_threshold


def rule_exit(user: RuleUser, cumulative_stall: float, stall_count: int) -> bool:
    return cumulative_stall >= user.stall_time_threshold or stall_count >= user.stall_count_threshold


def grid() -> list[RuleUser]:
    return [RuleUser(t, c) for t, c in itertools.product(range(2, 10), range(2, 10))]


@dataclass(frozen=True)
class StallResponse:
    """Monotone map from a segment's stall seconds to added exit probability.

    ``linear``: ``min(slope * s, cap)``; ``threshold``: ``low`` below ``tau``
    and ``high`` from ``tau`` on; ``saturating``: ``cap * (1 - exp(-s/scale))``.
    Zero stall always maps to zero.
    """

    shape: str
    slope: float = 0.0
    cap: float = 1.0
    tau: float = 1.0
    low: float = 0.0
    high: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}")
        if self.shape == "threshold" and not 0 <= self.low <= self.high <= 1:
            raise ValueError("threshold response needs 0 <= low <= high <= 1")
        if self.slope < 0 or not 0 <= self.cap <= 1 or self.scale <= 0:
            raise ValueError("invalid stall response parameters")

    def __call__(self, stall_s):
        s = np.asarray(stall_s, dtype=float)
        if self.shape == "linear":
            p = np.minimum(self.slope * s, self.cap)
        elif self.shape == "threshold":
            p = np.where(s >= self.tau, self.high, self.low)
        else:
            p = self.cap * (1.0 - np.exp(-s / self.scale))
        p = np.where(s > 0, p, 0.0)
        return float(p) if p.ndim == 0 else p

    @property
    def max_effect(self) -> float:
        if self.shape == "linear":
            return self.cap if self.slope > 0 else 0.0
        if self.shape == "threshold":
            return self.high
        return self.cap


@dataclass(frozen=True)
class HazardUser:
    base_rate: float
    quality_deltas: tuple[float, ...]
    switch_delta: float
    stall_response: StallResponse
    user_id: str = ""
    archetype: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "quality_deltas", tuple(float(d) for d in self.quality_deltas))
        if not 0 <= self.base_rate <= 1:
            raise ValueError("base_rate must be a probability")


def hazard_exit_prob(user: HazardUser, level: int, switched: bool, stall_time: float) -> float:
    p = user.base_rate + user.quality_deltas[level] + (user.switch_delta if switched else 0.0)
    p += user.stall_response(stall_time)
    return min(max(p, 0.0), 1.0)


@dataclass(frozen=True)
class Calibration:
    base_rate: tuple[float, float]
    quality_deltas: tuple[float, ...]
    switch_delta: float
    archetypes: tuple[dict, ...]
    synthetic: bool = True

    def validate(self):
        """Enforce the quality < switch < stall effect-size hierarchy."""
        q = max(abs(d) for d in self.quality_deltas)
        s = abs(self.switch_delta)
        stall = max(_archetype_max_effect(a) for a in self.archetypes)
        if not q < s < stall:
            raise ValueError(f"calibration breaks effect hierarchy: quality {q:g}, switch {s:g}, stall {stall:g}")
        if not (1e-4 <= q < 1e-2 and 1e-3 <= s < 1e-1 and stall >= 1e-2):
            raise ValueError("calibration effect sizes outside the 1e-3/1e-2/1e-1 bands")
        weights = [a["weight"] for a in self.archetypes]
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise ValueError("archetype weights must be non-negative and sum to 1")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "Calibration":
        return cls(tuple(data["base_rate"]), tuple(data["quality_deltas"]), float(data["switch_delta"]),
                   tuple(data["archetypes"]), bool(data.get("synthetic", True))).validate()


def _upper(v):
    return v[1] if isinstance(v, (list, tuple)) else v


def _archetype_max_effect(a: dict) -> float:
    if a["shape"] == "threshold":
        return float(a["high"])
    return float(_upper(a["cap"]))


def load_calibration(path=None) -> Calibration:
    if path is None:
        text = resources.files("qoetune.data").joinpath("calibration.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return Calibration.from_dict(json.loads(text))


def _draw(rng, v):
    if isinstance(v, (list, tuple)):
        return float(rng.uniform(v[0], v[1]))
    return float(v)


def sample_hazard_users(n: int, seed: int, calibration: Calibration | None = None,
                        n_levels: int | None = None) -> list[HazardUser]:
    """Draw ``n`` users from the calibrated archetype mixture."""
    cal = calibration or load_calibration()
    rng = np.random.default_rng(seed)
    deltas = list(cal.quality_deltas)
    if n_levels is not None and n_levels != len(deltas):
        deltas = list(np.interp(np.linspace(0, 1, n_levels), np.linspace(0, 1, len(deltas)), deltas))
    weights = np.array([a["weight"] for a in cal.archetypes])
    users = []
    for i in range(n):
        a = cal.archetypes[rng.choice(len(cal.archetypes), p=weights)]
        kw = {k: _draw(rng, a[k]) for k in ("slope", "cap", "tau", "low", "high", "scale") if k in a}
        users.append(HazardUser(base_rate=_draw(rng, cal.base_rate), quality_deltas=tuple(deltas),
                                switch_delta=cal.switch_delta,
                                stall_response=StallResponse(a["shape"], **kw),
                                user_id=f"hz{i:03d}", archetype=a["name"]))
    return users


class UserBatch:
    """Vectorised exit model over rows of possibly different users.

    Rule users and hazard users can be mixed; each row carries the
    parameters of its user.
    """

    _SHAPE_CODE = {s: i for i, s in enumerate(SHAPES)}

    def __init__(self, users: Sequence[RuleUser | HazardUser], n_levels: int):
        n = len(users)
        self.users = list(users)
        self.is_rule = np.array([isinstance(u, RuleUser) for u in users])
        self.t_thr = np.array([u.stall_time_threshold if isinstance(u, RuleUser) else np.inf for u in users], float)
        self.c_thr = np.array([u.stall_count_threshold if isinstance(u, RuleUser) else np.inf for u in users], float)
        self.base = np.zeros(n)
        self.qd = np.zeros((n, n_levels))
        self.sd = np.zeros(n)
        self.shape = np.zeros(n, dtype=int)
        self.par = np.zeros((n, 6))  # slope, cap, tau, low, high, scale
        for i, u in enumerate(users):
            if isinstance(u, HazardUser):
                if len(u.quality_deltas) != n_levels:
                    raise ValueError(f"user {u.user_id} has {len(u.quality_deltas)} quality deltas, ladder has {n_levels}")
                r = u.stall_response
                self.base[i], self.qd[i], self.sd[i] = u.base_rate, u.quality_deltas, u.switch_delta
                self.shape[i] = self._SHAPE_CODE[r.shape]
                self.par[i] = (r.slope, r.cap, r.tau, r.low, r.high, r.scale)

    def stall_response(self, rows, stall):
        p = self.par[rows]
        lin = np.minimum(p[:, 0] * stall, p[:, 1])
        thr = np.where(stall >= p[:, 2], p[:, 4], p[:, 3])
        sat = p[:, 1] * (1.0 - np.exp(-stall / p[:, 5]))
        out = np.choose(self.shape[rows], [lin, thr, sat])
        return np.where(stall > 0, out, 0.0)

    def hazard_prob(self, rows, level, switched, stall):
        p = self.base[rows] + self.qd[rows, level] + np.where(switched, self.sd[rows], 0.0)
        return np.clip(p + self.stall_response(rows, stall), 0.0, 1.0)

    def rule_exit(self, rows, cum_stall, count):
        return (cum_stall >= self.t_thr[rows]) | (count >= self.c_thr[rows])


def synthesize_logs(users, traces, manifest, abr, seed: int, *, sessions_per_day: int = 20,
                    days: int = 1, buffer_max: float = 10.0):
    """Play every (user, trace) pair and sample exits from the user model.

    Returns the recorded :class:`qoetune.engine.SimulationResult`; pass it to
    :func:`qoetune.harness.logs.log_from_result` for per-segment log rows.
    Output is a pure function of the inputs and ``seed``.
    """
    from .engine import SimulationSetup, simulate_fixed

    setup = SimulationSetup(manifest=manifest, traces=list(traces), buffer_max=buffer_max,
                            sessions_per_day=sessions_per_day, days=days)
    pairs = [(u, t) for u in users for t in range(len(traces))]
    return simulate_fixed(setup, [u for u, _ in pairs], [t for _, t in pairs], abr, seed=seed,
                          record=True)
