"""Experiment configuration (JSON) and the objects it resolves to."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..abr import make_abr
from ..core import PARAM_TYPES, default_manifest, load_manifest, load_trace, synthetic_traces
from ..engine import MODES
from ..montecarlo import MCConfig
from ..users import grid, load_calibration, sample_hazard_users


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything one run needs.

    ``traces`` is ``{"synthetic": {...synthetic_traces kwargs}}`` or
    ``{"path": dir_of_csvs}``; ``users`` is ``{"kind": "rule_grid"}`` or
    ``{"kind": "hazard", "n": int, "seed": int, "calibration": path|None}``.
    ``pairing`` is ``"all"`` (every user on every trace) or ``"round_robin"``
    (user ``i`` on trace ``i mod n_traces``).
    """

    abr: str = "mpc"
    mode: str = "fixed"
    manifest: str | None = None
    num_segments: int = 15
    traces: dict = field(default_factory=lambda: {"synthetic": {"n": 20, "seed": 1}})
    users: dict = field(default_factory=lambda: {"kind": "rule_grid"})
    pairing: str = "all"
    abr_options: dict = field(default_factory=dict)
    fixed_params: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    predictor: str | None = None
    mc: dict = field(default_factory=lambda: {"samples": 100})
    obo: dict = field(default_factory=lambda: {"trials": 10, "eta": 2})
    seeds: list = field(default_factory=lambda: [0])
    root_seed: int = 0
    sessions_per_day: int = 5
    days: int = 1
    buffer_max: float = 10.0
    rtt: float = 0.0
    chunk_cells: int = 512
    jobs: int = 0
    out: str = "results"

    def validate(self, base: Path | None = None) -> "ExperimentConfig":
        if self.abr not in PARAM_TYPES:
            raise ConfigError(f"abr must be one of {sorted(PARAM_TYPES)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.pairing not in ("all", "round_robin"):
            raise ConfigError("pairing must be 'all' or 'round_robin'")
        if not self.seeds:
            raise ConfigError("no seeds")
        if self.mode != "fixed" and not self.predictor:
            raise ConfigError(f"mode {self.mode} needs a predictor artifact")
        if self.mode == "lingxi_fixed" and not self.candidates:
            raise ConfigError("mode lingxi_fixed needs a candidate list")
        for name in ("manifest", "predictor"):
            p = getattr(self, name)
            if p and not self.resolve(p, base).exists():
                raise ConfigError(f"{name} file not found: {p}")
        if "path" in self.traces and not self.resolve(self.traces["path"], base).is_dir():
            raise ConfigError(f"trace directory not found: {self.traces['path']}")
        if self.users.get("kind") not in ("rule_grid", "hazard"):
            raise ConfigError("users.kind must be 'rule_grid' or 'hazard'")
        ptype = PARAM_TYPES[self.abr]
        for p in list(self.fixed_params) + list(self.candidates):
            self.make_params(p, ptype)
        MCConfig(**self.mc)
        return self

    @staticmethod
    def resolve(p, base: Path | None) -> Path:
        p = Path(p)
        return p if p.is_absolute() or base is None else base / p

    @staticmethod
    def make_params(d: dict, ptype):
        try:
            return ptype(**{k: v for k, v in d.items() if k != "kind"})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad parameters {d}: {exc}") from exc

    # -- loading -------------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
        cfg = cls.from_dict(data)
        cfg._base = path.parent
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def base(self) -> Path | None:
        return getattr(self, "_base", None)

    # -- resolved objects ---------------------------------------------------------
    def build_manifest(self):
        if self.manifest:
            return load_manifest(self.resolve(self.manifest, self.base))
        return default_manifest(self.num_segments)

    def build_traces(self):
        if "path" in self.traces:
            d = self.resolve(self.traces["path"], self.base)
            files = sorted(d.glob("*.csv"))
            if not files:
                raise ConfigError(f"no trace CSVs in {d}")
            return [load_trace(f) for f in files]
        return synthetic_traces(**self.traces["synthetic"])

    def build_users(self, n_levels: int):
        u = self.users
        if u["kind"] == "rule_grid":
            return grid()
        cal = load_calibration(self.resolve(u["calibration"], self.base)) if u.get("calibration") else None
        return sample_hazard_users(int(u.get("n", 50)), int(u.get("seed", 0)), cal, n_levels=n_levels)

    def build_abr(self, params=None):
        abr = make_abr(self.abr, **self.abr_options)
        if params is not None:
            abr.update(params)
        return abr

    def param_type(self):
        return PARAM_TYPES[self.abr]

    def mc_config(self) -> MCConfig:
        return MCConfig(**self.mc)
