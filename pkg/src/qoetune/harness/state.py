"""Versioned JSON persistence of per-user long-term state."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..core import QoEParams, params_from_json

SCHEMA_VERSION = 1


class StateError(ValueError):
    pass


@dataclass(frozen=True)
class StallEvent:
    day: int
    session: int
    segment: int
    duration_s: float


@dataclass
class PersistedUserState:
    user_id: str
    stall_history: list = field(default_factory=list)  # StallEvent
    x_star: QoEParams | None = None
    counters: dict = field(default_factory=dict)  # sessions, completed, exits, stall_exits, stalls, invocations
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        x = None
        if self.x_star is not None:
            x = {"kind": self.x_star.kind, **{n: float(getattr(self.x_star, n)) for n in self.x_star.names}}
        return {"version": self.version, "user_id": self.user_id,
                "stall_history": [asdict(e) for e in self.stall_history],
                "x_star": x, "counters": {k: int(v) for k, v in sorted(self.counters.items())}}

    @classmethod
    def from_dict(cls, data: dict) -> "PersistedUserState":
        version = data.get("version")
        if not isinstance(version, int):
            raise StateError("corrupt state: missing schema version")
        if version != SCHEMA_VERSION:
            raise StateError(f"unsupported state version {version} (expected {SCHEMA_VERSION})")
        try:
            events = [StallEvent(int(e["day"]), int(e["session"]), int(e["segment"]), float(e["duration_s"]))
                      for e in data["stall_history"]]
            x = data["x_star"]
            return cls(user_id=str(data["user_id"]), stall_history=events,
                       x_star=None if x is None else params_from_json(x),
                       counters={str(k): int(v) for k, v in data["counters"].items()}, version=version)
        except (KeyError, TypeError, ValueError) as exc:
            raise StateError(f"corrupt state: {exc}") from exc


def persist_state(state: PersistedUserState, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(state.to_dict(), sort_keys=True, indent=1))
    tmp.replace(path)


def restore_state(path) -> PersistedUserState:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StateError(f"corrupt state: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise StateError("corrupt state: top level is not an object")
    return PersistedUserState.from_dict(data)
