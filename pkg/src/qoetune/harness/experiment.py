"""Experiment runner: cells, modes, result files."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..core import params_to_json
from ..engine import SimulationSetup, TunerConfig, simulate
from ..predictor.hybrid import HybridExitPredictor
from .config import ExperimentConfig
from .state import PersistedUserState, StallEvent

RESULTS_HEADER = ["mode", "abr", "user_id", "trace_id", "seed", "completion", "qoe_lin", "total_stall_s",
                  "stall_exit_rate", "final_param_json"]
DAYS_HEADER = ["mode", "abr", "user_id", "trace_id", "seed", "day", "stalls", "stall_exits", "stall_exit_rate",
               "mean_param_json", "invocations", "mean_selected_param_json"]
OBO_HEADER = ["user_id", "invocation", "trial", "param_json", "estimated_exit_rate", "is_best"]
INVOCATION_HEADER = ["user_id", "trace_id", "seed", "invocation", "day", "session", "segment", "param_json"]


class CellError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    user: int
    trace: int
    seed: int

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.user, self.trace, self.seed)


def enumerate_cells(cfg: ExperimentConfig, n_users: int, n_traces: int) -> list[Cell]:
    cells = []
    for s in cfg.seeds:
        for u in range(n_users):
            traces = range(n_traces) if cfg.pairing == "all" else [u % n_traces]
            cells.extend(Cell(u, t, int(s)) for t in traces)
    return cells


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def _instance_id(user_id, trace_id, seed) -> str:
    return f"{user_id}@{trace_id}#s{seed}"


class Experiment:
    """Resolved configuration plus the shared objects every chunk needs."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate(cfg.base)
        self.manifest = cfg.build_manifest()
        self.traces = cfg.build_traces()
        self.users = cfg.build_users(self.manifest.n_levels)
        self.ptype = cfg.param_type()
        self.setup = SimulationSetup(self.manifest, self.traces, buffer_max=cfg.buffer_max, rtt=cfg.rtt,
                                     sessions_per_day=cfg.sessions_per_day, days=cfg.days)
        self.cells = enumerate_cells(cfg, len(self.users), len(self.traces))
        self.predictor = None
        if cfg.mode != "fixed":
            self.predictor = HybridExitPredictor.load(cfg.resolve(cfg.predictor, cfg.base))
            self.setup.feature_spec = self.predictor.spec

    def variants(self) -> list:
        """Parameter sets to run: the fixed sweep, or the single starting default for tuned modes."""
        if self.cfg.mode == "fixed" and self.cfg.fixed_params:
            return [self.cfg.make_params(p, self.ptype) for p in self.cfg.fixed_params]
        return [None]

    def tuner(self) -> TunerConfig | None:
        if self.cfg.mode == "fixed":
            return None
        obo = dict(self.cfg.obo)
        cands = tuple(self.cfg.make_params(p, self.ptype).as_vector() for p in self.cfg.candidates)
        return TunerConfig(mode=self.cfg.mode, predictor=self.predictor, eta=int(obo.get("eta", 2)),
                           trials=int(obo.get("trials", 10)), candidates=cands, mc=self.cfg.mc_config(),
                           gp=dict(obo.get("gp", {})), acquisition=obo.get("acquisition", "ei"))

    def run_chunk(self, variant, lo: int, hi: int):
        cells = self.cells[lo:hi]
        abr = self.cfg.build_abr(variant)
        try:
            return simulate(self.setup, [self.users[c.user] for c in cells], [c.trace for c in cells], abr,
                            seed=self.cfg.root_seed, cell_keys=[c.key for c in cells], tuner=self.tuner())
        except Exception as exc:  # abort with the identity of the failing cells
            first, last = cells[0], cells[-1]
            raise CellError(f"cells {first.key}..{last.key} failed: {exc!r}") from exc


_WORKER: Experiment | None = None


def _init_worker(cfg_dict, base):
    global _WORKER
    cfg = ExperimentConfig.from_dict(cfg_dict)
    cfg._base = base
    _WORKER = Experiment(cfg)


def _run_in_worker(args):
    return _WORKER.run_chunk(*args)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Simulate every cell and write the result files; returns their paths and the summary."""
    exp = Experiment(cfg)
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    n = len(exp.cells)
    chunks = [(v, lo, min(lo + cfg.chunk_cells, n)) for v in exp.variants() for lo in range(0, n, cfg.chunk_cells)]
    jobs = cfg.jobs or os.cpu_count() or 1
    if jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(cfg.to_dict(), cfg.base)) as pool:
            results = list(pool.map(_run_in_worker, chunks))
    else:
        results = [exp.run_chunk(*c) for c in chunks]
    return write_outputs(exp, chunks, results, out)


def write_outputs(exp: Experiment, chunks, results, out: Path) -> dict:
    cfg = exp.cfg
    rows, day_rows, obo_rows, inv_rows = [], [], [], []
    states = []
    for (variant, lo, hi), res in zip(chunks, results):
        cells = exp.cells[lo:hi]
        comp = res.completion()
        qoe = res.qoe_lin()
        stall = res.total_stall()
        ser = res.stall_exit_rate()
        spd = cfg.sessions_per_day
        inv_count = {}
        selected: dict = {}
        for inv in res.invocations:
            selected.setdefault((inv.cell, inv.day), []).append(inv.params)
        for i, c in enumerate(cells):
            uid = res.user_ids[i]
            tid = res.trace_ids[i]
            final = exp.ptype.from_vector(res.final_params[i])
            rows.append([cfg.mode, cfg.abr, uid, tid, c.seed, _fmt(comp[i]), _fmt(qoe[i]), _fmt(stall[i]),
                         _fmt(ser[i]), params_to_json(final)])
            for d in range(cfg.days):
                hits, tot = res.stall_exit_counts(slice(d * spd, (d + 1) * spd))
                rate = hits[i] / tot[i] if tot[i] else float("nan")
                sel = selected.get((i, d), [])
                sel_json = params_to_json(exp.ptype.from_vector(np.mean(sel, axis=0))) if sel else ""
                day_rows.append([cfg.mode, cfg.abr, uid, tid, c.seed, d, int(tot[i]), int(hits[i]), _fmt(rate),
                                 params_to_json(exp.ptype.from_vector(res.day_param_mean[i, d])), len(sel), sel_json])
        for inv in res.invocations:
            c = cells[inv.cell]
            k = inv_count.get(inv.cell, 0)
            inv_count[inv.cell] = k + 1
            inv_rows.append([res.user_ids[inv.cell], res.trace_ids[inv.cell], c.seed, k, inv.day, inv.session,
                             inv.segment, params_to_json(exp.ptype.from_vector(inv.params))])
        by_inv: dict = {}
        for cell, trial in res.trials:
            by_inv.setdefault((cell, trial.invocation), []).append(trial)
        for (cell, inv), trials in by_inv.items():
            best = int(np.argmin([t.value for t in trials]))
            c = cells[cell]
            iid = _instance_id(res.user_ids[cell], res.trace_ids[cell], c.seed)
            for j, t in enumerate(trials):
                obo_rows.append([iid, inv, t.trial, params_to_json(exp.ptype.from_vector(t.x)), _fmt(t.value),
                                 int(j == best)])
        if variant is None or len(exp.variants()) == 1:
            states.extend(_cell_states(exp, cells, res))

    paths = {"results": out / "results.csv", "days": out / "days.csv"}
    _write_csv(paths["results"], RESULTS_HEADER, rows)
    _write_csv(paths["days"], DAYS_HEADER, day_rows)
    if cfg.mode != "fixed":
        paths["obo_trace"] = out / "obo_trace.csv"
        paths["invocations"] = out / "invocations.csv"
        _write_csv(paths["obo_trace"], OBO_HEADER, obo_rows)
        _write_csv(paths["invocations"], INVOCATION_HEADER, inv_rows)
    from .reports import summarize, write_json

    summary = summarize(paths["results"])
    paths["summary"] = out / "summary.json"
    write_json(paths["summary"], summary)
    if states:
        sdir = out / "state"
        sdir.mkdir(exist_ok=True)
        from .state import persist_state
        for st in states:
            persist_state(st, sdir / f"{st.user_id}.json")
    return {"paths": {k: str(v) for k, v in paths.items()}, "summary": summary}


def _cell_states(exp: Experiment, cells, res) -> list[PersistedUserState]:
    out = []
    spd = exp.cfg.sessions_per_day
    hits, _ = res.stall_exit_counts()
    for i, c in enumerate(cells):
        st = res.stall[i]
        ev = [StallEvent(int(s // spd), int(s), int(k), float(st[s, k])) for s, k in zip(*np.nonzero(st > 0))]
        counters = {"sessions": int(st.shape[0]), "completed": int((res.exited_at[i] < 0).sum()),
                    "exits": int((res.exited_at[i] >= 0).sum()), "stalls": len(ev), "stall_exits": int(hits[i]),
                    "invocations": sum(1 for inv in res.invocations if inv.cell == i)}
        out.append(PersistedUserState(_instance_id(res.user_ids[i], res.trace_ids[i], c.seed), ev,
                                      exp.ptype.from_vector(res.final_params[i]), counters))
    return out


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def default_sweep(ptype, n: int = 5) -> list[dict]:
    """Evenly spaced grid over the parameter box, ``n`` points per axis."""
    axes = [np.linspace(lo, hi, n) for lo, hi in ptype.box]
    mesh = np.meshgrid(*axes, indexing="ij")
    return [{name: float(m.ravel()[i]) for name, m in zip(ptype.names, mesh)} for i in range(mesh[0].size)]
