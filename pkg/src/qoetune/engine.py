"""Lockstep playback simulator for many (user, trace, seed) cells at once.

Every cell plays ``days x sessions_per_day`` sessions of the same video. All
cells advance segment by segment together so the ABR, the exit models and
the Monte Carlo evaluations run as array operations. A cell's randomness
comes only from its own seeded streams (trace offset, user exits, optimiser
proposals, rollouts), so a cell's results do not depend on which other
cells share the batch.

Within a session, a segment is played, then the user decides whether to
leave. A first-segment stall is startup delay and is not counted as a stall
event. Stall counts for the tuning trigger accumulate over the user's day.
Tuning fires on the stall that takes the count past ``eta`` and the count
then restarts, so the next invocation needs ``eta + 1`` further stalls that
day. When the user leaves on the triggering stall, the invocation runs at
the start of their next session instead (segment index -1 in the
invocation log).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .abr import ThroughputHistory
from .bayesopt import OBOState
from .core import PARAM_TYPES, BandwidthTrace, VideoManifest
from .metrics import SessionTrace
from .core import SegmentOutcome
from .montecarlo import MCConfig, rollout_batch
from .player import step_arrays
from .predictor.features import FeatureSpec, StateBatch
from .users import HazardUser, RuleUser, UserBatch

STREAM_TRACE, STREAM_USER, STREAM_OBO, STREAM_ROLLOUT = 1, 2, 3, 4
MODES = ("fixed", "lingxi_fixed", "lingxi_bayes")


def stream(root_seed: int, key: Sequence[int], name: int, *extra: int) -> np.random.Generator:
    """Named random substream for one cell."""
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), *map(int, key), name, *extra]))


@dataclass
class SimulationSetup:
    manifest: VideoManifest
    traces: list
    buffer_max: float = 10.0
    rtt: float = 0.0
    sessions_per_day: int = 5
    days: int = 1
    bw_window: int = 8
    feature_spec: FeatureSpec | None = None

    def __post_init__(self):
        if not self.manifest.bounded:
            raise ValueError("simulation needs a bounded video")
        if not self.traces:
            raise ValueError("no traces")
        if self.feature_spec is None:
            self.feature_spec = FeatureSpec.for_setup(self.manifest, self.traces)

    @property
    def n_sessions(self) -> int:
        return self.sessions_per_day * self.days


@dataclass
class TunerConfig:
    """Online tuning settings for the two tuned modes."""

    mode: str = "lingxi_bayes"
    predictor: object = None
    eta: int = 2
    trials: int = 10
    candidates: tuple = ()
    mc: MCConfig = field(default_factory=MCConfig)
    gp: dict = field(default_factory=dict)
    acquisition: str = "ei"
    min_bw_samples: int = 2

    def __post_init__(self):
        if self.mode not in ("lingxi_fixed", "lingxi_bayes"):
            raise ValueError(f"unknown tuning mode {self.mode!r}")
        if self.mode == "lingxi_fixed" and not self.candidates:
            raise ValueError("lingxi_fixed needs a candidate list")
        if self.predictor is None:
            raise ValueError("tuning needs an exit predictor")


@dataclass
class Invocation:
    cell: int
    day: int
    session: int
    segment: int
    params: np.ndarray


@dataclass
class SimulationResult:
    """Per-cell session arrays plus tuning history.

    Session arrays have shape ``(cells, sessions, K)``; ``exited_at`` is
    ``-1`` when the session completed.
    """

    setup: SimulationSetup
    user_ids: list
    trace_ids: list
    levels: np.ndarray
    stall: np.ndarray
    throughput: np.ndarray
    buffer: np.ndarray
    played: np.ndarray
    exited_at: np.ndarray
    exit_cause: np.ndarray  # 0 none, 1 stall, 2 random
    day_param_mean: np.ndarray  # (cells, days, n_params)
    final_params: np.ndarray
    invocations: list
    trials: list
    skipped_preplay: np.ndarray
    records: dict | None = None

    @property
    def n_cells(self) -> int:
        return self.levels.shape[0]

    def session_day(self) -> np.ndarray:
        return np.arange(self.levels.shape[1]) // self.setup.sessions_per_day

    def completion(self) -> np.ndarray:
        """Per-cell fraction of sessions watched to the end."""
        return (self.exited_at < 0).mean(axis=1)

    def qoe_lin(self, stall_weight=None, switch_weight=1.0) -> np.ndarray:
        """Per-cell mean linear QoE over the played segments of each session."""
        m = self.setup.manifest
        w = m.max_quality if stall_weight is None else stall_weight
        K = self.levels.shape[2]
        mask = np.arange(K)[None, None, :] < self.played[:, :, None]
        q = m.qualities[np.maximum(self.levels, 0)]
        dq = np.abs(np.diff(q, axis=2)) * mask[:, :, 1:]
        score = (q * mask).sum(axis=2) - w * (self.stall * mask).sum(axis=2) - switch_weight * dq.sum(axis=2)
        return score.mean(axis=1)

    def total_stall(self) -> np.ndarray:
        return self.stall.sum(axis=(1, 2))

    def stall_exit_counts(self, sessions=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell ``(stalls followed by exit at that or next segment, stalls)``."""
        st = self.stall if sessions is None else self.stall[:, sessions]
        ex = self.exited_at if sessions is None else self.exited_at[:, sessions]
        K = st.shape[2]
        j = np.arange(K)[None, None, :]
        stalled = st > 0
        hit = stalled & (ex[:, :, None] >= 0) & ((j == ex[:, :, None]) | (j + 1 == ex[:, :, None]))
        return hit.sum(axis=(1, 2)), stalled.sum(axis=(1, 2))

    def stall_exit_rate(self, sessions=None, min_stalls: int = 1) -> np.ndarray:
        hits, total = self.stall_exit_counts(sessions)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total >= max(min_stalls, 1), hits / np.maximum(total, 1), np.nan)

    def session_traces(self, cell: int) -> list[SessionTrace]:
        m = self.setup.manifest
        L = m.segment_length_s
        causes = ("none", "stall", "random")
        out = []
        for s in range(self.levels.shape[1]):
            n = int(self.played[cell, s])
            outs = []
            for k in range(n):
                lvl = int(self.levels[cell, s, k])
                thr = float(self.throughput[cell, s, k])
                dl = m.download_time(lvl, thr)
                outs.append(SegmentOutcome(lvl, dl, float(self.stall[cell, s, k]), math.nan,
                                           float(self.buffer[cell, s, k]), thr, m.levels[lvl].bitrate_kbps))
            ex = int(self.exited_at[cell, s])
            out.append(SessionTrace(tuple(outs), None if ex < 0 else ex, causes[int(self.exit_cause[cell, s])],
                                    self.user_ids[cell], L))
        return out


def _trace_throughput(traces, trace_idx, t):
    out = np.empty(t.size)
    for tid in np.unique(trace_idx):
        m = trace_idx == tid
        out[m] = traces[tid].throughput_at(t[m])
    return out


def simulate(setup: SimulationSetup, users: Sequence[RuleUser | HazardUser], trace_idx: Sequence[int], abr, *,
             seed: int, cell_keys: Sequence[Sequence[int]] | None = None, tuner: TunerConfig | None = None,
             init_params=None, record: bool = False) -> SimulationResult:
    """Play every cell ``(users[i], traces[trace_idx[i]])``.

    Parameters
    ----------
    abr : HYB or RobustMPC
        Its current parameters are the default ``x_d`` for every cell.
    cell_keys : sequence of int tuples, optional
        Identity of each cell for its random streams; defaults to
        ``(i,)``. Equal keys give equal streams whatever the batch.
    tuner : TunerConfig, optional
        Enables online tuning; ``None`` keeps parameters fixed.
    init_params : array (cells, n_params), optional
        Starting ``x*`` per cell (e.g. restored from persisted state).
    record : bool
        Keep per-segment rows with feature matrices (for predictor training).
    """
    m = setup.manifest
    L, K = m.segment_length_s, m.num_segments
    trace_idx = np.asarray(trace_idx, dtype=int)
    R = len(users)
    if len(trace_idx) != R:
        raise ValueError("users and trace_idx differ in length")
    keys = [tuple(k) for k in cell_keys] if cell_keys is not None else [(i,) for i in range(R)]
    ub = UserBatch(users, m.n_levels)
    ptype = type(abr.params)
    params = np.tile(abr.params.as_vector(), (R, 1)) if init_params is None else np.array(init_params, float)
    bitrates, sizes = m.bitrates, m.sizes
    bmax = np.full(R, float(setup.buffer_max))
    rtt = np.full(R, float(setup.rtt))

    offsets = np.array([stream(seed, k, STREAM_TRACE).random() * setup.traces[t].period
                        for k, t in zip(keys, trace_idx)])
    exit_u = np.stack([stream(seed, k, STREAM_USER).random((setup.n_sessions, K)) for k in keys]) if R else \
        np.zeros((0, setup.n_sessions, K))

    S = setup.n_sessions
    levels = np.zeros((R, S, K), dtype=np.int8)
    stall_a = np.zeros((R, S, K))
    thr_a = np.zeros((R, S, K))
    buf_a = np.zeros((R, S, K))
    played = np.zeros((R, S), dtype=int)
    exited_at = np.full((R, S), -1, dtype=int)
    cause = np.zeros((R, S), dtype=np.int8)
    day_param = np.zeros((R, setup.days, params.shape[1]))

    state = StateBatch(R, setup.feature_spec)
    hist = ThroughputHistory(R)
    W = setup.bw_window
    bwlog = np.zeros((R, W))
    bwcount = np.zeros(R, dtype=int)
    tclock = np.zeros(R)
    invocations: list[Invocation] = []
    trials: list = []
    skipped = np.zeros(R, dtype=int)
    obo_states = None
    if tuner is not None:
        box = ptype.box
        obo_states = [OBOState(params[i].copy(), box, budget=tuner.trials, eta=tuner.eta,
                               risk_axis=ptype.risk_axis, gp_params=dict(tuner.gp),
                               acquisition=tuner.acquisition) for i in range(R)]
    rec = {k: [] for k in ("cell", "session", "segment", "level", "prev_level", "bitrate", "throughput",
                           "buffer", "stall", "switched", "exited", "stall_exit", "features")} if record else None

    pending = np.zeros(R, dtype=bool)
    for day in range(setup.days):
        daily_stalls = np.zeros(R, dtype=int)
        pcount = np.zeros(R)
        for s_in_day in range(setup.sessions_per_day):
            s = day * setup.sessions_per_day + s_in_day
            buffer = np.zeros(R)
            last = np.full(R, -1, dtype=int)
            cum_stall = np.zeros(R)
            count = np.zeros(R, dtype=int)
            active = np.ones(R, dtype=bool)
            state.new_session()
            if tuner is not None and pending.any():
                rows = np.nonzero(pending)[0]
                pending[:] = False
                _tune(setup, tuner, abr, seed, keys, rows, params, obo_states, buffer, last, hist,
                      state, bwlog, bwcount, skipped, invocations, trials, day, s, -1)
            for k in range(K):
                a = np.nonzero(active)[0]
                if a.size == 0:
                    break
                h = hist.take(a) if a.size < R else hist
                lv, pred = abr.select_batch(m, buffer[a], last[a], h, bmax[a], rtt[a], params_matrix=params[a])
                C = _trace_throughput(setup.traces, trace_idx[a], offsets[a] + tclock[a])
                dl, stall, wait, nb = step_arrays(buffer[a], sizes[lv], C, L, bmax[a], rtt[a])
                ev = stall if k > 0 else np.zeros_like(stall)
                buffer[a] = nb
                last[a] = lv
                tclock[a] += dl + wait
                hist.push(C, predicted=pred, rows=a)
                bwlog[a] = np.roll(bwlog[a], -1, axis=1)
                bwlog[a, -1] = C
                bwcount[a] += 1
                state.push_segment(a, lv, bitrates[lv], C, ev, L)
                levels[a, s, k] = lv
                stall_a[a, s, k] = ev
                thr_a[a, s, k] = C
                buf_a[a, s, k] = nb
                played[a, s] += 1
                day_param[a, day] += params[a]
                pcount[a] += 1
                stalled = ev > 0
                cum_stall[a] += ev
                count[a] += stalled
                daily_stalls[a] += stalled
                switched = state.switched[a]
                leave = np.zeros(a.size, dtype=bool)
                rule = ub.is_rule[a]
                if rule.any():
                    leave[rule] = ub.rule_exit(a[rule], cum_stall[a[rule]], count[a[rule]])
                if (~rule).any():
                    hz = ~rule
                    p = ub.hazard_prob(a[hz], lv[hz], switched[hz], ev[hz])
                    leave[hz] = exit_u[a[hz], s, k] < p
                trig_exit = np.zeros(a.size, dtype=bool)
                if leave.any():
                    gone = a[leave]
                    trig_exit[leave] = state.mark_exit(gone)
                    exited_at[gone, s] = k
                    cause[gone, s] = np.where(trig_exit[leave], 1, 2)
                    active[gone] = False
                if record:
                    rec["cell"].append(a)
                    rec["session"].append(np.full(a.size, s))
                    rec["segment"].append(np.full(a.size, k))
                    rec["level"].append(lv)
                    rec["prev_level"].append(state.prev_level[a].copy())
                    rec["bitrate"].append(bitrates[lv])
                    rec["throughput"].append(C)
                    rec["buffer"].append(nb)
                    rec["stall"].append(ev)
                    rec["switched"].append(switched)
                    rec["exited"].append(leave)
                    rec["stall_exit"].append(trig_exit)
                    rec["features"].append(state.take(a).features())
                if tuner is not None:
                    due = stalled & (daily_stalls[a] > tuner.eta)
                    pending[a[due & leave]] = True
                    daily_stalls[a[due]] = 0
                    fire = a[due & ~leave]
                    if fire.size:
                        _tune(setup, tuner, abr, seed, keys, fire, params, obo_states, buffer, last, hist,
                              state, bwlog, bwcount, skipped, invocations, trials, day, s, k)
        day_param[:, day] /= np.maximum(pcount, 1)[:, None]

    records = None
    if record:
        records = {k: np.concatenate(v) if v else np.zeros(0) for k, v in rec.items()}
    return SimulationResult(setup, [u.user_id for u in users], [setup.traces[t].trace_id for t in trace_idx],
                            levels, stall_a, thr_a, buf_a, played, exited_at, cause, day_param, params,
                            invocations, trials, skipped, records)


def _tune(setup, tuner, abr, seed, keys, rows, params, obo_states, buffer, last, hist, state, bwlog,
          bwcount, skipped, invocations, trials, day, session, segment):
    """Run one tuning invocation for every row in ``rows`` as a batch."""
    m = setup.manifest
    W = setup.bw_window
    n = np.minimum(bwcount[rows], W)
    ok = n >= max(tuner.min_bw_samples, 2)
    rows = rows[ok]
    n = n[ok]
    if rows.size == 0:
        return
    cols = np.arange(W)[None, :] >= (W - n)[:, None]
    vals = np.where(cols, bwlog[rows], 0.0)
    mu = vals.sum(axis=1) / n
    sd = np.sqrt((np.where(cols, (bwlog[rows] - mu[:, None]) ** 2, 0.0)).sum(axis=1) / (n - 1))
    pre = mu - 3.0 * sd > m.max_bitrate
    skipped[rows[pre]] += 1
    rows, mu, sd = rows[~pre], mu[~pre], sd[~pre]
    if rows.size == 0:
        return
    G = rows.size
    st0 = state.take(rows)
    st0.cur_stall[:] = 0.0  # the trigger segment is already resolved: the user stayed
    h0 = hist.take(rows)
    steps = tuner.mc.steps(m)
    states = [obo_states[r] for r in rows]
    inv_ids = [st.invocations for st in states]
    for st in states:
        st.begin()
    budget = len(tuner.candidates) if tuner.mode == "lingxi_fixed" else tuner.trials
    prop_rngs = [stream(seed, keys[r], STREAM_OBO, inv) for r, inv in zip(rows, inv_ids)]
    for t in range(budget):
        if tuner.mode == "lingxi_fixed":
            X = np.tile(np.asarray(tuner.candidates[t], float), (G, 1))
        else:
            X = np.stack([st.propose(rng) for st, rng in zip(states, prop_rngs)])
        rngs = [stream(seed, keys[r], STREAM_ROLLOUT, inv, t) for r, inv in zip(rows, inv_ids)]
        best = np.array([st.r_min for st in states]) if tuner.mc.prune_enabled else None
        exited, watched, pruned = rollout_batch(
            m, abr, tuner.predictor, X, mu, sd, buffer[rows], last[rows], h0, st0, samples=tuner.mc.samples,
            steps=steps, rngs=rngs, buffer_max=setup.buffer_max, rtt=setup.rtt, best=best)
        rate = exited / watched
        for g, st in enumerate(states):
            st.observe(X[g], rate[g], bool(pruned[g]))
    for g, r in enumerate(rows):
        st = states[g]
        trials.extend((int(r), tr) for tr in st.log[-budget:])
        params[r] = st.finish()
        invocations.append(Invocation(int(r), day, session, segment, params[r].copy()))


def simulate_fixed(setup: SimulationSetup, users, trace_idx, abr, *, seed: int, record: bool = False,
                   cell_keys=None, init_params=None) -> SimulationResult:
    """Fixed-parameter playback (no tuning)."""
    return simulate(setup, users, trace_idx, abr, seed=seed, record=record, cell_keys=cell_keys,
                    init_params=init_params)


def obo_session(setup: SimulationSetup, user, trace_index: int, abr, tuner: TunerConfig, *, seed: int,
                init_params=None) -> SimulationResult:
    """One user on one trace with online tuning; ``x*`` starts at the ABR's parameters or ``init_params``."""
    init = None if init_params is None else np.asarray(init_params, float)[None, :]
    return simulate(setup, [user], [trace_index], abr, seed=seed, tuner=tuner, init_params=init)


def params_of(result: SimulationResult, cell: int, ptype=None):
    """Final parameters of ``cell`` as a params object."""
    v = result.final_params[cell]
    if ptype is None:
        ptype = next(t for t in PARAM_TYPES.values() if len(t.box) == v.size)
    return ptype.from_vector(v)
