"""Monte Carlo estimate of the exit rate a parameter vector induces.

Each rollout starts from a copy of the user state and player environment,
then repeats until it has played ``t_sample`` seconds or the user exits:

1. ask the predictor for the exit probability of the current state and draw
   the exit;
2. draw a bandwidth from the normal model (truncated at 1 kbps);
3. let the ABR pick a level with the candidate parameters;
4. advance the buffer, the clock and the user state; count the segment as
   watched -- also on the iteration in which the user exits.

The estimate is ``exited / watched`` summed over all rollouts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .abr import ThroughputHistory
from .core import BANDWIDTH_FLOOR_KBPS, SIGMA_FLOOR_KBPS, BandwidthModel, VideoManifest
from .player import PlayerEnv, step_arrays
from .predictor.features import FeatureSpec, StateBatch


@dataclass(frozen=True)
class MCConfig:
    samples: int = 100
    t_sample: float | None = None  # seconds; None -> video length
    seed: int = 0
    prune_enabled: bool = False

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")

    def steps(self, manifest: VideoManifest) -> int:
        t = self.t_sample if self.t_sample is not None else manifest.duration_s
        if t is None or t < manifest.segment_length_s:
            raise ValueError("t_sample must be at least one segment long")
        return int(math.ceil(t / manifest.segment_length_s - 1e-9))


@dataclass
class UserState:
    """Predictor-facing user history plus the ABR's throughput window (one user)."""

    features: StateBatch = field(default_factory=lambda: StateBatch(1))
    throughput: ThroughputHistory = field(default_factory=lambda: ThroughputHistory(1))

    @classmethod
    def fresh(cls, spec: FeatureSpec = FeatureSpec()) -> "UserState":
        return cls(StateBatch(1, spec), ThroughputHistory(1))


def prune_preplay(model: BandwidthModel, manifest: VideoManifest) -> bool:
    """Skip optimisation when even ``mean - 3 sd`` clears the top bitrate."""
    return model.mean - 3.0 * model.std > manifest.max_bitrate


def prune_early(exited, watched, remaining, best) -> bool:
    """Stop evaluating a candidate that is already out of contention.

    The final estimate is bounded below by assuming every remaining
    segment is watched without an exit; one standard error is taken off
    that bound before comparing with ``best``.
    """
    if not math.isfinite(best) or watched <= 0 or exited <= 0:
        return False
    n = watched + max(remaining, 0)
    optimistic = exited / n
    se = math.sqrt(optimistic * (1.0 - optimistic) / n)
    return optimistic - se > best


def _prune_mask(exited, watched, remaining, best):
    n = watched + np.maximum(remaining, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        opt = np.where(n > 0, exited / n, 0.0)
        se = np.sqrt(np.clip(opt * (1 - opt), 0, None) / np.where(n > 0, n, 1))
    return np.isfinite(best) & (watched > 0) & (exited > 0) & (opt - se > best)


def rollout_batch(manifest: VideoManifest, abr, predictor, params_matrix, bw_mean, bw_std,
                  env_buffer, env_last_level, history: ThroughputHistory, state: StateBatch, *,
                  samples: int, steps: int, rngs, buffer_max=10.0, rtt=0.0, best=None):
    """Run ``samples`` rollouts for each of ``G`` independent evaluations.

    Row ``g`` of every per-evaluation input describes evaluation ``g``;
    ``rngs[g]`` supplies all of its randomness, so an evaluation's result
    does not depend on what else shares the batch. When ``best`` is given,
    evaluations are pruned early against it.

    Returns ``(exited, watched, pruned)`` arrays of length ``G``.
    """
    G = len(rngs)
    M = samples
    params_matrix = np.asarray(params_matrix, dtype=float).reshape(G, -1)
    grp = np.repeat(np.arange(G), M)
    # per-evaluation pre-drawn randomness: exit uniforms and standard normals
    U = np.empty((G * M, steps))
    Z = np.empty((G * M, steps))
    for g, rng in enumerate(rngs):
        U[g * M:(g + 1) * M] = rng.random((M, steps))
        Z[g * M:(g + 1) * M] = rng.standard_normal((M, steps))
    mean = np.asarray(bw_mean, float).reshape(-1)[grp] if np.ndim(bw_mean) else np.full(G * M, float(bw_mean))
    sd = np.maximum(np.broadcast_to(np.asarray(bw_std, float), (G,))[grp], SIGMA_FLOOR_KBPS)
    bmax = np.broadcast_to(np.asarray(buffer_max, float), (G,))[grp]
    rtt_r = np.broadcast_to(np.asarray(rtt, float), (G,))[grp]
    buf = np.broadcast_to(np.asarray(env_buffer, float), (G,))[grp].copy()
    last = np.broadcast_to(np.asarray(env_last_level, int), (G,))[grp].copy()
    hist = history.take(grp)
    st = state.take(grp)
    pm = params_matrix[grp]
    bitrates = manifest.bitrates
    sizes = manifest.sizes
    L = manifest.segment_length_s

    exited = np.zeros(G)
    watched = np.zeros(G)
    pruned = np.zeros(G, dtype=bool)
    active = np.ones(G * M, dtype=bool)
    best = None if best is None else np.broadcast_to(np.asarray(best, float), (G,))
    for k in range(steps):
        a = np.nonzero(active)[0]
        if a.size == 0:
            break
        sub = st.take(a) if a.size < len(st) else st
        p = predictor.predict_state(sub)
        leave = U[a, k] < p
        np.add.at(exited, grp[a[leave]], 1)
        C = np.maximum(mean[a] + sd[a] * Z[a, k], BANDWIDTH_FLOOR_KBPS)
        h = hist.take(a) if a.size < len(hist) else hist
        levels, pred = abr.select_batch(manifest, buf[a], last[a], h, bmax[a], rtt_r[a], params_matrix=pm[a])
        _, stall, _, nb = step_arrays(buf[a], sizes[levels], C, L, bmax[a], rtt_r[a])
        stall = np.where(last[a] >= 0, stall, 0.0)  # startup delay is not a stall event
        buf[a] = nb
        last[a] = levels
        hist.push(C, predicted=pred, rows=a)
        st.push_segment(a, levels, bitrates[levels], C, stall, L)
        np.add.at(watched, grp[a], 1)
        active[a[leave]] = False
        if best is not None and k + 1 < steps:
            remaining = np.bincount(grp[active], minlength=G) * (steps - k - 1)
            cut = ~pruned & _prune_mask(exited, watched, remaining, best)
            if cut.any():
                pruned |= cut
                active &= ~cut[grp]
    return exited, watched, pruned


def evaluate_parameters(x, model: BandwidthModel, user: UserState, env: PlayerEnv, predictor, abr,
                        manifest: VideoManifest, cfg: MCConfig, *, best: float = math.inf,
                        rng: np.random.Generator | None = None) -> float:
    """Estimated exit rate for candidate parameters ``x``.

    With ``cfg.prune_enabled`` and a finite ``best``, evaluation stops once
    the candidate cannot beat ``best``; the partial rate is returned.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    use_best = best if (cfg.prune_enabled and math.isfinite(best)) else None
    exited, watched, _ = rollout_batch(
        manifest, abr, predictor, x.as_vector()[None, :], model.mean, model.std, env.buffer,
        env.last_level, user.throughput, user.features, samples=cfg.samples, steps=cfg.steps(manifest),
        rngs=[rng], buffer_max=env.buffer_max, rtt=env.rtt, best=use_best)
    return float(exited[0] / watched[0])
