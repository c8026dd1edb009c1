"""Bitrate selection policies with runtime-tunable objective parameters.

Both policies are scikit-learn style estimators: their QoE parameters are
constructor arguments, so ``get_params``/``set_params`` expose exactly the
knobs the online optimizer turns. ``update(params)`` is a thin wrapper over
``set_params``.
"""

from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_1d, check_positive
from .core import HYBParams, MPCParams, VideoManifest
from .player import PlayerEnv, step, step_arrays

MAX_MPC_SEQUENCES = 10**6


class ThroughputHistory:
    """Per-row sliding windows of observed throughput and prediction error.

    Rows are independent playback sessions; arrays hold the newest sample in
    the last column. A row with no samples yet has ``count == 0``.
    """

    def __init__(self, n_rows: int = 1, size: int = 5):
        self.size = size
        self.thr = np.zeros((n_rows, size))
        self.err = np.zeros((n_rows, size))
        self.count = np.zeros(n_rows, dtype=int)
        self.err_count = np.zeros(n_rows, dtype=int)
        self.last_pred = np.full(n_rows, np.nan)

    def __len__(self):
        return self.count.size

    def push(self, observed, predicted=None, rows=None):
        rows = np.arange(len(self)) if rows is None else np.asarray(rows)
        observed = np.broadcast_to(np.asarray(observed, dtype=float), rows.shape)
        prev = self.last_pred[rows]
        has_pred = np.isfinite(prev)
        if has_pred.any():
            r = rows[has_pred]
            e = np.abs(prev[has_pred] - observed[has_pred]) / observed[has_pred]
            self.err[r] = np.roll(self.err[r], -1, axis=1)
            self.err[r, -1] = e
            self.err_count[r] += 1
        self.thr[rows] = np.roll(self.thr[rows], -1, axis=1)
        self.thr[rows, -1] = observed
        self.count[rows] += 1
        if predicted is not None:
            self.last_pred[rows] = predicted

    def harmonic_mean(self, last: int = 5) -> np.ndarray:
        n = np.minimum(self.count, last)
        cols = np.arange(self.size)[None, :] >= (self.size - n)[:, None]
        cols &= np.arange(self.size)[None, :] >= self.size - last
        with np.errstate(divide="ignore"):
            inv = np.where(cols, 1.0 / np.where(cols, self.thr, 1.0), 0.0).sum(axis=1)
        out = np.full(len(self), np.nan)
        ok = n > 0
        out[ok] = n[ok] / inv[ok]
        return out

    def last(self) -> np.ndarray:
        return np.where(self.count > 0, self.thr[:, -1], np.nan)

    def max_error(self, window: int = 5) -> np.ndarray:
        n = np.minimum(self.err_count, min(window, self.size))
        cols = np.arange(self.size)[None, :] >= (self.size - n)[:, None]
        return np.where(cols, self.err, 0.0).max(axis=1)

    def take(self, idx) -> "ThroughputHistory":
        out = ThroughputHistory(0, self.size)
        out.thr, out.err = self.thr[idx].copy(), self.err[idx].copy()
        out.count, out.err_count = self.count[idx].copy(), self.err_count[idx].copy()
        out.last_pred = self.last_pred[idx].copy()
        return out

    @classmethod
    def from_samples(cls, samples, errors=(), size: int = 5) -> "ThroughputHistory":
        hist = cls(1, size)
        samples = list(samples)[-size:]
        errors = list(errors)[-size:]
        if samples:
            hist.thr[0, size - len(samples):] = samples
            hist.count[0] = len(samples)
        if errors:
            hist.err[0, size - len(errors):] = errors
            hist.err_count[0] = len(errors)
        return hist


def robust_bandwidth(samples, past_errors=(), error_window: int = 5) -> float:
    """Harmonic mean of the last 5 samples discounted by the worst recent error."""
    arr = check_1d(samples, "samples")
    if np.any(arr <= 0):
        raise ValueError("samples must be > 0")
    tail = arr[-5:]
    hm = tail.size / np.sum(1.0 / tail)
    errs = list(past_errors)[-error_window:] if error_window > 0 else []
    max_err = max(errs) if errs else 0.0
    return float(hm / (1.0 + max_err))


def hyb_select(manifest: VideoManifest, c_hat: float, buffer: float, beta: float) -> int:
    """Highest level whose predicted download time is strictly below ``beta * buffer``."""
    check_positive(c_hat, "c_hat")
    times = manifest.sizes * 1000.0 / c_hat
    ok = np.nonzero(times < beta * buffer)[0]
    return int(ok[-1]) if ok.size else 0


def hyb_select_batch(manifest: VideoManifest, c_hat, buffer, beta) -> np.ndarray:
    c_hat, buffer, beta = np.broadcast_arrays(np.asarray(c_hat, float), np.asarray(buffer, float),
                                              np.asarray(beta, float))
    safe = np.where(np.isfinite(c_hat) & (c_hat > 0), c_hat, np.inf)
    times = manifest.sizes[None, :] * 1000.0 / safe[:, None]
    ok = times < (beta * buffer)[:, None]
    top = ok.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
    return np.where(ok.any(axis=1) & np.isfinite(safe), top, 0).astype(int)


@lru_cache(maxsize=32)
def level_sequences(n_levels: int, horizon: int) -> np.ndarray:
    """All level sequences in lexicographic order, shape ``(n_levels**horizon, horizon)``."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if n_levels**horizon > MAX_MPC_SEQUENCES:
        raise ValueError(f"horizon explosion: {n_levels}^{horizon} sequences exceeds {MAX_MPC_SEQUENCES}")
    seqs = np.array(list(itertools.product(range(n_levels), repeat=horizon)), dtype=int)
    seqs.setflags(write=False)
    return seqs


def mpc_select(manifest: VideoManifest, bw_estimate: float, env: PlayerEnv, params: MPCParams,
               horizon: int = 5) -> int:
    """Reference lookahead: enumerate every sequence and roll it through :func:`step`.

    Bandwidth is held at ``bw_estimate`` across the horizon. Ties go to the
    lower first level.
    """
    seqs = level_sequences(manifest.n_levels, horizon)
    q = manifest.qualities
    best_score, best_level = -np.inf, 0
    for seq in seqs:
        e, score = env, 0.0
        prev = env.last_level
        for lvl in seq:
            e, out = step(e, manifest, int(lvl), bw_estimate)
            score += q[lvl] - params.stall_weight * out.stall_time
            if prev >= 0:
                score -= params.switch_weight * abs(q[lvl] - q[prev])
            prev = lvl
        if score > best_score:
            best_score, best_level = score, int(seq[0])
    return best_level


def mpc_select_batch(manifest: VideoManifest, bw_estimate, buffer, last_level, stall_weight,
                     switch_weight, horizon: int = 5, buffer_max=10.0, rtt=0.0,
                     chunk: int = 512) -> np.ndarray:
    """Vectorised :func:`mpc_select` over rows with per-row state and weights."""
    seqs = level_sequences(manifest.n_levels, horizon)
    q = manifest.qualities
    sizes = manifest.sizes
    qsum = q[seqs].sum(axis=1)
    inner_switch = np.abs(np.diff(q[seqs], axis=1)).sum(axis=1) if horizon > 1 else np.zeros(len(seqs))
    seq_sizes = sizes[seqs]                        # (S, H)
    bw, buf, last, sw, xw, bmax, rtt_a = np.broadcast_arrays(
        np.asarray(bw_estimate, float), np.asarray(buffer, float), np.asarray(last_level, int),
        np.asarray(stall_weight, float), np.asarray(switch_weight, float),
        np.asarray(buffer_max, float), np.asarray(rtt, float))
    n = bw.size
    out = np.zeros(n, dtype=int)
    L = manifest.segment_length_s
    for lo in range(0, n, chunk):
        sl = slice(lo, min(lo + chunk, n))
        b = np.repeat(buf[sl, None], len(seqs), axis=1)
        total_stall = np.zeros_like(b)
        for h in range(horizon):
            _, stall, _, b = step_arrays(b, seq_sizes[None, :, h], bw[sl, None], L,
                                         bmax[sl, None], rtt_a[sl, None])
            total_stall += stall
        first_switch = np.where(last[sl, None] >= 0,
                                np.abs(q[seqs[:, 0]][None, :] - q[np.maximum(last[sl], 0)][:, None]), 0.0)
        score = (qsum[None, :] - sw[sl, None] * total_stall
                 - xw[sl, None] * (inner_switch[None, :] + first_switch))
        out[sl] = seqs[np.argmax(score, axis=1), 0]
    return out


class HYB(BaseEstimator):
    """Buffer/throughput rule: max level with ``d(Q)/C_hat < beta * B``.

    Parameters
    ----------
    beta : float
        Aggressiveness in (0, 1]; lower is more conservative.
    estimator : {"last", "harmonic"}
        Source of ``C_hat``: the last throughput sample or the harmonic mean
        of the last five.
    """

    params_type = HYBParams

    def __init__(self, beta=0.5, estimator="last"):
        self.beta = beta
        self.estimator = estimator

    @property
    def params(self) -> HYBParams:
        return HYBParams(self.beta)

    def update(self, params: HYBParams) -> "HYB":
        return self.set_params(beta=params.beta)

    def estimate(self, history: ThroughputHistory) -> np.ndarray:
        if self.estimator == "last":
            return history.last()
        if self.estimator == "harmonic":
            return history.harmonic_mean()
        raise ValueError(f"unknown estimator {self.estimator!r}")

    def select_batch(self, manifest, buffer, last_level, history, buffer_max=10.0, rtt=0.0,
                     params_matrix=None):
        beta = self.beta if params_matrix is None else params_matrix[:, 0]
        c_hat = self.estimate(history)
        return hyb_select_batch(manifest, c_hat, buffer, beta), c_hat

    def select(self, manifest, env: PlayerEnv, history: ThroughputHistory) -> int:
        return int(self.select_batch(manifest, [env.buffer], [env.last_level], history,
                                     env.buffer_max, env.rtt)[0][0])


class RobustMPC(BaseEstimator):
    """Lookahead controller maximising the linear QoE over ``horizon`` segments.

    The bandwidth estimate is the harmonic mean of the last five samples
    divided by ``1 + max recent relative prediction error``.
    """

    params_type = MPCParams

    def __init__(self, stall_weight=4.0, switch_weight=1.0, horizon=5, error_window=5):
        self.stall_weight = stall_weight
        self.switch_weight = switch_weight
        self.horizon = horizon
        self.error_window = error_window

    @property
    def params(self) -> MPCParams:
        return MPCParams(self.stall_weight, self.switch_weight)

    def update(self, params: MPCParams) -> "RobustMPC":
        return self.set_params(stall_weight=params.stall_weight, switch_weight=params.switch_weight)

    def estimate(self, history: ThroughputHistory) -> np.ndarray:
        return history.harmonic_mean() / (1.0 + history.max_error(self.error_window))

    def select_batch(self, manifest, buffer, last_level, history, buffer_max=10.0, rtt=0.0,
                     params_matrix=None):
        """Returns ``(levels, raw_prediction)``; rows without history pick level 0."""
        if params_matrix is None:
            sw, xw = self.stall_weight, self.switch_weight
        else:
            sw, xw = params_matrix[:, 0], params_matrix[:, 1]
        est = self.estimate(history)
        ok = np.isfinite(est)
        levels = np.zeros(len(est), dtype=int)
        if ok.any():
            idx = np.nonzero(ok)[0]
            pick = lambda a: a[idx] if np.ndim(a) else a  # noqa: E731
            levels[idx] = mpc_select_batch(manifest, est[idx], np.asarray(buffer)[idx],
                                           np.asarray(last_level)[idx], pick(sw), pick(xw),
                                           self.horizon, pick(np.asarray(buffer_max, float)),
                                           pick(np.asarray(rtt, float)))
        return levels, history.harmonic_mean()

    def select(self, manifest, env: PlayerEnv, history: ThroughputHistory) -> int:
        return int(self.select_batch(manifest, [env.buffer], [env.last_level], history,
                                     env.buffer_max, env.rtt)[0][0])


ABR_TYPES = {"hyb": HYB, "mpc": RobustMPC}


def make_abr(kind: str, **kwargs):
    try:
        return ABR_TYPES[kind](**kwargs)
    except KeyError:
        raise ValueError(f"unknown abr {kind!r}") from None
