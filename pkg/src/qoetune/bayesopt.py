"""Per-user online Bayesian optimisation of the ABR's QoE parameters.

A Gaussian process with a fixed squared-exponential kernel models the
estimated exit rate over the parameter box; expected improvement (the
minimisation form) picks the next candidate. Each invocation starts from
the incumbent ``x*``, spends up to ``trials`` evaluations, keeps the argmin
and then forgets the best value (``r_min`` back to infinity) while ``x*``
persists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg
from scipy.stats import norm, qmc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_rows


class GPError(RuntimeError):
    pass


def _unit(X, box):
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    return (np.asarray(X, dtype=float) - lo) / (hi - lo)


class GPSurrogate(BaseEstimator, RegressorMixin):
    """Exact GP regression with fixed hyperparameters.

    Inputs are rescaled to the unit cube when ``box`` is given, so
    ``length_scale`` is a fraction of each box side.

    Parameters
    ----------
    length_scale : float
        Squared-exponential length scale in (scaled) input units.
    signal_variance : float or None
        Prior output variance ``s^2``. ``None`` uses the sample variance of the
        observations, floored at ``min_signal_variance``.
    noise_variance : float
        Observation noise ``sigma_n^2`` added to the kernel diagonal.
    prior_mean : float or None
        Constant prior mean; ``None`` uses the mean of the observations.
    jitter : float
        Extra diagonal term for numerical stability.
    """

    def __init__(self, box=None, length_scale=0.2, signal_variance=None, noise_variance=1e-4,
                 prior_mean=None, jitter=1e-8, min_signal_variance=1e-4):
        self.box = box
        self.length_scale = length_scale
        self.signal_variance = signal_variance
        self.noise_variance = noise_variance
        self.prior_mean = prior_mean
        self.jitter = jitter
        self.min_signal_variance = min_signal_variance

    def _scale(self, X):
        X = np.asarray(X, dtype=float)
        return _unit(X, self.box) if self.box is not None else X

    def kernel(self, A, B) -> np.ndarray:
        d = (A[:, None, :] - B[None, :, :]) / self.length_scale
        return self.s2_ * np.exp(-0.5 * (d * d).sum(axis=-1))

    def fit(self, X, y):
        X = check_rows(X, "X")
        y = np.asarray(y, dtype=float).reshape(-1)
        if len(y) != len(X) or len(y) == 0:
            raise ValueError("need at least one observation with matching X and y")
        self.X_ = self._scale(X)
        self.y_ = y
        self.mean_ = float(y.mean()) if self.prior_mean is None else float(self.prior_mean)
        if self.signal_variance is None:
            self.s2_ = max(float(y.var()), self.min_signal_variance)
        else:
            self.s2_ = float(self.signal_variance)
        K = self.kernel(self.X_, self.X_) + (self.noise_variance + self.jitter) * np.eye(len(y))
        try:
            self.chol_ = linalg.cho_factor(K, lower=True)
        except linalg.LinAlgError as exc:
            raise GPError("singular system after jitter") from exc
        self.alpha_ = linalg.cho_solve(self.chol_, y - self.mean_)
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "alpha_")
        Xs = self._scale(check_rows(X, "X"))
        Ks = self.kernel(Xs, self.X_)
        mu = self.mean_ + Ks @ self.alpha_
        if not return_std:
            return mu
        v = linalg.cho_solve(self.chol_, Ks.T)
        var = np.maximum(self.s2_ - np.einsum("ij,ji->i", Ks, v), 0.0)
        return mu, np.sqrt(var)

    @property
    def n_observations(self) -> int:
        return 0 if not hasattr(self, "y_") else len(self.y_)


def expected_improvement(mu, sd, best, xi: float = 0.0) -> np.ndarray:
    """EI for minimisation: ``E[max(best - f - xi, 0)]``."""
    mu, sd = np.asarray(mu, float), np.asarray(sd, float)
    imp = best - mu - xi
    out = np.maximum(imp, 0.0)
    pos = sd > 0
    with np.errstate(over="ignore"):
        z = imp[pos] / sd[pos]
        out[pos] = imp[pos] * norm.cdf(z) + sd[pos] * norm.pdf(z)
    return np.maximum(out, 0.0)


def probability_of_improvement(mu, sd, best, xi: float = 0.0) -> np.ndarray:
    mu, sd = np.asarray(mu, float), np.asarray(sd, float)
    imp = best - mu - xi
    out = (imp > 0).astype(float)
    pos = sd > 0
    with np.errstate(over="ignore"):
        out[pos] = norm.cdf(imp[pos] / sd[pos])
    return out


ACQUISITIONS = {"ei": expected_improvement, "pi": probability_of_improvement}


def box_uniform(box, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    lo = np.array([b[0] for b in box], float)
    hi = np.array([b[1] for b in box], float)
    u = rng.random(len(box) if n is None else (n, len(box)))
    return lo + u * (hi - lo)


def next_candidate(gp: GPSurrogate | None, box, rng: np.random.Generator, *, risk_axis=(0, 1),
                   acquisition: str = "ei", n_random: int = 512, n_local: int = 64,
                   local_scale: float = 0.05) -> np.ndarray:
    """Maximise the acquisition over quasi-random box points plus the incumbent's neighbourhood.

    Ties go to the lower stall-risk point along ``risk_axis = (dim, sign)``:
    larger ``sign * x[dim]`` is safer. With no observations a uniform box
    draw is returned; if the acquisition is zero everywhere, the incumbent.
    """
    if gp is None or gp.n_observations == 0:
        return box_uniform(box, rng)
    lo = np.array([b[0] for b in box], float)
    hi = np.array([b[1] for b in box], float)
    d = len(box)
    sob = qmc.Sobol(d, scramble=True, seed=rng).random(n_random)
    inc_unit = gp.X_[np.argmin(gp.y_)] if gp.box is not None else _unit(gp.X_[np.argmin(gp.y_)], box)
    local = np.clip(inc_unit + local_scale * rng.standard_normal((n_local, d)), 0.0, 1.0)
    cand = lo + np.vstack([inc_unit[None, :], local, sob]) * (hi - lo)
    mu, sd = gp.predict(cand, return_std=True)
    acq = ACQUISITIONS[acquisition](mu, sd, float(gp.y_.min()))
    top = acq.max()
    if not top > 0:
        return cand[0]
    dim, sign = risk_axis
    ties = np.nonzero(acq >= top)[0]
    return cand[ties[np.argmax(sign * cand[ties, dim])]]


@dataclass
class Trial:
    invocation: int
    trial: int
    x: np.ndarray
    value: float
    pruned: bool = False


@dataclass
class OBOState:
    """Per-user optimiser state across invocations.

    ``x_best`` persists; ``r_min`` and the surrogate restart with each
    invocation.
    """

    x_best: np.ndarray
    box: tuple
    budget: int = 10
    eta: int = 2
    risk_axis: tuple = (0, 1)
    gp_params: dict = field(default_factory=dict)
    acquisition: str = "ei"
    r_min: float = math.inf
    iteration: int = 0
    invocations: int = 0
    X: list = field(default_factory=list)
    y: list = field(default_factory=list)
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.x_best = np.asarray(self.x_best, dtype=float)
        if self.budget < 1:
            raise ValueError("trial budget must be >= 1")

    def begin(self):
        self.r_min = math.inf
        self.iteration = 0
        self.X, self.y = [], []

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        """Incumbent on the first trial, acquisition maximiser afterwards."""
        if self.iteration == 0:
            return self.x_best.copy()
        gp = GPSurrogate(box=self.box, **self.gp_params).fit(np.array(self.X), np.array(self.y))
        return next_candidate(gp, self.box, rng, risk_axis=self.risk_axis, acquisition=self.acquisition)

    def observe(self, x, value: float, pruned: bool = False):
        x = np.asarray(x, dtype=float)
        self.X.append(x)
        self.y.append(float(value))
        self.log.append(Trial(self.invocations, self.iteration, x, float(value), pruned))
        if value < self.r_min:
            self.r_min = float(value)
            self.x_best = x
        self.iteration += 1

    @property
    def done(self) -> bool:
        return self.iteration >= self.budget

    def finish(self) -> np.ndarray:
        self.invocations += 1
        self.r_min = math.inf
        return self.x_best


def run_invocation(state: OBOState, evaluate: Callable[[np.ndarray, float], tuple[float, bool]],
                   rng: np.random.Generator) -> np.ndarray:
    """One sequential OBO invocation; ``evaluate(x, best)`` returns ``(value, pruned)``."""
    state.begin()
    while not state.done:
        x = state.propose(rng)
        value, pruned = evaluate(x, state.r_min)
        state.observe(x, value, pruned)
    return state.finish()


def minimize(objective: Callable[[np.ndarray], float], box: Sequence, x0, *, budget: int = 15,
             seed: int = 0, risk_axis=(0, 1), gp_params: dict | None = None) -> tuple[np.ndarray, float]:
    """Stand-alone OBO on a black-box objective; returns ``(x_best, best_value)``."""
    state = OBOState(np.asarray(x0, float), tuple(box), budget=budget, risk_axis=risk_axis,
                     gp_params=gp_params or {})
    rng = np.random.default_rng(seed)
    best = [math.inf]

    def evaluate(x, _best):
        v = float(objective(x))
        best[0] = min(best[0], v)
        return v, False

    x = run_invocation(state, evaluate, rng)
    return x, best[0]


def obo_session(*args, **kwargs):
    """Play sessions for one user with online tuning; see :func:`qoetune.engine.obo_session`."""
    from .engine import obo_session as _run

    return _run(*args, **kwargs)
