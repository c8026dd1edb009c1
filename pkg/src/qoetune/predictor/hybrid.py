"""Hybrid exit-rate predictor: network on stall segments plus population tables."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import FeatureSpec, StateBatch
from .net import ExitNet
from .os_tables import OSTables


def reweight_prior(p, odds: float):
    """Shift probabilities to a class prior whose odds differ by the factor ``odds``."""
    p = np.asarray(p, dtype=float)
    if odds == 1.0:
        return p
    return p * odds / (p * odds + (1.0 - p))


def predict(net: ExitNet | None, os_tables: OSTables, features, level: int, prev_level: int,
            stall: float, nn_prob: float | None = None, prior_odds: float = 1.0) -> float:
    """Exit probability for one segment.

    On a stall segment: ``clip(NN exit probability + OS term, 0, 1)``;
    otherwise the OS term alone. ``nn_prob`` overrides the network output.
    ``prior_odds`` undoes class rebalancing applied during training.
    """
    os_term = float(os_tables.contribution([level], [prev_level])[0])
    if stall <= 0:
        return os_term
    if nn_prob is None:
        nn_prob = float(net.predict_proba(np.asarray(features, dtype=float)[None])[0, 1])
    nn_prob = float(reweight_prior(nn_prob, prior_odds))
    return min(max(nn_prob + os_term, 0.0), 1.0)


class HybridExitPredictor:
    """Batch form of :func:`predict` over a :class:`StateBatch`.

    ``prior_odds`` is the classifier's ``prior_odds_``: with a rebalanced
    training set the raw network output overstates exits, and the rollouts
    need probabilities on the scale of the original logs.
    """

    def __init__(self, net: ExitNet, os_tables: OSTables, spec: FeatureSpec, prior_odds: float = 1.0):
        self.net = net
        self.os_tables = os_tables
        self.spec = spec
        self.prior_odds = float(prior_odds)

    def predict_state(self, state: StateBatch) -> np.ndarray:
        p = self.os_tables.contribution(state.level, state.prev_level).astype(float)
        stalled = np.nonzero(state.cur_stall > 0)[0]
        if stalled.size:
            feats = state.take(stalled).features()
            nn = reweight_prior(self.net.predict_proba(feats)[:, 1], self.prior_odds)
            p[stalled] = np.clip(nn + p[stalled], 0.0, 1.0)
        return p

    def save(self, path):
        Path(path).write_text(json.dumps({"net": self.net.to_dict(), "os_tables": self.os_tables.to_dict(),
                                          "feature_spec": self.spec.to_dict(), "prior_odds": self.prior_odds}))

    @classmethod
    def load(cls, path) -> "HybridExitPredictor":
        data = json.loads(Path(path).read_text())
        return cls(ExitNet.from_dict(data["net"]), OSTables.from_dict(data["os_tables"]),
                   FeatureSpec(**data["feature_spec"]), data.get("prior_odds", 1.0))


class ConstantPredictor:
    """Stub predictor returning the same exit probability for every row."""

    def __init__(self, p: float):
        self.p = float(p)

    def predict_state(self, state: StateBatch) -> np.ndarray:
        return np.full(len(state), self.p)
