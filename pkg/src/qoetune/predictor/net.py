"""Small convolutional exit classifier with hand-written backpropagation.

Each of the five input channels (a length-8 history vector) passes through
its own 1-D convolution (64 filters, width 3, same padding) and a ReLU. The
five 64x8 maps are flattened and concatenated, then fed to a 64-unit ReLU
layer and a 2-unit output layer with softmax: ``[P(continue), P(exit)]``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import N_CHANNELS, WINDOW

FORMAT_VERSION = 1
BIAS_INIT = 0.01


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(B, L) -> (B, L, k) windows with zero 'same' padding."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, k - 1 - pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)


class ExitNet:
    """Weights plus forward/backward passes. Float64 throughout."""

    def __init__(self, channels: int = 64, hidden: int = 64, kernel: int = 3, seed: int = 0,
                 n_inputs: int = N_CHANNELS, length: int = WINDOW):
        self.channels, self.hidden, self.kernel = channels, hidden, kernel
        self.n_inputs, self.length = n_inputs, length
        rng = np.random.default_rng(seed)
        flat = n_inputs * channels * length
        self.params = {
            "conv_w": rng.normal(0, np.sqrt(2.0 / kernel), (n_inputs, channels, kernel)),
            # small positive biases keep ReLUs off their kink for all-zero inputs
            "conv_b": np.full((n_inputs, channels), BIAS_INIT),
            "fc1_w": rng.normal(0, np.sqrt(2.0 / flat), (flat, hidden)),
            "fc1_b": np.full(hidden, BIAS_INIT),
            "fc2_w": rng.normal(0, np.sqrt(1.0 / hidden), (hidden, 2)),
            "fc2_b": np.zeros(2),
        }

    # -- forward / backward -------------------------------------------------
    def _forward(self, X):
        p = self.params
        B = X.shape[0]
        C, L = self.n_inputs, self.length
        # (C, B*L, k) windows per input channel
        cols = np.stack([_im2col(X[:, c], self.kernel).reshape(B * L, -1) for c in range(C)])
        pre = np.matmul(cols, p["conv_w"].transpose(0, 2, 1))  # C, B*L, F
        pre = pre.reshape(C, B, L, -1).transpose(1, 0, 3, 2) + p["conv_b"][None, :, :, None]  # B, C, F, L
        act = np.maximum(pre, 0.0)
        flat = act.reshape(B, -1)
        h_pre = flat @ p["fc1_w"] + p["fc1_b"]
        h = np.maximum(h_pre, 0.0)
        logits = h @ p["fc2_w"] + p["fc2_b"]
        return logits, (cols, pre, flat, h_pre, h)

    def logits(self, X, chunk: int = 4096) -> np.ndarray:
        # chunked so large inference sets do not materialise every activation at once
        X = np.asarray(X, dtype=float)
        if len(X) <= chunk:
            return self._forward(X)[0]
        return np.concatenate([self._forward(X[lo:lo + chunk])[0] for lo in range(0, len(X), chunk)])

    def predict_proba(self, X) -> np.ndarray:
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def loss_and_grads(self, X, y, weights=None):
        """Mean cross-entropy against one-hot labels and its gradients."""
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        B = X.shape[0]
        w = np.ones(B) if weights is None else np.asarray(weights, dtype=float)
        wsum = w.sum()
        logits, (cols, pre, flat, h_pre, h) = self._forward(X)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -(w * logp[np.arange(B), y]).sum() / wsum
        p = self.params
        d_logits = np.exp(logp)
        d_logits[np.arange(B), y] -= 1.0
        d_logits *= (w / wsum)[:, None]
        g = {"fc2_w": h.T @ d_logits, "fc2_b": d_logits.sum(axis=0)}
        d_h = (d_logits @ p["fc2_w"].T) * (h_pre > 0)
        g["fc1_w"] = flat.T @ d_h
        g["fc1_b"] = d_h.sum(axis=0)
        d_act = (d_h @ p["fc1_w"].T).reshape(pre.shape) * (pre > 0)
        C, F, L = d_act.shape[1:]
        d_cols = d_act.transpose(1, 2, 0, 3).reshape(C, F, B * L)
        g["conv_w"] = np.matmul(d_cols, cols)
        g["conv_b"] = d_act.sum(axis=(0, 3))
        return float(loss), g

    def loss(self, X, y, weights=None) -> float:
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=int)
        w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
        z = self.logits(X)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-(w * logp[np.arange(len(y)), y]).sum() / w.sum())

    # -- persistence --------------------------------------------------------
    def to_dict(self, extra: dict | None = None) -> dict:
        return {
            "format": "exitnet",
            "version": FORMAT_VERSION,
            "architecture": {"channels": self.channels, "hidden": self.hidden, "kernel": self.kernel,
                             "n_inputs": self.n_inputs, "length": self.length},
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
            **(extra or {}),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExitNet":
        if data.get("format") != "exitnet" or data.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model artifact: {data.get('format')!r} v{data.get('version')!r}")
        net = cls(**data["architecture"])
        for k, v in data["weights"].items():
            arr = np.asarray(v["data"], dtype=float).reshape(v["shape"])
            if arr.shape != net.params[k].shape:
                raise ValueError(f"weight {k} has shape {arr.shape}, expected {net.params[k].shape}")
            net.params[k] = arr
        return net

    def save(self, path, extra: dict | None = None):
        Path(path).write_text(json.dumps(self.to_dict(extra)))

    @classmethod
    def load(cls, path) -> "ExitNet":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def copy(self) -> "ExitNet":
        out = ExitNet.__new__(ExitNet)
        out.__dict__.update(self.__dict__)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out


def cross_entropy(label_onehot, pred) -> float:
    """``-sum(label * log(pred))`` for a single example."""
    label_onehot = np.asarray(label_onehot, dtype=float)
    pred = np.asarray(pred, dtype=float)
    return float(-(label_onehot * np.log(pred)).sum())


def gradient_check(net: ExitNet, X, y, *, n_checks: int = 40, eps: float = 1e-5, seed: int = 0,
                   grads: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_checks`` randomly chosen weights per tensor. ``grads`` can be
    supplied to test a tampered gradient.
    """
    X = np.atleast_3d(np.asarray(X, dtype=float))
    if X.ndim == 3 and X.shape[1:] != (net.n_inputs, net.length):
        X = X.reshape(-1, net.n_inputs, net.length)
    y = np.atleast_1d(y)
    if grads is None:
        _, grads = net.loss_and_grads(X, y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, w in net.params.items():
        flat = w.reshape(-1)
        gflat = grads[name].reshape(-1)
        for i in rng.choice(flat.size, size=min(n_checks, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up = net.loss(X, y)
            flat[i] = orig - eps
            down = net.loss(X, y)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-7)
            worst = max(worst, abs(num - gflat[i]) / denom)
    return worst
