"""Population-level exit rates by quality level and switch pattern."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted


class OSTables(BaseEstimator):
    """Empirical exit rates over stall-free segments.

    ``quality_table_[level]`` is the rate on non-switch segments at that
    level; ``switch_table_[(from, to)]`` the rate on segments that switched
    from ``from`` to ``to``. Cells with fewer than ``min_count`` segments fall
    back to the global stall-free rate.
    """

    def __init__(self, n_levels=4, min_count=50):
        self.n_levels = n_levels
        self.min_count = min_count

    def fit(self, level, prev_level, stall, exited):
        level = np.asarray(level, dtype=int)
        prev_level = np.asarray(prev_level, dtype=int)
        stall = np.asarray(stall, dtype=float)
        exited = np.asarray(exited, dtype=bool)
        calm = stall <= 0
        if not calm.any():
            raise ValueError("no stall-free segments to build tables from")
        self.fallback_ = float(exited[calm].mean())
        switched = (prev_level >= 0) & (prev_level != level)
        self.quality_table_ = np.full(self.n_levels, self.fallback_)
        self.quality_counts_ = np.zeros(self.n_levels, dtype=int)
        for q in range(self.n_levels):
            m = calm & ~switched & (level == q)
            self.quality_counts_[q] = m.sum()
            if m.sum() >= self.min_count:
                self.quality_table_[q] = exited[m].mean()
        self.switch_table_ = np.full((self.n_levels, self.n_levels), self.fallback_)
        self.switch_counts_ = np.zeros((self.n_levels, self.n_levels), dtype=int)
        for a in range(self.n_levels):
            for b in range(self.n_levels):
                if a == b:
                    continue
                m = calm & switched & (prev_level == a) & (level == b)
                self.switch_counts_[a, b] = m.sum()
                if m.sum() >= self.min_count:
                    self.switch_table_[a, b] = exited[m].mean()
        return self

    def contribution(self, level, prev_level):
        """Vectorised OS term for segments at ``level`` reached from ``prev_level``."""
        check_is_fitted(self, "quality_table_")
        level = np.asarray(level, dtype=int)
        prev_level = np.asarray(prev_level, dtype=int)
        safe = np.clip(level, 0, self.n_levels - 1)
        switched = (prev_level >= 0) & (prev_level != level)
        sw = self.switch_table_[np.clip(prev_level, 0, self.n_levels - 1), safe]
        out = np.where(switched, sw, self.quality_table_[safe])
        return np.clip(out, 0.0, 1.0)

    def to_dict(self) -> dict:
        check_is_fitted(self, "quality_table_")
        return {"n_levels": self.n_levels, "min_count": self.min_count, "fallback": self.fallback_,
                "quality_table": self.quality_table_.tolist(), "switch_table": self.switch_table_.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "OSTables":
        out = cls(data["n_levels"], data["min_count"])
        out.fallback_ = float(data["fallback"])
        out.quality_table_ = np.asarray(data["quality_table"], dtype=float)
        out.switch_table_ = np.asarray(data["switch_table"], dtype=float)
        return out

    @classmethod
    def from_values(cls, quality_table, switch_value=None) -> "OSTables":
        """Hand-specified tables; every switch pattern gets ``switch_value``."""
        q = np.asarray(quality_table, dtype=float)
        out = cls(q.size, 0)
        out.fallback_ = float(q.mean())
        out.quality_table_ = q
        out.switch_table_ = np.full((q.size, q.size), out.fallback_ if switch_value is None else switch_value)
        return out
