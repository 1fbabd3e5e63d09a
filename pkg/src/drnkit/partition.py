"""Cutpoint grids over the refinement region, including the minimum-count merge."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Partition:
    """Strictly increasing cutpoints c_0 < ... < c_K; intervals are [c_{k-1}, c_k)."""

    cutpoints: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.cutpoints, dtype=np.float64)
        if c.ndim != 1 or c.size < 2:
            raise ValueError("a partition needs at least two cutpoints")
        if not np.all(np.diff(c) > 0):
            raise ValueError("cutpoints must be strictly increasing")
        c.setflags(write=False)
        object.__setattr__(self, "cutpoints", c)

    @property
    def K(self) -> int:
        return self.cutpoints.size - 1

    @property
    def lower(self) -> float:
        return float(self.cutpoints[0])

    @property
    def upper(self) -> float:
        return float(self.cutpoints[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.cutpoints)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.cutpoints[:-1] + self.cutpoints[1:])

    def interval_index(self, y) -> np.ndarray:
        """0-based interval holding y, or -1 outside [c_0, c_K)."""
        y = np.asarray(y, dtype=np.float64)
        k = np.searchsorted(self.cutpoints, y, side="right") - 1
        return np.where((y >= self.lower) & (y < self.upper), k, -1)

    def counts(self, y) -> np.ndarray:
        k = self.interval_index(y)
        return np.bincount(k[k >= 0], minlength=self.K)

    def to_json(self) -> str:
        return json.dumps(self.cutpoints.tolist())

    @classmethod
    def from_json(cls, s: str) -> "Partition":
        return cls(np.asarray(json.loads(s)))

    def __eq__(self, other):
        return isinstance(other, Partition) and np.array_equal(self.cutpoints, other.cutpoints)

    def __hash__(self):
        return hash(self.cutpoints.tobytes())


def refinement_bounds(y_train, lower_margin: float = 0.01, upper_margin: float = 0.01):
    y = np.asarray(y_train, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty training response")
    lo, hi = float(y.min()), float(y.max())
    if lo == hi:
        raise ValueError("training response has zero range")
    c0 = lo * (1 - lower_margin) if lo > 0 else lo - lower_margin * (hi - lo)
    cK = hi * (1 + upper_margin)
    return c0, cK


def uniform_cutpoints(c0: float, cK: float, proportion: float) -> Partition:
    if not c0 < cK:
        raise ValueError("lower bound must be below upper bound")
    if not 0 < proportion <= 1:
        raise ValueError("proportion must lie in (0, 1]")
    # guard against 1/0.1 = 10.000000000000002 style round-up
    K = math.ceil(round(1.0 / proportion, 9))
    return Partition(c0 + np.arange(K + 1) * (cK - c0) / K)


def merge_cutpoints(raw: Partition, y_train, M: int) -> Partition:
    """Drop interior cutpoints until each kept boundary has M training points on both sides."""
    if M < 1:
        raise ValueError("M must be a positive integer")
    c = raw.cutpoints
    y = np.sort(np.asarray(y_train, dtype=np.float64))
    last = c[-1]

    def count(a, b):
        return int(np.searchsorted(y, b, side="left") - np.searchsorted(y, a, side="left"))

    merged = [c[0]]
    left = 0
    for right in range(1, c.size - 1):
        if count(c[left], c[right]) >= M and count(c[right], last) >= M:
            merged.append(c[right])
            left = right
    merged.append(last)
    return Partition(np.asarray(merged))


def drn_partition(y_train, proportion: float, min_obs: int, lower_margin: float = 0.01,
                  upper_margin: float = 0.01) -> Partition:
    c0, cK = refinement_bounds(y_train, lower_margin, upper_margin)
    raw = uniform_cutpoints(c0, cK, proportion)
    if min_obs <= 0:
        return raw
    return merge_cutpoints(raw, y_train, min_obs)
