"""Kernel SHAP attributions with marginal (interventional) value functions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from math import comb
from typing import Callable

import numpy as np

EXACT_MAX_PLAYERS = 13
TARGETS = ("mean", "quantile", "adjustment-mean", "adjustment-quantile")


class ShapRankError(np.linalg.LinAlgError):
    pass


def _predict_target(model, X, kind: str, alpha: float) -> np.ndarray:
    if callable(model) and not hasattr(model, "predict"):
        return np.asarray(model(X), dtype=np.float64)
    if hasattr(model, "conditional"):
        dist = model.conditional(X)
    else:
        dist = model.predict(X)
    if kind == "mean":
        m = dist.mean
        return np.asarray(m() if callable(m) else m, dtype=np.float64)
    return np.asarray(dist.quantile(np.full(len(X), alpha)), dtype=np.float64)


@dataclass
class ValueFunctionSpec:
    """What to explain and the background used to marginalise absent features.

    ``model`` may be a fitted model (DRN, GLM or baseline competitor) or a plain
    callable mapping a feature matrix to one value per row. Adjustment targets
    explain ``model - baseline``.
    """

    target: str
    model: object
    background: np.ndarray
    baseline: object = None
    alpha: float = 0.9
    M: int = 100
    seed: int = 0
    groups: dict | None = None
    feature_names: list | None = None
    n_samples: int = 2048

    def __post_init__(self):
        self.background = np.atleast_2d(np.asarray(self.background, dtype=np.float64))
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.target.startswith("adjustment") and self.baseline is None:
            raise ValueError("adjustment targets need a baseline model")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie strictly inside (0, 1)")
        if self.M < 1 or self.M > len(self.background):
            raise ValueError(f"M={self.M} exceeds the background size {len(self.background)}")
        p = self.background.shape[1]
        if self.feature_names is None:
            self.feature_names = [f"x{j + 1}" for j in range(p)]
        if self.groups is None:
            self.groups = {name: [j] for j, name in enumerate(self.feature_names)}
        cols = sorted(c for g in self.groups.values() for c in g)
        if cols != list(range(p)):
            raise ValueError("groups must cover every feature column exactly once")
        rng = np.random.default_rng(self.seed)
        self._sample = self.background[rng.choice(len(self.background), self.M, replace=False)]

    @property
    def sample(self) -> np.ndarray:
        return self._sample

    @property
    def players(self) -> list[str]:
        return list(self.groups)

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        kind = self.target.removeprefix("adjustment-")
        out = _predict_target(self.model, X, kind, self.alpha)
        if self.target.startswith("adjustment"):
            out = out - _predict_target(self.baseline, X, kind, self.alpha)
        return out

    def describe(self) -> str:
        return self.target + (f"@{self.alpha:g}" if "quantile" in self.target else "")


def _columns(spec: ValueFunctionSpec, players_in) -> np.ndarray:
    names = spec.players
    cols = [c for j in players_in for c in spec.groups[names[j]]]
    return np.asarray(cols, dtype=int)


def _coalition_values(spec: ValueFunctionSpec, x, masks: np.ndarray) -> np.ndarray:
    """v(S) for every coalition row of ``masks`` in one batched prediction."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = spec.sample
    blocks = []
    for mask in masks:
        block = bg.copy()
        cols = _columns(spec, np.flatnonzero(mask))
        block[:, cols] = x[cols]
        blocks.append(block)
    vals = spec.evaluate(np.vstack(blocks)) if blocks else np.zeros(0)
    return vals.reshape(len(masks), len(bg)).mean(axis=1)


def marginal_value_function(spec: ValueFunctionSpec, x, subset) -> float:
    """Monte Carlo value of coalition ``subset`` (player indices) at ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    subset = sorted(set(int(j) for j in subset))
    n_players = len(spec.players)
    if any(j < 0 or j >= n_players for j in subset):
        raise ValueError("subset refers to unknown players")
    if len(subset) == n_players:
        return float(spec.evaluate(x[None, :])[0])
    mask = np.zeros((1, n_players), dtype=bool)
    mask[0, subset] = True
    return float(_coalition_values(spec, x, mask)[0])


def shapley_kernel_weight(p: int, s: int) -> float:
    return (p - 1) / (comb(p, s) * s * (p - s))


def _coalitions(p: int, n_samples: int, rng: np.random.Generator):
    if p <= EXACT_MAX_PLAYERS:
        masks = np.array([[(i >> j) & 1 for j in range(p)] for i in range(1, 2**p - 1)], dtype=bool)
        sizes = masks.sum(axis=1)
        weights = np.array([shapley_kernel_weight(p, s) for s in sizes])
        return masks, weights
    # sample sizes in proportion to their total kernel mass, then members uniformly
    size_mass = np.array([(p - 1) / (s * (p - s)) for s in range(1, p)])
    sizes = rng.choice(np.arange(1, p), n_samples, p=size_mass / size_mass.sum())
    masks = np.zeros((n_samples, p), dtype=bool)
    for i, s in enumerate(sizes):
        masks[i, rng.choice(p, s, replace=False)] = True
    return masks, np.ones(n_samples)


@dataclass
class ShapExplanation:
    phi0: float
    phi: np.ndarray
    features: list
    target: str
    prediction: float
    x: np.ndarray = field(default=None)
    meta: dict = field(default_factory=dict)

    @property
    def efficiency_gap(self) -> float:
        return abs(self.phi0 + float(np.sum(self.phi)) - self.prediction)

    def to_dict(self) -> dict:
        return {
            "base_value": self.phi0,
            "phi": dict(zip(self.features, map(float, self.phi))),
            "prediction": self.prediction,
            "target": self.target,
            "x": None if self.x is None else [float(v) for v in self.x],
            "meta": self.meta,
        }

    def rows(self) -> list[list]:
        return [[f, repr(float(v)), repr(self.phi0), repr(self.prediction), self.target]
                for f, v in zip(self.features, self.phi)]


def kernel_shap(spec: ValueFunctionSpec, x) -> ShapExplanation:
    """Constrained weighted least squares over coalitions.

    phi0 is pinned to v(empty) and the attributions are forced to sum to
    v(all) - phi0 by eliminating the last player.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    names = spec.players
    p = len(names)
    if p < 2:
        raise ValueError("kernel SHAP needs at least two players")
    rng = np.random.default_rng(spec.seed)
    masks, weights = _coalitions(p, spec.n_samples, rng)
    empty = np.zeros((1, p), dtype=bool)
    values = _coalition_values(spec, x, np.vstack([empty, masks]))
    phi0, v = float(values[0]), values[1:]
    prediction = float(spec.evaluate(x[None, :])[0])
    total = prediction - phi0

    Z = masks.astype(np.float64)
    target = v - phi0 - Z[:, -1] * total
    A = Z[:, :-1] - Z[:, [-1]]
    sw = np.sqrt(weights)[:, None]
    Aw, bw = A * sw, target * sw[:, 0]
    gram = Aw.T @ Aw
    if np.linalg.matrix_rank(gram) < p - 1:
        raise ShapRankError("coalition design is singular; draw more samples")
    head = np.linalg.solve(gram, Aw.T @ bw)
    phi = np.append(head, total - head.sum())
    meta = {"value_function": "marginal", "M": spec.M, "seed": spec.seed,
            "exact": p <= EXACT_MAX_PLAYERS, "n_coalitions": int(len(masks))}
    return ShapExplanation(phi0, phi, names, spec.describe(), prediction, x, meta)


def adjustment_shap(spec: ValueFunctionSpec, x) -> ShapExplanation:
    """Attribute the gap between the refined model and its baseline."""
    if not spec.target.startswith("adjustment"):
        raise ValueError("adjustment_shap needs an adjustment-* target")
    return kernel_shap(spec, x)


def value_standard_error(spec: ValueFunctionSpec, target: str | None = None) -> float:
    """Monte Carlo standard error of a marginal value built from M background rows."""
    if target is None:
        vals = spec.evaluate(spec.sample)
    else:
        kind = target.removeprefix("adjustment-")
        vals = _predict_target(spec.model, spec.sample, kind, spec.alpha)
    return float(np.std(vals, ddof=1) / np.sqrt(spec.M))


def explain_many(spec: ValueFunctionSpec, X) -> list[ShapExplanation]:
    return [kernel_shap(spec, x) for x in np.atleast_2d(X)]


def shap_importance(explanations) -> np.ndarray:
    """Mean absolute attribution per player."""
    phis = np.array([e.phi for e in explanations])
    return np.mean(np.abs(phis), axis=0) if len(phis) else np.zeros(0)


def dependence_data(explanations, feature: int, color_by: int | None = None) -> np.ndarray:
    """(x_j, phi_j) pairs, with a third column of x_color when requested."""
    cols = [[e.x[feature] for e in explanations], [e.phi[feature] for e in explanations]]
    if color_by is not None:
        cols.append([e.x[color_by] for e in explanations])
    return np.column_stack(cols)


def write_explanations(explanations, json_path, csv_path):
    with open(json_path, "w") as fh:
        json.dump([e.to_dict() for e in explanations], fh, indent=2, sort_keys=True)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "feature", "phi", "base_value", "prediction", "target"])
        for i, e in enumerate(explanations):
            for row in e.rows():
                w.writerow([i, *row])


def linear_value_model(coef) -> Callable:
    coef = np.asarray(coef, dtype=np.float64)
    return lambda X: np.atleast_2d(X) @ coef

