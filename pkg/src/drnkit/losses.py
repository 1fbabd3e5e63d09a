"""Training objectives for the refinement network.

Every loss accepts a RefinedDistribution whose masses may be a Tensor, and
returns a scalar Tensor so the same code serves training and evaluation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from drnkit.autodiff import Tensor, as_tensor
from drnkit.drn import MASS_FLOOR, RefinedDistribution

DENSITY_FLOOR = 1e-30
PROB_CLIP = 1e-12

diagnostics = {"nll_clamps": 0}


@dataclass(frozen=True)
class PenaltyWeights:
    alpha_kl: float = 0.0
    alpha_rough: float = 0.0
    alpha_mean: float = 0.0

    def __post_init__(self):
        if min(self.alpha_kl, self.alpha_rough, self.alpha_mean) < 0:
            raise ValueError("penalty weights must be nonnegative")

    def to_dict(self):
        return asdict(self)


def _log_masses(rd: RefinedDistribution) -> Tensor:
    if rd.log_masses is not None:
        return as_tensor(rd.log_masses)
    return as_tensor(rd.masses).clip(MASS_FLOOR, None).log()


def nll_loss(rd: RefinedDistribution, y) -> Tensor:
    """Summed negative log density; densities are floored at 1e-30."""
    y = np.asarray(y, dtype=np.float64)
    k = rd.partition.interval_index(y)
    inside = k >= 0
    rows = np.flatnonzero(inside)
    total = Tensor(0.0)
    if rows.size:
        log_m = _log_masses(rd)[rows].take_along(k[rows][:, None], axis=1).reshape(-1)
        log_w = np.log(rd.partition.widths[k[rows]])
        log_dens = log_m - log_w
        floor = np.log(DENSITY_FLOOR)
        clamped = log_dens.data < floor
        if clamped.any():
            diagnostics["nll_clamps"] += int(clamped.sum())
            log_dens = log_dens.clip(floor, None)
        total = total - log_dens.sum()
    out_rows = np.flatnonzero(~inside)
    if out_rows.size:
        tail = rd.baseline[out_rows].logpdf(y[out_rows])
        tail = np.maximum(tail, np.log(DENSITY_FLOOR))
        total = total - float(tail.sum())
    return total


def cdf_at_cutpoints(rd: RefinedDistribution) -> Tensor:
    """Refined CDF at c_1..c_K as a tensor, shape (n, K)."""
    return as_tensor(rd.masses).cumsum(axis=1) + rd.terms.F_lo[:, None]


def jbce_from_cdf(F: Tensor, cutpoints, y) -> Tensor:
    """-sum_k sum_i [1{y_i <= c_k} log F_ik + (1 - 1{y_i <= c_k}) log(1 - F_ik)]."""
    y = np.asarray(y, dtype=np.float64)
    ind = (y[:, None] <= np.asarray(cutpoints)[None, :]).astype(np.float64)
    F = as_tensor(F).clip(PROB_CLIP, 1 - PROB_CLIP)
    return -(F.log() * ind + (1.0 - F).log() * (1.0 - ind)).sum()


def jbce_loss(rd: RefinedDistribution, y) -> Tensor:
    return jbce_from_cdf(cdf_at_cutpoints(rd), rd.partition.cutpoints[1:], y)


def kl_penalty(rd: RefinedDistribution) -> Tensor:
    """Batch mean of -sum_k b_k log a_k (discretised forward KL, weight-free constant dropped)."""
    b = rd.terms.b
    log_a = _log_masses(rd) - rd.terms.log_b
    return -(log_a * b).sum(axis=1).mean()


def roughness_penalty(rd: RefinedDistribution) -> Tensor:
    """Batch mean of summed squared second differences of the density levels."""
    if rd.partition.K < 3:
        return Tensor(0.0)
    d = as_tensor(rd.masses) / rd.partition.widths
    second = d.diff(axis=1).diff(axis=1)
    return (second * second).sum(axis=1).mean()


def refined_mean(rd: RefinedDistribution) -> Tensor:
    return as_tensor(rd.masses) @ rd.partition.midpoints + rd.terms.tail_mean


def mean_penalty(rd: RefinedDistribution, baseline_means=None) -> Tensor:
    base = rd.terms.mean if baseline_means is None else np.asarray(baseline_means, dtype=np.float64)
    diff = refined_mean(rd) - base
    return (diff * diff).mean()


def composite_loss(rd: RefinedDistribution, y, weights: PenaltyWeights) -> Tensor:
    """Per-observation JBCE plus the weighted KL, roughness and mean penalties."""
    n = len(rd)
    loss = jbce_loss(rd, y) / n
    if weights.alpha_kl:
        loss = loss + weights.alpha_kl * kl_penalty(rd)
    if weights.alpha_rough:
        loss = loss + weights.alpha_rough * roughness_penalty(rd)
    if weights.alpha_mean:
        loss = loss + weights.alpha_mean * mean_penalty(rd)
    return loss
