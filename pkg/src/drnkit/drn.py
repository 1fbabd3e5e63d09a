"""Refined distributions: baseline interval masses, adjustment factors and queries."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from drnkit.autodiff import MlpParams, Tensor, as_tensor, data_of, mlp_forward
from drnkit.glm import GammaDist, GammaGlmModel
from drnkit.partition import Partition

MASS_FLOOR = 1e-30


class DegenerateBaselineError(ValueError):
    """The baseline puts no mass on the refinement region."""


def baseline_masses(dist: GammaDist, partition: Partition) -> np.ndarray:
    """b_k = F(c_k) - F(c_{k-1}); shape (n, K) for a batch, (K,) for a scalar dist."""
    c = partition.cutpoints
    shape = np.asarray(dist.shape)
    if shape.ndim == 0:
        return np.diff(dist.cdf(c))
    F = GammaDist(shape[:, None], np.asarray(dist.scale)[:, None]).cdf(c[None, :])
    return np.diff(F, axis=1)


def ppc_transform(dist: GammaDist, partition: Partition):
    """Piecewise-constant levels b_k/|T_k| inside the region; outside, the baseline pdf applies."""
    return baseline_masses(dist, partition) / partition.widths


def adjustment_factors(l_raw, b, region_mass) -> np.ndarray:
    """a_k = region_mass * exp(l_k) / sum_j b_j exp(l_j), via a stable softmax of log b + l."""
    l_raw = np.asarray(l_raw, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(np.all(b <= 0, axis=-1)):
        raise DegenerateBaselineError("every baseline interval mass is zero")
    s = np.log(np.maximum(b, MASS_FLOOR)) + l_raw
    s = s - s.max(axis=-1, keepdims=True)
    soft = np.exp(s) / np.exp(s).sum(axis=-1, keepdims=True)
    m = np.asarray(region_mass)[..., None] * soft if np.ndim(b) > 1 else region_mass * soft
    return m / np.maximum(b, MASS_FLOOR)


@dataclass
class BaselineTerms:
    """Everything about the frozen baseline that training needs, computed once per dataset."""

    dist: GammaDist
    b: np.ndarray
    F_lo: np.ndarray
    F_hi: np.ndarray
    tail_mean: np.ndarray
    mean: np.ndarray

    @property
    def region_mass(self) -> np.ndarray:
        return self.F_hi - self.F_lo

    @property
    def log_b(self) -> np.ndarray:
        return np.log(np.maximum(self.b, MASS_FLOOR))

    def __len__(self):
        return self.b.shape[0]

    def subset(self, idx) -> "BaselineTerms":
        return BaselineTerms(self.dist[idx], self.b[idx], self.F_lo[idx], self.F_hi[idx],
                             self.tail_mean[idx], self.mean[idx])


def baseline_terms(dist: GammaDist, partition: Partition) -> BaselineTerms:
    shape = np.atleast_1d(dist.shape)
    scale = np.atleast_1d(dist.scale)
    shape, scale = np.broadcast_arrays(shape, scale)
    dist = GammaDist(shape.copy(), scale.copy())
    b = baseline_masses(dist, partition)
    F_lo = dist.cdf(partition.lower)
    F_hi = dist.cdf(partition.upper)
    tails = dist.partial_expectation(0.0, partition.lower) + dist.partial_expectation(partition.upper, np.inf)
    return BaselineTerms(dist, b, F_lo, F_hi, tails, dist.mean)


def refine_log_masses(logits, terms: BaselineTerms):
    """log m = log(region mass) + log softmax(log b + l); works on tensors or arrays."""
    if np.any(terms.region_mass <= 0):
        raise DegenerateBaselineError("baseline puts no mass on the refinement region")
    s = as_tensor(logits) + terms.log_b
    log_soft = s - s.logsumexp(axis=-1, keepdims=True)
    return log_soft + np.log(terms.region_mass)[:, None]


@dataclass
class RefinedDistribution:
    """A batch of refined distributions sharing one partition.

    ``masses`` holds the refined interval masses m_k = a_k b_k, one row per
    instance. It may be a Tensor while training; every query reads plain values.
    """

    partition: Partition
    terms: BaselineTerms
    masses: object
    log_masses: object = None

    def __post_init__(self):
        m = data_of(self.masses)
        if m.ndim == 1:
            self.masses = m[None, :] if not isinstance(self.masses, Tensor) else self.masses.reshape(1, -1)
        if data_of(self.masses).shape != self.terms.b.shape:
            raise ValueError("mass matrix does not match baseline masses")

    @classmethod
    def from_logits(cls, partition: Partition, terms: BaselineTerms, logits) -> "RefinedDistribution":
        log_m = refine_log_masses(logits, terms)
        return cls(partition, terms, log_m.exp(), log_m)

    @classmethod
    def from_adjustments(cls, partition: Partition, dist: GammaDist, a) -> "RefinedDistribution":
        """Build from positive factors, rescaled so the region keeps its baseline mass."""
        terms = baseline_terms(dist, partition)
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        m = a * terms.b
        total = m.sum(axis=1, keepdims=True)
        scale = np.divide(terms.region_mass[:, None], total, out=np.ones_like(total), where=total > 0)
        return cls(partition, terms, m * scale)

    def __len__(self):
        return self.terms.b.shape[0]

    def __getitem__(self, idx) -> "RefinedDistribution":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        log_m = None if self.log_masses is None else data_of(self.log_masses)[idx]
        return RefinedDistribution(self.partition, self.terms.subset(idx), self.m[idx], log_m)

    # plain-valued views ---------------------------------------------------

    @cached_property
    def m(self) -> np.ndarray:
        return data_of(self.masses)

    @property
    def b(self) -> np.ndarray:
        return self.terms.b

    @property
    def baseline(self) -> GammaDist:
        return self.terms.dist

    @property
    def region_mass(self) -> np.ndarray:
        return self.terms.region_mass

    @property
    def a(self) -> np.ndarray:
        return self.m / np.maximum(self.b, MASS_FLOOR)

    @property
    def nonphysical(self) -> np.ndarray:
        """Intervals whose baseline mass was floored, so a_k is not meaningful."""
        return self.b < MASS_FLOOR

    @property
    def levels(self) -> np.ndarray:
        return self.m / self.partition.widths

    @cached_property
    def cdf_at_cutpoints(self) -> np.ndarray:
        cum = np.concatenate([np.zeros((len(self), 1)), np.cumsum(self.m, axis=1)], axis=1)
        return self.terms.F_lo[:, None] + cum

    # queries ----------------------------------------------------------------

    def _rows(self, y):
        y = np.asarray(y, dtype=np.float64)
        return np.broadcast_to(y, (len(self),)) if y.ndim == 0 else y

    def pdf(self, y) -> np.ndarray:
        y = self._rows(y)
        k = self.partition.interval_index(y)
        inside = k >= 0
        rows = np.arange(len(self))
        level = self.levels[rows, np.where(inside, k, 0)]
        return np.where(inside, level, self.baseline.pdf(y))

    def logpdf(self, y) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.pdf(y))

    def cdf(self, y) -> np.ndarray:
        y = self._rows(y)
        k = self.partition.interval_index(y)
        inside = k >= 0
        kk = np.where(inside, k, 0)
        rows = np.arange(len(self))
        c = self.partition.cutpoints
        region = self.cdf_at_cutpoints[rows, kk] + self.levels[rows, kk] * (y - c[kk])
        return np.where(inside, region, self.baseline.cdf(y))

    def quantile(self, alpha) -> np.ndarray:
        alpha = self._rows(alpha)
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("quantile level must lie in (0, 1)")
        edges = self.cdf_at_cutpoints
        inside = (alpha >= self.terms.F_lo) & (alpha < self.terms.F_hi)
        K = self.partition.K
        k = np.clip((edges <= alpha[:, None]).sum(axis=1) - 1, 0, K - 1)
        rows = np.arange(len(self))
        level = self.levels[rows, k]
        c = self.partition.cutpoints
        with np.errstate(divide="ignore", invalid="ignore"):
            region = c[k] + (alpha - edges[rows, k]) / level
        region = np.clip(np.where(level > 0, region, c[k]), c[k], c[k + 1])
        out = region.copy()
        if np.any(~inside):
            out[~inside] = self.baseline[~inside].quantile(alpha[~inside])
        return out

    def mean(self) -> np.ndarray:
        return self.terms.tail_mean + self.m @ self.partition.midpoints

    def second_moment(self) -> np.ndarray:
        c = self.partition.cutpoints
        lo, hi = c[:-1], c[1:]
        inner = (lo**2 + lo * hi + hi**2) / 3.0
        d = self.baseline
        tails = d.partial_second_moment(0.0, self.partition.lower) + d.partial_second_moment(self.partition.upper, np.inf)
        return tails + self.m @ inner

    def variance(self) -> np.ndarray:
        return np.maximum(self.second_moment() - self.mean() ** 2, 0.0)


def drn_pdf(rd: RefinedDistribution, y):
    return rd.pdf(y)


def drn_cdf(rd: RefinedDistribution, y):
    return rd.cdf(y)


def drn_quantile(rd: RefinedDistribution, alpha):
    return rd.quantile(alpha)


def drn_mean(rd: RefinedDistribution):
    return rd.mean()


def drn_variance(rd: RefinedDistribution):
    return rd.variance()


@dataclass
class DrnModel:
    baseline: GammaGlmModel
    partition: Partition
    net: MlpParams
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_outputs != self.partition.K:
            raise ValueError(f"network emits {self.net.n_outputs} logits for {self.partition.K} intervals")
        if self.net.n_inputs != self.baseline.n_features:
            raise ValueError("network fan-in must equal the baseline feature count")

    def terms(self, X) -> BaselineTerms:
        return baseline_terms(self.baseline.conditional(np.atleast_2d(X)), self.partition)

    def logits(self, X) -> np.ndarray:
        return mlp_forward(self.net, np.atleast_2d(X))

    def predict(self, X, terms: BaselineTerms | None = None) -> RefinedDistribution:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        terms = terms if terms is not None else self.terms(X)
        log_m = refine_log_masses(self.logits(X), terms).data
        return RefinedDistribution(self.partition, terms, np.exp(log_m), log_m)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "kind": "drn",
            "baseline": self.baseline.to_dict(),
            "partition": self.partition.cutpoints.tolist(),
            "net": self.net.to_dict(),
            "config": self.config,
            "config_hash": self.config_hash(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DrnModel":
        return cls(GammaGlmModel.from_dict(d["baseline"]), Partition(np.asarray(d["partition"])),
                   MlpParams.from_dict(d["net"]), d.get("config", {}))


def drn_forward(model: DrnModel, x) -> RefinedDistribution:
    return model.predict(x)
