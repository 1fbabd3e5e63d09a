"""Competing models: the combined actuarial neural network (CANN), a gamma mixture
density network (MDN) and a histogram-style deep distributional regression (DDR)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from drnkit.autodiff import MlpParams, Tensor, as_tensor, init_mlp, mlp_forward
from drnkit.glm import GammaDist, GammaGlmModel
from drnkit.losses import jbce_from_cdf
from drnkit.partition import Partition, drn_partition
from drnkit.train import TrainingConfig, train

CREDIBILITY_BIAS = 3.0
# raw MDN outputs are clipped before the positive transform to keep exp finite
RAW_CLIP = 30.0


def _bundle_meta(config: TrainingConfig | None) -> dict:
    return {"training": config.to_dict()} if config is not None else {}


# --------------------------------------------------------------------------
# CANN


def cann_predictor(glm: GammaGlmModel, z, X):
    """Blended log-mean: alpha * GLM linear predictor + (1 - alpha) * network adjustment."""
    z = as_tensor(z)
    alpha = z[:, 0].sigmoid()
    eta = glm.linear_predictor(X)
    return alpha * eta + (1.0 - alpha) * z[:, 1]


def cann_deviance(log_mu, y) -> Tensor:
    """Mean gamma unit deviance written in terms of log mu."""
    log_mu = as_tensor(log_mu)
    y = np.asarray(y, dtype=np.float64)
    return (2.0 * ((-log_mu).exp() * y - 1.0 - np.log(y) + log_mu)).mean()


@dataclass
class CannModel:
    glm: GammaGlmModel
    net: MlpParams
    dispersion: float = 1.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_outputs != 2:
            raise ValueError("a CANN network has exactly two heads")

    def credibility(self, X) -> np.ndarray:
        return special.expit(mlp_forward(self.net, np.atleast_2d(X))[:, 0])

    def mean(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return np.exp(cann_predictor(self.glm, mlp_forward(self.net, X), X).data)

    def predict(self, X) -> GammaDist:
        mu = self.mean(X)
        return GammaDist(np.full(mu.shape, 1.0 / self.dispersion), mu * self.dispersion)

    def to_dict(self) -> dict:
        return {"kind": "cann", "glm": self.glm.to_dict(), "net": self.net.to_dict(),
                "dispersion": self.dispersion, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "CannModel":
        return cls(GammaGlmModel.from_dict(d["glm"]), MlpParams.from_dict(d["net"]),
                   float(d["dispersion"]), d.get("config", {}))


def cann_mean(model: CannModel, x) -> np.ndarray:
    return model.mean(x)


def cann_loss(model: CannModel, batch) -> float:
    X, y = batch
    return float(cann_deviance(np.log(model.mean(X)), y).data)


def cann_objective(glm: GammaGlmModel, X_by_split: dict, y_by_split: dict):
    def loss_fn(z, batch):
        _, idx, split = batch
        return cann_deviance(cann_predictor(glm, z, X_by_split[split][idx]), y_by_split[split][idx])

    return loss_fn


def init_cann_net(n_inputs: int, hidden, rng, credibility_bias: float = CREDIBILITY_BIAS) -> MlpParams:
    net = init_mlp(n_inputs, hidden, 2, rng)
    arrays = net.arrays()
    arrays[-1] = arrays[-1].copy()
    arrays[-1][0] = credibility_bias
    return MlpParams.from_arrays(arrays, net.slope)


def fit_cann(glm: GammaGlmModel, X_train, y_train, X_val, y_val, config: TrainingConfig):
    """Train the CANN with the deviance loss; dispersion is then re-estimated on train."""
    Xs = {"train": np.asarray(X_train, dtype=np.float64), "val": np.asarray(X_val, dtype=np.float64)}
    ys = {"train": np.asarray(y_train, dtype=np.float64), "val": np.asarray(y_val, dtype=np.float64)}
    net = init_cann_net(Xs["train"].shape[1], config.hidden, np.random.default_rng(config.seed))
    net, logbook = train(net, Xs["train"], Xs["val"], config, cann_objective(glm, Xs, ys))
    model = CannModel(glm, net, 1.0, _bundle_meta(config))
    mu = model.mean(Xs["train"])
    model.dispersion = float(np.mean(((ys["train"] - mu) / mu) ** 2))
    return model, logbook


# --------------------------------------------------------------------------
# MDN


def _positive(raw, activation: str):
    raw = as_tensor(raw).clip(-RAW_CLIP, RAW_CLIP)
    return raw.exp() if activation == "exp" else raw.softplus()


def mdn_parameters(z, n_components: int, activation: str = "exp"):
    """Split raw outputs into (log weights, shapes, scales), each (n, K_mix)."""
    z = as_tensor(z)
    k = n_components
    if z.shape[1] != 3 * k:
        raise ValueError(f"expected {3 * k} outputs for {k} components, got {z.shape[1]}")
    logits = z[:, :k]
    log_w = logits - logits.logsumexp(axis=1, keepdims=True)
    return log_w, _positive(z[:, k:2 * k], activation), _positive(z[:, 2 * k:], activation)


def mixture_nll(log_w, shape, scale, y) -> Tensor:
    """Mean negative log-likelihood of a gamma mixture via log-sum-exp."""
    y = np.asarray(y, dtype=np.float64)[:, None]
    log_w, shape, scale = as_tensor(log_w), as_tensor(shape), as_tensor(scale)
    log_f = (shape - 1.0) * np.log(y) - y / scale - shape.lgamma() - shape * scale.log()
    return -(log_w + log_f).logsumexp(axis=1).mean()


class MixtureGammaDist:
    """Batch of gamma mixtures; every argument array is (n, K_mix)."""

    def __init__(self, weights, shape, scale):
        self.weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
        self.shape = np.atleast_2d(np.asarray(shape, dtype=np.float64))
        self.scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
        if not (self.weights.shape == self.shape.shape == self.scale.shape):
            raise ValueError("mixture parameter arrays must share one shape")

    def __len__(self):
        return self.weights.shape[0]

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return MixtureGammaDist(self.weights[idx], self.shape[idx], self.scale[idx])

    @property
    def mean(self) -> np.ndarray:
        return np.sum(self.weights * self.shape * self.scale, axis=1)

    def pdf(self, y) -> np.ndarray:
        return np.exp(self.logpdf(y))

    def logpdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)[:, None]
        with np.errstate(divide="ignore"):
            log_f = ((self.shape - 1) * np.log(y) - y / self.scale - special.gammaln(self.shape)
                     - self.shape * np.log(self.scale))
            log_f = np.where(y > 0, log_f, -np.inf)
            return special.logsumexp(np.log(self.weights) + log_f, axis=1)

    def _cdf_rows(self, rows, t):
        t = np.maximum(np.asarray(t, dtype=np.float64), 0.0)[:, None]
        return np.sum(self.weights[rows] * special.gammainc(self.shape[rows], t / self.scale[rows]), axis=1)

    def cdf(self, y) -> np.ndarray:
        return self._cdf_rows(np.arange(len(self)), y)

    def quantile(self, alpha, tol: float = 1e-13) -> np.ndarray:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(self),))
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        comp = special.gammaincinv(self.shape, alpha[:, None]) * self.scale
        lo, hi = comp.min(axis=1), comp.max(axis=1)
        rows = np.arange(len(self))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self._cdf_rows(rows, mid) < alpha
            lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
            if np.all(hi - lo <= tol * np.maximum(hi, 1.0)):
                break
        return 0.5 * (lo + hi)

    def crps(self, y) -> np.ndarray:
        from drnkit.metrics import TAIL_LEVEL, _crps_segment_quad

        y = np.asarray(y, dtype=np.float64)
        lo = np.minimum((special.gammaincinv(self.shape, TAIL_LEVEL) * self.scale).min(axis=1), y)
        hi = np.maximum((special.gammaincinv(self.shape, 1 - TAIL_LEVEL) * self.scale).max(axis=1), y)
        return _crps_segment_quad(self._cdf_rows, y, lo, hi)


@dataclass
class MdnModel:
    net: MlpParams
    n_components: int
    activation: str = "exp"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_outputs != 3 * self.n_components:
            raise ValueError("MDN output width must be three times the component count")

    def predict(self, X) -> MixtureGammaDist:
        z = mlp_forward(self.net, np.atleast_2d(np.asarray(X, dtype=np.float64)))
        log_w, shape, scale = mdn_parameters(z, self.n_components, self.activation)
        return MixtureGammaDist(np.exp(log_w.data), shape.data, scale.data)

    def to_dict(self) -> dict:
        return {"kind": "mdn", "net": self.net.to_dict(), "n_components": self.n_components,
                "activation": self.activation, "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "MdnModel":
        return cls(MlpParams.from_dict(d["net"]), int(d["n_components"]), d["activation"], d.get("config", {}))


def mdn_nll(model: MdnModel, batch) -> float:
    X, y = batch
    z = mlp_forward(model.net, np.atleast_2d(X))
    return float(mixture_nll(*mdn_parameters(z, model.n_components, model.activation), y).data)


def mdn_distribution_queries(model: MdnModel, x) -> MixtureGammaDist:
    return model.predict(x)


def mdn_objective(y_by_split: dict, n_components: int, activation: str):
    def loss_fn(z, batch):
        _, idx, split = batch
        return mixture_nll(*mdn_parameters(z, n_components, activation), y_by_split[split][idx])

    return loss_fn


def fit_mdn(X_train, y_train, X_val, y_val, config: TrainingConfig):
    ys = {"train": np.asarray(y_train, dtype=np.float64), "val": np.asarray(y_val, dtype=np.float64)}
    k = config.mixture_components
    net = init_mlp(np.shape(X_train)[1], config.hidden, 3 * k, np.random.default_rng(config.seed))
    net, logbook = train(net, X_train, X_val, config, mdn_objective(ys, k, config.mdn_activation))
    return MdnModel(net, k, config.mdn_activation, _bundle_meta(config)), logbook


# --------------------------------------------------------------------------
# DDR


class HistogramDist:
    """Piecewise-constant densities on a shared partition, zero outside [c_0, c_K)."""

    def __init__(self, partition: Partition, probs):
        self.partition = partition
        self.probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if self.probs.shape[1] != partition.K:
            raise ValueError("need one probability per interval")

    def __len__(self):
        return self.probs.shape[0]

    def __getitem__(self, idx):
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return HistogramDist(self.partition, self.probs[idx])

    @property
    def cdf_at_cutpoints(self) -> np.ndarray:
        F = np.concatenate([np.zeros((len(self), 1)), np.cumsum(self.probs, axis=1)], axis=1)
        F[:, -1] = 1.0
        return F

    @property
    def mean(self) -> np.ndarray:
        return self.probs @ self.partition.midpoints

    def pdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        k = self.partition.interval_index(y)
        inside = k >= 0
        out = np.zeros(y.shape)
        rows = np.flatnonzero(inside)
        out[rows] = self.probs[rows, k[rows]] / self.partition.widths[k[rows]]
        return out

    def cdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        c = self.partition.cutpoints
        F = self.cdf_at_cutpoints
        return np.array([np.interp(yi, c, Fi) for yi, Fi in zip(y, F)])

    def quantile(self, alpha) -> np.ndarray:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (len(self),))
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        c = self.partition.cutpoints
        F = self.cdf_at_cutpoints
        out = np.empty(len(self))
        for i in range(len(self)):
            k = int(np.clip(np.searchsorted(F[i], alpha[i], side="left"), 1, len(c) - 1))
            span = F[i, k] - F[i, k - 1]
            frac = (alpha[i] - F[i, k - 1]) / span if span > 0 else 0.0
            out[i] = c[k - 1] + frac * (c[k] - c[k - 1])
        return out

    def crps(self, y) -> np.ndarray:
        from drnkit.metrics import piecewise_linear_crps

        y = np.asarray(y, dtype=np.float64)
        c0, cK = self.partition.lower, self.partition.upper
        outside = np.maximum(c0 - y, 0.0) + np.maximum(y - cK, 0.0)
        return piecewise_linear_crps(self.partition.cutpoints, self.cdf_at_cutpoints, y) + outside


@dataclass
class DdrModel:
    net: MlpParams
    partition: Partition
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.net.n_outputs != self.partition.K:
            raise ValueError("DDR output width must equal the interval count")

    def probabilities(self, X) -> np.ndarray:
        z = as_tensor(mlp_forward(self.net, np.atleast_2d(np.asarray(X, dtype=np.float64))))
        return z.softmax(axis=1).data

    def predict(self, X) -> HistogramDist:
        return HistogramDist(self.partition, self.probabilities(X))

    def to_dict(self) -> dict:
        return {"kind": "ddr", "net": self.net.to_dict(), "partition": self.partition.cutpoints.tolist(),
                "config": self.config}

    @classmethod
    def from_dict(cls, d: dict) -> "DdrModel":
        return cls(MlpParams.from_dict(d["net"]), Partition(np.asarray(d["partition"])), d.get("config", {}))


def ddr_forward(model: DdrModel, x) -> np.ndarray:
    return model.probabilities(x)


def ddr_queries(model: DdrModel, x) -> HistogramDist:
    return model.predict(x)


def ddr_jbce(z, partition: Partition, y) -> Tensor:
    """Per-observation JBCE of the softmax histogram at c_1..c_K."""
    probs = as_tensor(z).softmax(axis=1)
    F = probs.cumsum(axis=1)
    return jbce_from_cdf(F, partition.cutpoints[1:], y) / len(np.asarray(y))


def ddr_loss(model: DdrModel, batch) -> float:
    X, y = batch
    return float(ddr_jbce(mlp_forward(model.net, np.atleast_2d(X)), model.partition, y).data)


def ddr_objective(partition: Partition, y_by_split: dict):
    def loss_fn(z, batch):
        _, idx, split = batch
        return ddr_jbce(z, partition, y_by_split[split][idx])

    return loss_fn


def fit_ddr(X_train, y_train, X_val, y_val, config: TrainingConfig, partition: Partition | None = None):
    ys = {"train": np.asarray(y_train, dtype=np.float64), "val": np.asarray(y_val, dtype=np.float64)}
    if partition is None:
        partition = drn_partition(ys["train"], config.proportion, config.min_obs)
    net = init_mlp(np.shape(X_train)[1], config.hidden, partition.K, np.random.default_rng(config.seed))
    net, logbook = train(net, X_train, X_val, config, ddr_objective(partition, ys))
    return DdrModel(net, partition, _bundle_meta(config)), logbook


MODEL_KINDS = {"cann": CannModel, "mdn": MdnModel, "ddr": DdrModel}
