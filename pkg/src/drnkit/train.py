"""Mini-batch Adam with dropout and early stopping, plus the DRN fitting routine."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from drnkit.autodiff import (MlpParams, Tensor, TrainingDivergenceError, init_mlp, mlp_apply,
                             mlp_value_and_grad, sample_dropout_masks)
from drnkit.losses import PenaltyWeights

log = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    dropout_rate: float = 0.0
    hidden_layers: int = 2
    neurons_per_layer: int = 64
    patience: int = 30
    max_epochs: int = 1000
    penalty_weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    seed: int = 0
    # model-specific knobs; ignored by models that do not use them
    proportion: float = 0.025
    min_obs: int = 5
    mixture_components: int = 10
    mdn_activation: str = "exp"
    select_on: str = "loss"

    def __post_init__(self):
        if isinstance(self.penalty_weights, dict):
            object.__setattr__(self, "penalty_weights", PenaltyWeights(**self.penalty_weights))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.hidden_layers < 1 or self.neurons_per_layer < 1:
            raise ValueError("batch_size, hidden_layers and neurons_per_layer must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.patience < 1 or self.max_epochs < 1:
            raise ValueError("patience and max_epochs must be positive")
        if self.select_on not in ("loss", "crps"):
            raise ValueError("select_on must be 'loss' or 'crps'")
        if self.mdn_activation not in ("exp", "softplus"):
            raise ValueError("mdn_activation must be 'exp' or 'softplus'")

    @property
    def hidden(self) -> list[int]:
        return [self.neurons_per_layer] * self.hidden_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)

    def with_(self, **changes) -> "TrainingConfig":
        return replace(self, **changes)


# Tuned settings for the synthetic study.
TABLE3 = {
    "cann": TrainingConfig(learning_rate=0.00638, batch_size=256, dropout_rate=0.100,
                           hidden_layers=3, neurons_per_layer=512),
    "mdn": TrainingConfig(learning_rate=0.00451, batch_size=128, dropout_rate=0.5,
                          hidden_layers=1, neurons_per_layer=256, mixture_components=10),
    "ddr": TrainingConfig(learning_rate=0.00642, batch_size=256, dropout_rate=0.0192,
                          hidden_layers=3, neurons_per_layer=32, proportion=0.03, min_obs=0),
    "drn": TrainingConfig(learning_rate=0.00081, batch_size=256, dropout_rate=0.140,
                          hidden_layers=3, neurons_per_layer=128, proportion=0.025, min_obs=5,
                          penalty_weights=PenaltyWeights(0.00047, 0.1, 0.01)),
}

# Tuned settings for the real-data (claim amount) study.
TABLE6 = {
    "cann": TrainingConfig(learning_rate=0.00890, batch_size=256, dropout_rate=0.43674,
                           hidden_layers=4, neurons_per_layer=512),
    "mdn": TrainingConfig(learning_rate=0.00845, batch_size=256, dropout_rate=0.43747,
                          hidden_layers=3, neurons_per_layer=256, mixture_components=4),
    "ddr": TrainingConfig(learning_rate=0.00578, batch_size=256, dropout_rate=0.5,
                          hidden_layers=1, neurons_per_layer=512, proportion=0.15, min_obs=0),
    "drn": TrainingConfig(learning_rate=0.00291, batch_size=512, dropout_rate=0.26987,
                          hidden_layers=2, neurons_per_layer=512, proportion=0.125, min_obs=3,
                          penalty_weights=PenaltyWeights(0.00162, 1e-5, 1e-6)),
}


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns the new params and state."""
    g_arrays = grads.arrays()
    if not all(np.isfinite(g).all() for g in g_arrays):
        raise TrainingDivergenceError("non-finite gradient passed to Adam")
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params.arrays(), g_arrays, state.m, state.v):
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return (MlpParams.from_arrays(new_p, params.slope),
            AdamState(new_m, new_v, t, state.beta1, state.beta2, state.eps))


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n < 1:
        raise ValueError("cannot batch an empty dataset")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    @property
    def epochs(self) -> int:
        return len(self.val_loss)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va)])


def train(params: MlpParams, X_train, X_val, config: TrainingConfig, loss_fn: Callable,
          val_fn: Callable | None = None):
    """Fit ``params`` by mini-batch Adam and return the best-validation weights.

    ``loss_fn(z, batch)`` gets the network output and ``batch = (X, idx, split)``,
    where ``idx`` indexes rows of the named split. The validation score is
    ``loss_fn`` on the whole validation set without dropout unless ``val_fn(params)``
    is given.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    if len(X_train) == 0 or len(X_val) == 0:
        raise ValueError("training and validation splits must be nonempty")
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    val_idx = np.arange(len(X_val))

    def validate(p: MlpParams) -> float:
        if val_fn is not None:
            return float(val_fn(p))
        value, _ = _value_only(p, (X_val, val_idx, "val"), loss_fn)
        return value

    logbook = TrainLog()
    best_params, best_val = params, np.inf
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(make_batches(len(X_train), config.batch_size, rng)):
            masks = sample_dropout_masks(params, len(idx), config.dropout_rate, rng)
            value, grads = mlp_value_and_grad(params, (X_train[idx], idx, "train"), loss_fn,
                                              masks, config.dropout_rate, batch_index=b)
            params, state = adam_step(params, grads, state, config.learning_rate)
            total += value * len(idx)
            count += len(idx)
        val = validate(params)
        if not np.isfinite(val):
            raise TrainingDivergenceError(f"validation loss became {val} at epoch {epoch}")
        logbook.train_loss.append(total / count)
        logbook.val_loss.append(val)
        if val < best_val - IMPROVEMENT_TOL:
            best_val, best_params, since_best = val, params, 0
            logbook.best_epoch = epoch
        else:
            since_best += 1
        log.debug("epoch %d train %.6f val %.6f", epoch, total / count, val)
        if since_best >= config.patience:
            logbook.stop_reason = "early_stopping"
            break
    else:
        logbook.stop_reason = "max_epochs"
    return best_params, logbook


def _value_only(params: MlpParams, batch, loss_fn):
    tensors = [Tensor(a) for a in params.arrays()]
    return loss_fn(mlp_apply(tensors, batch[0], params.slope), batch).item(), None


# --------------------------------------------------------------------------
# DRN


def drn_objective(partition, terms_by_split: dict, y_by_split: dict, weights: PenaltyWeights):
    """Composite-loss closure over precomputed baseline terms for each split."""
    from drnkit.drn import RefinedDistribution
    from drnkit.losses import composite_loss

    def loss_fn(z, batch):
        _, idx, split = batch
        terms = terms_by_split[split].subset(idx)
        rd = RefinedDistribution.from_logits(partition, terms, z)
        return composite_loss(rd, y_by_split[split][idx], weights)

    return loss_fn


def fit_drn(glm, X_train, y_train, X_val, y_val, config: TrainingConfig, partition=None):
    """Train a refinement network on top of a fitted gamma GLM."""
    from drnkit.drn import DrnModel, baseline_terms
    from drnkit.partition import drn_partition

    if partition is None:
        partition = drn_partition(y_train, config.proportion, config.min_obs)
    terms = {
        "train": baseline_terms(glm.conditional(X_train), partition),
        "val": baseline_terms(glm.conditional(X_val), partition),
    }
    ys = {"train": np.asarray(y_train, dtype=np.float64), "val": np.asarray(y_val, dtype=np.float64)}
    rng = np.random.default_rng(config.seed)
    net = init_mlp(np.shape(X_train)[1], config.hidden, partition.K, rng)
    loss_fn = drn_objective(partition, terms, ys, config.penalty_weights)
    val_fn = None
    if config.select_on == "crps":
        from drnkit.metrics import crps_refined

        def val_fn(p):
            model = DrnModel(glm, partition, p)
            return float(np.mean(crps_refined(model.predict(X_val, terms["val"]), ys["val"])))

    net, logbook = train(net, X_train, X_val, config, loss_fn, val_fn)
    return DrnModel(glm, partition, net, {"training": config.to_dict()}), logbook
