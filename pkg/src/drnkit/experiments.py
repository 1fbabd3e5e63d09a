"""Reusable experiment runners behind the scripts and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from drnkit.datagen import REG_SHIFT, gen_synthetic_main, gen_synthetic_reg
from drnkit.glm import fit_gamma_glm
from drnkit.losses import PenaltyWeights
from drnkit.metrics import MetricReport
from drnkit.train import TABLE3, TrainingConfig, fit_drn

# DRN settings used for the regularisation study on the normal-response data.
REG_STUDY_DRN = TrainingConfig(learning_rate=0.002, batch_size=200, dropout_rate=0.2, hidden_layers=2,
                               neurons_per_layer=128, proportion=0.05, min_obs=5, patience=30)


@dataclass
class Table2Run:
    report: MetricReport
    models: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    data: tuple = ()


def run_table2(seed: int = 0, models=("glm", "drn"), lognormal_convention: str = "sd",
               max_epochs: int | None = None) -> Table2Run:
    """Fit the requested models on the main synthetic data and score val and test."""
    from drnkit.baselines import fit_cann, fit_ddr, fit_mdn

    tr, va, te = gen_synthetic_main(seed=seed, lognormal_convention=lognormal_convention)
    glm = fit_gamma_glm(tr.X, tr.y, tr.feature_names)
    run = Table2Run(MetricReport(meta={"seed": seed, "lognormal_convention": lognormal_convention}),
                    data=(tr, va, te))
    run.models["glm"] = glm
    fitters = {
        "cann": lambda c: fit_cann(glm, tr.X, tr.y, va.X, va.y, c),
        "mdn": lambda c: fit_mdn(tr.X, tr.y, va.X, va.y, c),
        "ddr": lambda c: fit_ddr(tr.X, tr.y, va.X, va.y, c),
        "drn": lambda c: fit_drn(glm, tr.X, tr.y, va.X, va.y, c),
    }
    for name in models:
        if name == "glm":
            continue
        cfg = TABLE3[name].with_(seed=seed)
        if max_epochs is not None:
            cfg = cfg.with_(max_epochs=max_epochs)
        start = time.perf_counter()
        run.models[name], run.logs[name] = fitters[name](cfg)
        run.seconds[name] = time.perf_counter() - start
    for name in models:
        model = run.models[name]
        for ds in (va, te):
            dist = model.conditional(ds.X) if name == "glm" else model.predict(ds.X)
            run.report.add(name, ds.split, dist, ds.y)
    return run


def _reg_data(seed: int):
    return gen_synthetic_reg(seed=seed, shift=REG_SHIFT)


def train_reg_drn(weights: PenaltyWeights, seed: int = 0, max_epochs: int = 1000, data=None):
    """Fit GLM + DRN on the shifted normal-response data with the given penalties."""
    tr, va, te = data if data is not None else _reg_data(seed)
    glm = fit_gamma_glm(tr.X, tr.y, tr.feature_names)
    cfg = REG_STUDY_DRN.with_(penalty_weights=weights, seed=seed, max_epochs=max_epochs)
    model, logbook = fit_drn(glm, tr.X, tr.y, va.X, va.y, cfg)
    return model, logbook, (tr, va, te)


def max_adjustment_deviation(model, X) -> float:
    """Mean over instances of max_k |a_k - 1|."""
    a = model.predict(X).a
    return float(np.mean(np.max(np.abs(a - 1.0), axis=1)))


def mean_second_difference(model, X) -> float:
    """Mean absolute second difference of the refined density levels."""
    levels = model.predict(X).levels
    return float(np.mean(np.abs(np.diff(levels, n=2, axis=1))))
