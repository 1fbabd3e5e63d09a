"""Synthetic generators and tabular ingestion."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import integrate, optimize, stats

SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    split: str = "train"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X must be (n, p) with one response per row")
        if self.X.shape[1] != len(self.feature_names):
            raise ValueError("feature name count does not match X")
        if np.isnan(self.X).any() or np.isnan(self.y).any():
            raise ValueError("dataset contains missing values")

    def __len__(self):
        return self.y.size

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=self.feature_names)
        df["y"] = self.y
        return df

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, split="train", response="y") -> "Dataset":
        df = pd.read_csv(path, comment="#", float_precision="round_trip")
        names = [c for c in df.columns if c != response]
        return cls(df[names].to_numpy(float), df[response].to_numpy(float), names, split)


def _split_sizes(n: int, fractions=(0.6, 0.2, 0.2)):
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return n_train, n_val, n - n_train - n_val


# --------------------------------------------------------------------------
# main synthetic study

SYNTH_COV = np.array([[0.25**2, 0.25**3], [0.25**3, 0.25**2]])


def true_mean_fn(X):
    X = np.atleast_2d(X)
    return np.exp(-X[:, 0] + X[:, 1])


def true_dispersion_fn(X):
    X = np.atleast_2d(X)
    return np.exp(X[:, 0]) / (1 + np.exp(X[:, 0] * X[:, 1]))


def _lognormal_sigma(phi, convention: str):
    if convention == "sd":
        return phi
    if convention == "variance":
        return np.sqrt(phi)
    raise ValueError("lognormal convention must be 'sd' or 'variance'")


def gen_synthetic_main(n_train: int = 12000, n_val: int = 4000, n_test: int = 4000, seed: int = 0,
                       lognormal_convention: str = "sd"):
    """Gamma(mu, phi) + LogNormal(log mu, phi) responses on correlated normal features."""
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split sizes must be positive")
    rng = np.random.default_rng(seed)
    n = n_train + n_val + n_test
    X = rng.multivariate_normal(np.zeros(2), SYNTH_COV, size=n)
    mu = true_mean_fn(X)
    phi = true_dispersion_fn(X)
    g = rng.gamma(1.0 / phi, mu * phi)
    l = rng.lognormal(np.log(mu), _lognormal_sigma(phi, lognormal_convention))
    y = g + l
    meta = {"generator": "synthetic_main", "seed": seed, "lognormal_convention": lognormal_convention}
    bounds = np.cumsum([0, n_train, n_val, n])
    return tuple(
        Dataset(X[lo:hi], y[lo:hi], ["X1", "X2"], name, seed, dict(meta))
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])
    )


class TrueSyntheticDistribution:
    """Exact law of Y | X = x for the main generator, by numeric convolution."""

    def __init__(self, x, lognormal_convention: str = "sd"):
        x = np.asarray(x, dtype=np.float64).reshape(1, 2)
        self.mu = float(true_mean_fn(x)[0])
        self.phi = float(true_dispersion_fn(x)[0])
        self.gamma = stats.gamma(1.0 / self.phi, scale=self.mu * self.phi)
        self.sigma = float(_lognormal_sigma(self.phi, lognormal_convention))
        self.lognorm = stats.lognorm(self.sigma, scale=self.mu)

    def mean(self) -> float:
        return self.mu + self.mu * np.exp(self.sigma**2 / 2)

    def pdf(self, y: float) -> float:
        if y <= 0:
            return 0.0
        val, _ = integrate.quad(lambda g: self.gamma.pdf(g) * self.lognorm.pdf(y - g), 0, y,
                                epsabs=1e-10, epsrel=1e-6, limit=200)
        return val

    def cdf(self, y: float) -> float:
        if y <= 0:
            return 0.0
        val, _ = integrate.quad(lambda g: self.gamma.pdf(g) * self.lognorm.cdf(y - g), 0, y,
                                epsabs=1e-10, epsrel=1e-6, limit=200)
        return min(val, 1.0)

    def quantile(self, alpha: float) -> float:
        hi = self.mean()
        while self.cdf(hi) < alpha:
            hi *= 2
        return optimize.brentq(lambda t: self.cdf(t) - alpha, 1e-12, hi, xtol=1e-10)


# --------------------------------------------------------------------------
# regularisation study


REG_SHIFT = 10.0


def gen_synthetic_reg(n: int = 40000, seed: int = 0, shift: float = 0.0):
    """Normal features, Y | X ~ N(-X1 + X2, (0.5 (X1^2 + X2^2))^2); split 60/20/20.

    ``shift`` is added to every response so a gamma baseline can be fitted.
    """
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 0.5, size=(n, 2))
    mean = -X[:, 0] + X[:, 1]
    sd = 0.5 * (X[:, 0] ** 2 + X[:, 1] ** 2)
    y = mean + sd * rng.standard_normal(n) + shift
    meta = {"generator": "synthetic_reg", "seed": seed, "shift": shift}
    n_train, n_val, _ = _split_sizes(n)
    bounds = [0, n_train, n_train + n_val, n]
    return tuple(
        Dataset(X[lo:hi], y[lo:hi], ["X1", "X2"], name, seed, dict(meta))
        for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:])
    )


GENERATORS = {"synthetic_main": gen_synthetic_main, "synthetic_reg": gen_synthetic_reg}


# --------------------------------------------------------------------------
# tabular data


def load_recipe(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_csv(path, schema: dict) -> pd.DataFrame:
    """Read a headered CSV and keep the columns the schema mentions."""
    df = pd.read_csv(path, **schema.get("read_csv", {}))
    response = schema["response"]
    if response not in df.columns:
        raise ValueError(f"response column {response!r} missing from {path}")
    if not pd.api.types.is_numeric_dtype(df[response]):
        raise ValueError(f"response column {response!r} is not numeric")
    df = df.drop(columns=[c for c in schema.get("drop", []) if c in df.columns])
    return df


@dataclass
class TabularEncoder:
    """One-hot (first level dropped), ordinal maps and train-fitted standardisation."""

    recipe: dict
    levels: dict = field(default_factory=dict)
    center: dict = field(default_factory=dict)
    spread: dict = field(default_factory=dict)
    feature_names: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)

    def _ordinal(self, df: pd.DataFrame) -> pd.DataFrame:
        df = df.copy()
        for col, mapping in self.recipe.get("ordinal_maps", {}).items():
            mapped = df[col].astype(str).map(mapping)
            if mapped.isna().any():
                bad = sorted(df[col][mapped.isna()].astype(str).unique())
                raise ValueError(f"{col}: no ordinal value for levels {bad}")
            df[col] = mapped.astype(float)
        return df

    def numeric_columns(self):
        return list(self.recipe.get("numeric", [])) + list(self.recipe.get("ordinal_maps", {}))

    def fit(self, df: pd.DataFrame) -> "TabularEncoder":
        df = self._ordinal(df)
        names, groups = [], {}
        for col in self.numeric_columns():
            vals = df[col].astype(float)
            self.center[col] = float(vals.mean())
            sd = float(vals.std(ddof=0))
            self.spread[col] = sd if sd > 0 else 1.0
            names.append(col)
            groups[col] = [col]
        for col in self.recipe.get("categorical", []):
            levels = sorted(df[col].astype(str).unique())
            self.levels[col] = levels
            cols = [f"{col}={lvl}" for lvl in levels[1:]]
            names.extend(cols)
            groups[col] = cols
        self.feature_names = names
        self.groups = groups
        return self

    def transform(self, df: pd.DataFrame) -> np.ndarray:
        df = self._ordinal(df)
        parts = []
        for col in self.numeric_columns():
            parts.append(((df[col].astype(float) - self.center[col]) / self.spread[col]).to_numpy()[:, None])
        for col in self.recipe.get("categorical", []):
            vals = df[col].astype(str).to_numpy()
            levels = self.levels[col]
            unknown = ~np.isin(vals, levels)
            if unknown.any():
                warnings.warn(f"{col}: unseen levels {sorted(set(vals[unknown]))} encoded as all zeros")
            parts.append(np.stack([(vals == lvl).astype(float) for lvl in levels[1:]], axis=1)
                         if len(levels) > 1 else np.zeros((len(vals), 0)))
        return np.hstack(parts) if parts else np.zeros((len(df), 0))

    def to_dict(self) -> dict:
        return {"recipe": self.recipe, "levels": self.levels, "center": self.center,
                "spread": self.spread, "feature_names": self.feature_names, "groups": self.groups}


def preprocess_tabular(raw: pd.DataFrame, recipe: dict, seed: int = 0):
    """Filter, scale the response, split 60/20/20 and encode with train-only statistics."""
    df = raw.copy()
    for col, rule in recipe.get("filters", {}).items():
        if "gt" in rule:
            df = df[df[col] > rule["gt"]]
    response = recipe["response"]
    needed = set(recipe.get("numeric", [])) | set(recipe.get("categorical", [])) | set(recipe.get("ordinal_maps", {}))
    missing = needed - set(df.columns)
    if missing:
        raise ValueError(f"columns missing from data: {sorted(missing)}")
    df = df.dropna(subset=sorted(needed)).reset_index(drop=True)
    y = df[response].astype(float).to_numpy() * float(recipe.get("response_scale", 1.0))
    n = len(df)
    perm = np.random.default_rng(seed).permutation(n)
    n_train, n_val, _ = _split_sizes(n, recipe.get("split", (0.6, 0.2, 0.2)))
    parts = {"train": perm[:n_train], "val": perm[n_train:n_train + n_val], "test": perm[n_train + n_val:]}
    encoder = TabularEncoder(recipe).fit(df.iloc[parts["train"]])
    meta = {"encoder": encoder.to_dict(), "seed": seed,
            "split_indices": {k: v.tolist() for k, v in parts.items()},
            "standardisation_fitted_on": "train"}
    return tuple(
        Dataset(encoder.transform(df.iloc[parts[s]]), y[parts[s]], encoder.feature_names, s, seed, meta)
        for s in SPLITS
    )


def recipe_path(name: str) -> Path:
    return Path(__file__).with_name("recipes") / f"{name}.json"
