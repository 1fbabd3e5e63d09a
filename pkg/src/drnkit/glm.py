"""Gamma GLM with log link, fitted by IRLS, and the gamma distribution it predicts."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


class GlmConvergenceWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class GammaDist:
    """Gamma with shape k and scale theta; mean k*theta, variance k*theta**2.

    Both fields may be arrays, in which case every query broadcasts.
    """

    shape: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=np.float64))
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        if np.any(self.shape <= 0) or np.any(self.scale <= 0):
            raise ValueError("gamma shape and scale must be positive")

    def __len__(self):
        return int(self.shape.size)

    def __getitem__(self, idx) -> "GammaDist":
        return GammaDist(np.broadcast_to(self.shape, np.broadcast(self.shape, self.scale).shape)[idx],
                         np.broadcast_to(self.scale, np.broadcast(self.shape, self.scale).shape)[idx])

    @property
    def mean(self):
        return self.shape * self.scale

    @property
    def variance(self):
        return self.shape * self.scale**2

    def logpdf(self, y):
        y = np.asarray(y, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = ((self.shape - 1) * np.log(y) - y / self.scale
                   - special.gammaln(self.shape) - self.shape * np.log(self.scale))
        return np.where(y > 0, out, -np.inf)

    def pdf(self, y):
        return np.exp(self.logpdf(y))

    def cdf(self, y):
        y = np.asarray(y, dtype=np.float64)
        return special.gammainc(self.shape, np.maximum(y, 0.0) / self.scale)

    def sf(self, y):
        y = np.asarray(y, dtype=np.float64)
        return special.gammaincc(self.shape, np.maximum(y, 0.0) / self.scale)

    def quantile(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("quantile level must lie in (0, 1)")
        k, theta = np.broadcast_arrays(self.shape, self.scale, alpha)[:2]
        alpha = np.broadcast_to(alpha, k.shape)
        q = special.gammaincinv(k, alpha) * theta
        # Newton polish, then bisection for anything still off
        for _ in range(3):
            err = special.gammainc(k, q / theta) - alpha
            dens = np.exp((k - 1) * np.log(np.maximum(q, 1e-300)) - q / theta
                          - special.gammaln(k) - k * np.log(theta))
            step = np.where(dens > 0, err / np.maximum(dens, 1e-300), 0.0)
            q = np.where(np.abs(err) > 1e-12, np.maximum(q - step, q / 2), q)
        err = np.abs(special.gammainc(k, q / theta) - alpha)
        if np.any(err >= 1e-10):
            q = np.where(err < 1e-10, q, _bisect_gamma(k, theta, alpha))
        return q[()] if q.ndim == 0 else q

    def partial_expectation(self, a, b):
        """Integral of y * pdf(y) over [a, b]."""
        sh1 = GammaDist(self.shape + 1, self.scale)
        return self.mean * (sh1.cdf(b) - sh1.cdf(a))

    def partial_second_moment(self, a, b):
        """Integral of y**2 * pdf(y) over [a, b]."""
        sh2 = GammaDist(self.shape + 2, self.scale)
        return self.shape * (self.shape + 1) * self.scale**2 * (sh2.cdf(b) - sh2.cdf(a))


def _bisect_gamma(k, theta, alpha, tol=1e-10):
    lo = np.zeros_like(k)
    hi = np.maximum(k * theta, theta)
    while True:
        short = special.gammainc(k, hi / theta) < alpha
        if not short.any():
            break
        hi = np.where(short, hi * 2, hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = special.gammainc(k, mid / theta) < alpha
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(np.abs(special.gammainc(k, mid / theta) - alpha) < tol):
            return mid
    return 0.5 * (lo + hi)


def gamma_pdf(dist: GammaDist, y):
    return dist.pdf(y)


def gamma_cdf(dist: GammaDist, y):
    return dist.cdf(y)


def gamma_quantile(dist: GammaDist, alpha):
    return dist.quantile(alpha)


def gamma_partial_expectation(dist: GammaDist, a, b):
    return dist.partial_expectation(a, b)


def gamma_deviance(y, mu):
    """Unit gamma deviances 2[(y - mu)/mu - log(y/mu)], one per observation."""
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    return 2.0 * ((y - mu) / mu - np.log(y / mu))


@dataclass(frozen=True)
class GammaGlmModel:
    beta: np.ndarray
    dispersion: float
    feature_names: list[str] = field(default_factory=list)
    converged: bool = True
    n_iter: int = 0
    bse: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=np.float64))
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")
        if not np.isfinite(self.beta).all():
            raise ValueError("non-finite GLM coefficient")

    @property
    def n_features(self) -> int:
        return self.beta.size - 1

    def linear_predictor(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[-1]}")
        return self.beta[0] + x @ self.beta[1:]

    def mean(self, x) -> np.ndarray:
        return np.exp(self.linear_predictor(x))

    def conditional(self, x) -> GammaDist:
        mu = self.mean(x)
        return GammaDist(np.full_like(mu, 1.0 / self.dispersion), mu * self.dispersion)

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "dispersion": float(self.dispersion),
                "features": list(self.feature_names)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GammaGlmModel":
        return cls(np.asarray(d["beta"]), float(d["dispersion"]), list(d.get("features", [])))

    @classmethod
    def from_json(cls, s: str) -> "GammaGlmModel":
        return cls.from_dict(json.loads(s))


def glm_conditional(model: GammaGlmModel, x) -> GammaDist:
    return model.conditional(x)


def fit_gamma_glm(X, y, feature_names=None, tol: float = 1e-8, max_iter: int = 100) -> GammaGlmModel:
    """Maximum-likelihood gamma regression with log link via IRLS.

    With the log link and V(mu) = mu**2 the working weights are all one, so each
    step is an ordinary least-squares solve on the working response
    eta + (y - mu) / mu. Dispersion is the Pearson estimate.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("response length does not match design rows")
    if np.any(~np.isfinite(y)) or np.any(y <= 0):
        raise ValueError("gamma GLM needs strictly positive responses")
    if n <= p + 1:
        raise ValueError(f"need more than {p + 1} observations, got {n}")
    if p and np.any(np.all(X == 0, axis=0)):
        raise RankDeficiencyError("design has a constant-zero column")
    design = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(design) < p + 1:
        raise RankDeficiencyError("weighted normal equations are singular")

    beta = np.zeros(p + 1)
    beta[0] = np.log(y.mean())

    def deviance(b):
        mu = np.exp(design @ b)
        return np.sum(gamma_deviance(y, mu))

    dev = deviance(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = design @ beta
        mu = np.exp(eta)
        z = eta + (y - mu) / mu
        new_beta, *_ = np.linalg.lstsq(design, z, rcond=None)
        new_dev = deviance(new_beta)
        # step halving keeps the deviance from increasing
        halvings = 0
        while (not np.isfinite(new_dev) or new_dev > dev + 1e-12 * abs(dev)) and halvings < 30:
            new_beta = 0.5 * (new_beta + beta)
            new_dev = deviance(new_beta)
            halvings += 1
        step = np.max(np.abs(new_beta - beta))
        beta, dev = new_beta, new_dev
        if step < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"IRLS did not converge in {max_iter} iterations", GlmConvergenceWarning)

    mu = np.exp(design @ beta)
    phi = float(np.sum(((y - mu) / mu) ** 2) / (n - p - 1))
    bse = np.sqrt(np.diag(np.linalg.inv(design.T @ design)) * phi)
    names = list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(p)]
    return GammaGlmModel(beta, phi, names, converged, it, bse)
