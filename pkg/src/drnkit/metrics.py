"""Scoring rules, calibration diagnostics and the paired signed-rank test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from drnkit.drn import RefinedDistribution
from drnkit.glm import GammaDist

TAIL_LEVEL = 1e-7
QUAD_TOL = 1e-8


class UndefinedTestError(ValueError):
    """Every paired difference is zero."""


# --------------------------------------------------------------------------
# adaptive quadrature


def adaptive_simpson(f, a, b, tol: float = QUAD_TOL, max_depth: int = 40, panels: int = 8):
    """Vectorised adaptive Simpson: one integral per row over [a_i, b_i].

    ``f(rows, t)`` evaluates the integrand of each listed row at points ``t``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    result = np.zeros(n)
    live = np.flatnonzero(b > a)
    if live.size == 0:
        return result
    # start from equal panels so narrow features are not skipped
    edges = a[live, None] + (b[live] - a[live])[:, None] * np.linspace(0, 1, panels + 1)[None, :]
    rows = np.repeat(live, panels)
    lo = edges[:, :-1].ravel()
    hi = edges[:, 1:].ravel()
    mid = 0.5 * (lo + hi)
    flo, fmid, fhi = f(rows, lo), f(rows, mid), f(rows, hi)
    whole = (hi - lo) / 6 * (flo + 4 * fmid + fhi)
    tols = np.full(rows.size, tol / panels)
    depth = 0
    while rows.size:
        m1, m2 = 0.5 * (lo + mid), 0.5 * (mid + hi)
        f1, f2 = f(rows, m1), f(rows, m2)
        left = (mid - lo) / 6 * (flo + 4 * f1 + fmid)
        right = (hi - mid) / 6 * (fmid + 4 * f2 + fhi)
        err = left + right - whole
        done = (np.abs(err) <= 15 * tols) | (depth >= max_depth)
        np.add.at(result, rows[done], (left + right + err / 15)[done])
        keep = ~done
        rows = np.concatenate([rows[keep], rows[keep]])
        lo, mid, hi = (np.concatenate([lo[keep], mid[keep]]), np.concatenate([m1[keep], m2[keep]]),
                       np.concatenate([mid[keep], hi[keep]]))
        flo, fmid, fhi = (np.concatenate([flo[keep], fmid[keep]]), np.concatenate([f1[keep], f2[keep]]),
                          np.concatenate([fmid[keep], fhi[keep]]))
        whole = np.concatenate([left[keep], right[keep]])
        tols = np.concatenate([tols[keep], tols[keep]]) / 2
        depth += 1
    return result


def _crps_segment_quad(cdf_rows, y, a, b, tol=QUAD_TOL):
    """Integral of (F(t) - 1{t > y})^2 over [a, b], splitting at y."""
    y = np.asarray(y, dtype=np.float64)
    split = np.clip(y, a, b)
    below = adaptive_simpson(lambda r, t: cdf_rows(r, t) ** 2, a, split, tol / 2)
    above = adaptive_simpson(lambda r, t: (cdf_rows(r, t) - 1.0) ** 2, split, b, tol / 2)
    return below + above


# --------------------------------------------------------------------------
# CRPS


def crps_gamma(dist: GammaDist, y) -> np.ndarray:
    """Closed-form CRPS of a gamma forecast."""
    y = np.asarray(y, dtype=np.float64)
    k, theta = dist.shape, dist.scale
    F = special.gammainc(k, np.maximum(y, 0) / theta)
    F1 = special.gammainc(k + 1, np.maximum(y, 0) / theta)
    return y * (2 * F - 1) - k * theta * (2 * F1 - 1) - theta / special.beta(0.5, k)


def crps_gamma_quadrature(dist: GammaDist, y, tol: float = QUAD_TOL) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    k = np.broadcast_to(dist.shape, y.shape)
    theta = np.broadcast_to(dist.scale, y.shape)
    lo = np.minimum(special.gammaincinv(k, TAIL_LEVEL) * theta, y)
    hi = np.maximum(special.gammaincinv(k, 1 - TAIL_LEVEL) * theta, y)
    cdf_rows = lambda r, t: special.gammainc(k[r], np.maximum(t, 0) / theta[r])
    return _crps_segment_quad(cdf_rows, y, lo, hi, tol)


def _linear_sq_integral(u0, u1, length):
    # integral over a segment of the square of a linear function from u0 to u1
    return length * (u0 * u0 + u0 * u1 + u1 * u1) / 3.0


def piecewise_linear_crps(cutpoints, F, y) -> np.ndarray:
    """Exact CRPS over [c_0, c_K] for CDFs that are linear between cutpoints.

    ``F`` holds the CDF at every cutpoint, shape (n, K+1).
    """
    y = np.asarray(y, dtype=np.float64)[:, None]
    c = np.asarray(cutpoints, dtype=np.float64)
    lo, hi = c[:-1][None, :], c[1:][None, :]
    FL, FR = F[:, :-1], F[:, 1:]
    width = hi - lo
    below = _linear_sq_integral(FL, FR, width)
    above = _linear_sq_integral(FL - 1, FR - 1, width)
    s = np.clip(y, lo, hi)
    Fs = FL + (FR - FL) * (s - lo) / width
    split = _linear_sq_integral(FL, Fs, s - lo) + _linear_sq_integral(Fs - 1, FR - 1, hi - s)
    out = np.where(y >= hi, below, np.where(y <= lo, above, split))
    return out.sum(axis=1)


def crps_region(rd: RefinedDistribution, y) -> np.ndarray:
    """Exact CRPS contribution of [c_0, c_K), where the refined CDF is piecewise linear."""
    return piecewise_linear_crps(rd.partition.cutpoints, rd.cdf_at_cutpoints, y)


def crps_refined(rd: RefinedDistribution, y, tol: float = QUAD_TOL) -> np.ndarray:
    """CRPS of refined forecasts: exact inside the region, adaptive Simpson on the tails."""
    y = np.asarray(y, dtype=np.float64)
    base = rd.baseline
    k = np.broadcast_to(base.shape, y.shape)
    theta = np.broadcast_to(base.scale, y.shape)
    c0, cK = rd.partition.lower, rd.partition.upper
    q_lo = special.gammaincinv(k, TAIL_LEVEL) * theta
    q_hi = special.gammaincinv(k, 1 - TAIL_LEVEL) * theta
    cdf_rows = lambda r, t: special.gammainc(k[r], np.maximum(t, 0) / theta[r])
    lower = _crps_segment_quad(cdf_rows, y, np.minimum(np.minimum(q_lo, y), c0), np.full(y.shape, c0), tol)
    upper = _crps_segment_quad(cdf_rows, y, np.full(y.shape, cK), np.maximum(np.maximum(q_hi, y), cK), tol)
    return crps_region(rd, y) + lower + upper


def crps_trapezoid_region(rd: RefinedDistribution, y, n_points: int = 1_000_000) -> np.ndarray:
    """Brute-force trapezoid CRPS over [c_0, c_K), split at y so the jump sits on a node."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    c0, cK = rd.partition.lower, rd.partition.upper
    out = np.empty(y.size)
    for i, yi in enumerate(y):
        row = rd[i]
        s = min(max(yi, c0), cK)
        total = 0.0
        pieces = [(c0, s, 0.0), (s, cK, 1.0)]
        lengths = [s - c0, cK - s]
        for (a, b, ind), length in zip(pieces, lengths):
            if length <= 0:
                continue
            m = max(2, int(round(n_points * length / (cK - c0))))
            t = np.linspace(a, b, m)
            vals = (_region_cdf(row, t) - ind) ** 2
            total += np.trapezoid(vals, t)
        out[i] = total
    return out


def _region_cdf(row: RefinedDistribution, t):
    # piecewise-linear CDF on [c_0, c_K], including the right end
    return np.interp(t, row.partition.cutpoints, row.cdf_at_cutpoints[0])


def crps(dist, y) -> np.ndarray:
    """Per-observation CRPS for any forecast object this package produces."""
    if isinstance(dist, RefinedDistribution):
        return crps_refined(dist, y)
    if isinstance(dist, GammaDist):
        return crps_gamma(dist, y)
    return dist.crps(y)


# --------------------------------------------------------------------------
# other scores


def nll_metric(dist, y) -> np.ndarray:
    """-log pdf(y); +inf where the forecast puts no density on y."""
    with np.errstate(divide="ignore"):
        return -np.log(dist.pdf(y))


def rmse(means, ys) -> float:
    means, ys = np.asarray(means, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    return float(np.sqrt(np.mean((means - ys) ** 2)))


def quantile_loss(q_pred, y, alpha: float) -> np.ndarray:
    q_pred, y = np.asarray(q_pred, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return (y - q_pred) * (alpha - (y <= q_pred))


def pit_values(dist, y) -> np.ndarray:
    return np.clip(dist.cdf(y), 0.0, 1.0)


def quantile_residuals(pit) -> np.ndarray:
    return special.ndtri(np.clip(np.asarray(pit, dtype=np.float64), 1e-10, 1 - 1e-10))


def qq_pairs(residuals) -> np.ndarray:
    """(theoretical normal quantile, sorted residual) pairs for a QQ plot."""
    r = np.sort(np.asarray(residuals, dtype=np.float64))
    n = r.size
    theo = special.ndtri((np.arange(1, n + 1) - 0.5) / n)
    return np.column_stack([theo, r])


NOMINAL_LEVELS = np.round(np.arange(1, 100) / 100, 2)


def calibration_curve(pit, levels=NOMINAL_LEVELS) -> np.ndarray:
    pit = np.asarray(pit, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    emp = (pit[None, :] <= levels[:, None]).mean(axis=1)
    return np.column_stack([levels, emp])


def calibration_score(pit) -> float:
    """Mean squared gap between empirical and nominal levels over 0.01..0.99."""
    curve = calibration_curve(pit)
    return float(np.mean((curve[:, 1] - curve[:, 0]) ** 2))


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def _exact_lower_tail(ranks: np.ndarray, t_plus: float) -> float:
    # ranks may be half-integers under ties; doubling makes them integral
    r2 = np.rint(2 * ranks).astype(int)
    counts = np.zeros(r2.sum() + 1)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    stat = int(np.rint(2 * t_plus))
    return float(counts[: stat + 1].sum() / 2.0 ** len(r2))


def wilcoxon_signed_rank(scores_a, scores_b, alternative: str = "less", exact_max: int = 25) -> float:
    """One-sided paired test of a < b on per-observation scores; returns the p-value."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.size < 10:
        raise ValueError("need two equal-length score vectors with at least 10 entries")
    with np.errstate(invalid="ignore"):
        d = a - b
    d = d[np.isfinite(d) | np.isinf(d)]
    d = d[(d != 0) & ~np.isnan(d)]
    n = d.size
    if n == 0:
        raise UndefinedTestError("all paired differences are zero")
    ranks = stats.rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())
    if alternative == "greater":
        t_plus = float(ranks[d < 0].sum())
    elif alternative != "less":
        raise ValueError("alternative must be 'less' or 'greater'")
    if n <= exact_max:
        return _exact_lower_tail(ranks, t_plus)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (t_plus - mean + 0.5) / math.sqrt(var)
    return float(stats.norm.cdf(z))


def stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# --------------------------------------------------------------------------
# reports


SCORE_NAMES = ("nll", "crps", "se", "ql")


def score_vectors(dist, y, alpha: float = 0.9) -> dict:
    """Per-observation NLL, CRPS, squared error and alpha-quantile loss."""
    y = np.asarray(y, dtype=np.float64)
    return {
        "nll": nll_metric(dist, y),
        "crps": crps(dist, y),
        "se": (np.asarray(dist.mean, dtype=np.float64) if not callable(dist.mean) else dist.mean()) - y,
        "ql": quantile_loss(dist.quantile(np.full(y.shape, alpha)), y, alpha),
    }


@dataclass
class MetricReport:
    """Aggregate metrics per model and split, with the per-observation vectors kept."""

    alpha: float = 0.9
    scores: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, model: str, split: str, dist, y):
        vec = score_vectors(dist, y, self.alpha)
        vec["se"] = vec["se"] ** 2
        self.scores.setdefault(model, {})[split] = vec

    def summary(self, model: str, split: str) -> dict:
        v = self.scores[model][split]
        return {
            "nll": float(np.mean(v["nll"])),
            "crps": float(np.mean(v["crps"])),
            "rmse": float(np.sqrt(np.mean(v["se"]))),
            f"ql{int(round(self.alpha * 100))}": float(np.mean(v["ql"])),
        }

    def compare(self, model_a: str, model_b: str, split: str) -> dict:
        out = {}
        for name in SCORE_NAMES:
            try:
                p = wilcoxon_signed_rank(self.scores[model_a][split][name], self.scores[model_b][split][name])
            except UndefinedTestError:
                p = float("nan")
            label = "rmse" if name == "se" else name
            out[label] = {"p_value": p, "stars": stars(p) if p == p else ""}
        return out

    def to_dict(self, reference: str | None = "drn") -> dict:
        out = {"meta": self.meta, "alpha": self.alpha, "models": {}, "comparisons": {}}
        for model, splits in self.scores.items():
            out["models"][model] = {split: self.summary(model, split) for split in splits}
        if reference in self.scores:
            for other in self.scores:
                if other == reference:
                    continue
                out["comparisons"][f"{reference}<{other}"] = {
                    split: self.compare(reference, other, split)
                    for split in self.scores[reference] if split in self.scores[other]
                }
        return out

    def to_json(self, reference: str | None = "drn") -> str:
        return json.dumps(_jsonable(self.to_dict(reference)), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return None
    return obj
