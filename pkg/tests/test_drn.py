import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drnkit.autodiff import MlpParams, init_mlp
from drnkit.drn import (DegenerateBaselineError, DrnModel, RefinedDistribution, adjustment_factors,
                        baseline_masses, baseline_terms, drn_cdf, drn_forward, drn_mean, drn_pdf, drn_quantile,
                        drn_variance, ppc_transform)
from drnkit.glm import GammaDist
from drnkit.partition import Partition, drn_partition, uniform_cutpoints

UNIT = GammaDist(1.0, 1.0)


def test_ppc_levels_and_masses():
    p = Partition(np.array([0.0, 1.0, 2.0]))
    b = baseline_masses(UNIT, p)
    assert np.allclose(b, [1 - math.exp(-1), math.exp(-1) - math.exp(-2)], atol=1e-12)
    assert np.allclose(ppc_transform(UNIT, p), b)
    assert b.sum() == pytest.approx(UNIT.cdf(2.0) - UNIT.cdf(0.0), abs=1e-12)
    assert np.all(baseline_masses(UNIT, Partition(np.array([900.0, 901.0, 902.0]))) == 0)
    wide = Partition(np.array([0.0, 100.0]))
    assert ppc_transform(UNIT, wide)[0] == pytest.approx(1 / 100)


def test_adjustment_hand_example():
    b = np.array([0.6, 0.3])
    a = adjustment_factors(np.array([math.log(2), 0.0]), b, 0.9)
    assert np.allclose(a, [1.2, 0.6], atol=1e-12)
    assert np.allclose(a * b, [0.72, 0.18]) and (a * b).sum() == pytest.approx(0.9)
    assert np.allclose(adjustment_factors(np.full(2, 3.3), b, 0.9), 1.0)
    with pytest.raises(DegenerateBaselineError):
        adjustment_factors(np.zeros(2), np.zeros(2), 0.0)


def _hand_rd():
    # K=2 on [1,2,3) with b=(0.6,0.3), F(c0)=0.05 built from explicit terms
    from drnkit.drn import BaselineTerms

    dist = GammaDist(np.array([2.0]), np.array([1.0]))
    terms = BaselineTerms(dist, np.array([[0.6, 0.3]]), np.array([0.05]), np.array([0.95]),
                          np.array([0.0]), np.array([2.0]))
    return RefinedDistribution(Partition(np.array([1.0, 2.0, 3.0])), terms, np.array([[0.72, 0.18]]))


def test_hand_cdf_pdf_quantile():
    rd = _hand_rd()
    assert drn_pdf(rd, 1.5)[0] == pytest.approx(0.72)
    assert drn_pdf(rd, 2.5)[0] == pytest.approx(0.18)
    assert drn_cdf(rd, 1.5)[0] == pytest.approx(0.41)
    assert drn_quantile(rd, 0.41)[0] == pytest.approx(1.5)
    assert drn_cdf(rd, 3.0)[0] == pytest.approx(rd.baseline.cdf(3.0)[0])


def _random_rd(rng, n=20):
    p = uniform_cutpoints(0.3, 6.0, 0.05)
    dist = GammaDist(rng.uniform(1, 5, n), rng.uniform(0.3, 1.0, n))
    return RefinedDistribution.from_adjustments(p, dist, np.exp(rng.normal(0, 0.7, (n, p.K))))


def test_tail_fidelity_and_limits(rng):
    rd = _random_rd(rng)
    below = np.full(len(rd), 0.1)
    above = np.full(len(rd), 8.0)
    for y in (below, above):
        assert np.array_equal(rd.pdf(y), rd.baseline.pdf(y))
        assert np.array_equal(rd.cdf(y), rd.baseline.cdf(y))
    assert np.all(rd.cdf(np.full(len(rd), -1.0)) == 0)
    assert np.allclose(rd.cdf(np.full(len(rd), 1e6)), 1)


def test_masses_sum_to_region_mass(rng):
    rd = _random_rd(rng)
    assert np.max(np.abs(rd.m.sum(axis=1) - rd.region_mass)) < 1e-10


def test_quantile_roundtrip_on_grid(rng):
    rd = _random_rd(rng, 5)
    for alpha in np.arange(1, 100) / 100:
        q = rd.quantile(np.full(5, alpha))
        assert np.max(np.abs(rd.cdf(q) - alpha)) < 1e-9


def test_quantile_below_region_delegates(rng):
    rd = _random_rd(rng, 4)
    alpha = rd.terms.F_lo / 2
    assert np.allclose(rd.quantile(alpha), rd.baseline.quantile(alpha))


def test_constant_logits_reproduce_baseline_cdf(rng):
    p = uniform_cutpoints(0.3, 6.0, 0.1)
    dist = GammaDist(rng.uniform(1, 5, 6), rng.uniform(0.3, 1.0, 6))
    rd = RefinedDistribution.from_logits(p, baseline_terms(dist, p), np.full((6, p.K), 1.7))
    assert np.allclose(rd.a, 1, atol=1e-12)
    F = GammaDist(dist.shape[:, None], dist.scale[:, None]).cdf(p.cutpoints[None, :])
    assert np.allclose(rd.cdf_at_cutpoints, F, atol=1e-12)


def test_softmax_shift_invariance(rng):
    p = uniform_cutpoints(0.3, 6.0, 0.1)
    terms = baseline_terms(GammaDist(rng.uniform(1, 5, 3), rng.uniform(0.3, 1, 3)), p)
    l = rng.normal(size=(3, p.K))
    m1 = RefinedDistribution.from_logits(p, terms, l).m
    m2 = RefinedDistribution.from_logits(p, terms, l + 12.5).m
    assert np.max(np.abs(m1 - m2)) < 1e-12


def test_logit_perturbation_monotone(rng):
    p = uniform_cutpoints(0.3, 6.0, 0.1)
    terms = baseline_terms(GammaDist(np.array([2.0]), np.array([1.0])), p)
    l = rng.normal(size=(1, p.K))
    bumped = l.copy()
    bumped[0, 3] += 0.1
    m0 = RefinedDistribution.from_logits(p, terms, l).m[0]
    m1 = RefinedDistribution.from_logits(p, terms, bumped).m[0]
    assert m1[3] > m0[3] and np.all(np.delete(m1 < m0, 3))


def test_uniform_moments():
    from drnkit.drn import BaselineTerms

    dist = GammaDist(np.array([1.0]), np.array([1e-6]))
    terms = BaselineTerms(dist, np.array([[1.0]]), np.array([0.0]), np.array([1.0]), np.array([0.0]),
                          np.array([1.0]))
    rd = RefinedDistribution(Partition(np.array([0.0, 2.0])), terms, np.array([[1.0]]))
    # tails carry no mass here so the moments are exactly those of U[0, 2)
    rd.terms.dist = GammaDist(np.array([1.0]), np.array([1e-300]))
    assert drn_mean(rd)[0] == pytest.approx(1.0)
    assert drn_variance(rd)[0] == pytest.approx(1 / 3)


def test_mean_close_to_baseline_when_unadjusted():
    dist = GammaDist(np.array([3.0]), np.array([0.5]))
    p = uniform_cutpoints(1e-9, 15.0, 0.002)
    rd = RefinedDistribution.from_adjustments(p, dist, np.ones((1, p.K)))
    width = p.widths[0]
    assert abs(drn_mean(rd)[0] - dist.mean[0]) < width**2
    assert drn_variance(rd)[0] >= 0


def test_normalisation_numeric(rng):
    rd = _random_rd(rng, 3)
    for i in range(3):
        r = rd[i]
        region = float(r.m.sum())
        lo = float(r.baseline.cdf(r.partition.lower)[0])
        hi = float(r.baseline.sf(r.partition.upper)[0])
        assert abs(region + lo + hi - 1) < 1e-12


def test_model_batch_equals_single(small_synth, small_glm, rng):
    tr = small_synth[0]
    p = drn_partition(tr.y, 0.05, 5)
    model = DrnModel(small_glm, p, init_mlp(2, [8], p.K, rng))
    batch = drn_forward(model, tr.X[:5])
    for i in range(5):
        single = drn_forward(model, tr.X[i])
        assert np.allclose(single.m[0], batch.m[i], atol=1e-15)


def test_fresh_model_near_baseline(small_synth, small_glm, rng):
    tr = small_synth[0]
    p = drn_partition(tr.y, 0.05, 5)
    net = init_mlp(2, [8], p.K, rng)
    net = MlpParams.from_arrays([a * 1e-3 for a in net.arrays()])
    rd = DrnModel(small_glm, p, net).predict(tr.X[:20])
    assert np.max(np.abs(rd.a - 1)) < 1e-2


def test_bundle_roundtrip(small_synth, small_glm, rng):
    p = drn_partition(small_synth[0].y, 0.05, 5)
    model = DrnModel(small_glm, p, init_mlp(2, [4], p.K, rng), {"a": 1})
    back = DrnModel.from_dict(model.to_dict())
    X = small_synth[1].X[:4]
    assert np.array_equal(back.predict(X).m, model.predict(X).m)
    assert back.config_hash() == model.config_hash()
    with pytest.raises(ValueError):
        DrnModel(small_glm, p, init_mlp(2, [4], p.K + 1, rng))


@given(st.floats(0.5, 8), st.floats(0.1, 2), st.integers(0, 1000))
def test_cdf_monotone(shape, scale, seed):
    rng = np.random.default_rng(seed)
    p = uniform_cutpoints(0.2, 5.0, 0.1)
    rd = RefinedDistribution.from_adjustments(p, GammaDist(np.array([shape]), np.array([scale])),
                                              np.exp(rng.normal(size=(1, p.K))))
    grid = np.linspace(0, 8, 400)
    F = np.array([rd.cdf(g)[0] for g in grid])
    assert np.all(np.diff(F) >= -1e-15)
