import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from addcopula.copulas import CopulaParameter, cdf
from addcopula.mcmc import ProposalConfig
from addcopula.simulation import (
    ScenarioSpec,
    StudySettings,
    credible_band,
    derive_seed,
    error_metrics,
    eval_grid,
    fit,
    generate,
    imse_study,
    posterior_eta,
    posterior_mean_curve,
    slice_grids,
    true_calibration,
)


def test_true_calibration_values():
    assert true_calibration("s1", [0.0])[0] == pytest.approx(math.log(4.5))
    assert true_calibration("s1", [0.5])[0] == pytest.approx(math.log(3.0))
    assert true_calibration("s1", [0.5])[0] == pytest.approx(1.09861, abs=1e-5)
    assert true_calibration("s2", [[0.0, 0.0]])[0] == pytest.approx(math.log(4.5))
    with pytest.raises(ValueError):
        true_calibration("s3", [0.0])


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec("s3")
    assert ScenarioSpec("S2").id == "s2"
    assert ScenarioSpec("s2").betas == ((0.5, 1.0, 1.0), (0.5, 1.0, 1.0))


def test_generate_shapes_and_determinism():
    a = generate(ScenarioSpec("s2", n=450, seed=3))
    b = generate(ScenarioSpec("s2", n=450, seed=3))
    assert a.n == 450 and a.names == ("x1", "x2")
    assert a.content_hash() == b.content_hash()
    assert a.content_hash() != generate(ScenarioSpec("s2", n=450, seed=4)).content_hash()
    assert a.x.min() >= 0 and a.x.max() <= 1


def test_extra_covariate_leaves_true_columns_unchanged():
    a = generate(ScenarioSpec("s2", n=50, seed=9))
    b = generate(ScenarioSpec("s2", n=50, seed=9, extra_covariates=1))
    assert b.names == ("x1", "x2", "x3")
    assert np.array_equal(a.x, b.x[:, :2]) and np.array_equal(a.y1, b.y1)


def test_generated_margins_are_normal():
    sc = ScenarioSpec("s1", n=10_000, seed=1)
    d = generate(sc)
    (b1, _), sd = sc.betas, sc.sigma[0]
    z = (d.y1 - b1[0] - d.x @ np.array(b1[1:])) / sd
    assert stats.kstest(z, "norm").pvalue > 0.01


def test_fixed_covariate_kendall_tau():
    n = 50_000
    sc = ScenarioSpec("s1", n=n, seed=2)
    d = generate(sc, x=np.full((n, 1), 0.5))
    (b1, b2) = sc.betas
    r1 = d.y1 - b1[0] - 0.5 * b1[1]
    r2 = d.y2 - b2[0] - 0.5 * b2[1]
    # theta = 4.5 - 1.5 = 3, tau = 3 / 5
    assert stats.kendalltau(r1, r2)[0] == pytest.approx(0.6, abs=0.02)


def test_generated_copula_matches_clayton_cdf():
    n = 100_000
    sc = ScenarioSpec("s1", n=n, seed=4)
    d = generate(sc, x=np.zeros((n, 1)))
    (b1, b2) = sc.betas
    u = special.ndtr(d.y1 - b1[0])
    v = special.ndtr(d.y2 - b2[0])
    p = CopulaParameter("clayton", 4.5)
    for a in np.linspace(0.1, 0.9, 5):
        for b in np.linspace(0.1, 0.9, 5):
            assert np.mean((u <= a) & (v <= b)) == pytest.approx(cdf(a, b, p), abs=0.01)


def test_derive_seed():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(1, r) for r in range(100)}) == 100
    assert derive_seed(1, 2, 1) != derive_seed(1, 2)
    assert 0 <= derive_seed(7, 3) < 2 ** 63


def test_grids():
    assert eval_grid("s1").shape == (400, 1)
    g = eval_grid("s2")
    assert g.shape == (400, 2) and g.min() == 0 and g.max() == 1
    with pytest.raises(ValueError):
        eval_grid("s2", 399)
    slices = list(slice_grids(2, 11))
    assert len(slices) == 8
    i, v, x = slices[5]
    assert i == 1 and v == -0.25 and np.all(x[:, 0] == -0.25)
    assert len(list(slice_grids(1, 11))) == 1


# -- error metrics ---------------------------------------------------------------------

def test_error_metrics_exact_truth():
    truth = np.linspace(1, 2, 400)
    r = error_metrics(np.tile(truth, (3, 1)), truth)
    # rounding in the replicate mean leaves terms of order 1e-32
    assert max(r.ibias2, r.ivar, r.imse) < 1e-24
    assert r.grid_size == 400 and r.replicate_count == 3


def test_error_metrics_symmetric_offsets():
    truth = np.linspace(1, 2, 400)
    c = 0.3
    r = error_metrics(np.stack([truth + c, truth - c]), truth)
    assert r.ibias2 == pytest.approx(0.0, abs=1e-24)
    assert r.ivar == pytest.approx(c * c, abs=1e-14)


def test_error_metrics_validation():
    with pytest.raises(ValueError):
        error_metrics(np.zeros((1, 4)), np.zeros(4))
    with pytest.raises(ValueError):
        error_metrics(np.zeros((2, 4)), np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31))
def test_imse_identity(r, seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=400)
    est = truth + rng.normal(scale=rng.uniform(0.01, 3), size=(r, 400)) + rng.normal()
    rep = error_metrics(est, truth)
    assert abs(rep.imse - (rep.ibias2 + rep.ivar)) < 1e-10
    # the decomposition agrees with the direct mean squared error
    assert rep.imse == pytest.approx(np.mean((est - truth) ** 2), rel=1e-10)


# -- fits ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def s1_fit():
    raw = generate(ScenarioSpec("s1", n=450, seed=21))
    return fit(raw, "clayton", (0,), cfg=ProposalConfig(iterations=4000, burn_in=1500),
               seed=5)


def test_s1_fit_recovers_calibration(s1_fit):
    grid = eval_grid("s1")
    est = posterior_mean_curve(s1_fit.trace, s1_fit.standardization.apply(grid),
                               "clayton")
    truth = np.exp(true_calibration("s1", grid))
    assert np.mean((est - truth) ** 2) < 1.0
    assert s1_fit.trace.dataset_hash == s1_fit.raw.content_hash()


def test_credible_band_ordering(s1_fit):
    for _, _, x in slice_grids(1, 51):
        mean, lo, hi = credible_band(posterior_eta(s1_fit.trace, x), "clayton")
        assert np.all(lo <= mean) and np.all(mean <= hi)


def test_study_is_independent_of_worker_count():
    cfg = ProposalConfig(iterations=200, burn_in=100)
    a = imse_study("s1", 2, StudySettings(n=80, cfg=cfg, root_seed=3, jobs=1))
    b = imse_study("s1", 2, StudySettings(n=80, cfg=cfg, root_seed=3, jobs=2))
    assert np.array_equal(a[1], b[1])
    assert a[0].imse == b[0].imse
