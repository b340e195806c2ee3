import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import cdist

from aggcausal.disagg import FitConfig, PriorConfig, facility_population
from aggcausal.grid import catchment_weights
from aggcausal.prewhiten import (
    PrewhitenConfig,
    STKernelParams,
    ar1_correlation,
    gp_residuals,
    matern32,
    prewhiten_covariate,
    prewhiten_incidence,
    prewhiten_static,
    residuals_csv,
)
from aggcausal.synth import make_scenario


def grid_coords(n=20):
    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.c_[r.ravel(), c.ravel()].astype(float)


COORDS = grid_coords()
SURF = np.sin(COORDS[:, 0] / 6) + np.cos(COORDS[:, 1] / 8)


@pytest.fixture(scope="module")
def smooth_field():
    rng = np.random.default_rng(0)
    V = np.array([SURF * (1 + 0.05 * k) for k in range(12)]) + 0.01 * rng.standard_normal((12, 400))
    return V, prewhiten_covariate(V, COORDS)


def test_smooth_field_is_removed(smooth_field):
    V, res = smooth_field
    assert res.residuals.shape == V.shape
    assert res.residuals.std() <= 0.1 * V.std()


def test_white_noise_survives():
    W = np.random.default_rng(1).standard_normal((12, 400))
    res = prewhiten_covariate(W, COORDS)
    assert np.corrcoef(res.residuals.ravel(), W.ravel())[0, 1] >= 0.9


def test_constant_fields():
    assert np.abs(prewhiten_covariate(np.full((6, 400), 3.0), COORDS).residuals).max() <= 1e-6
    assert np.abs(prewhiten_static(np.full(400, -2.0), COORDS).residuals).max() <= 1e-6


def test_static_gradient_removed():
    g = 0.3 * COORDS[:, 0] + 0.1 * COORDS[:, 1]
    noisy = g + 0.01 * np.random.default_rng(2).standard_normal(400)
    assert prewhiten_static(noisy, COORDS).residuals.std() <= 0.1 * g.std()


def test_static_shuffled_survives():
    sh = np.random.default_rng(3).permutation(SURF)
    assert np.corrcoef(prewhiten_static(sh, COORDS).residuals, sh)[0, 1] >= 0.9


def test_idempotent_in_trend(smooth_field):
    _, res = smooth_field
    again = prewhiten_covariate(res.residuals, COORDS).residuals
    rms = np.sqrt(np.mean(res.residuals**2))
    assert np.sqrt(np.mean((again - res.residuals) ** 2)) < 0.1 * rms


def test_shift_invariance_end_to_end(smooth_field):
    V, res = smooth_field
    shifted = prewhiten_covariate(V + 5.0, COORDS).residuals
    assert np.abs(shifted - res.residuals).max() <= 1e-4 * np.abs(res.residuals).max()


@settings(max_examples=20, deadline=None)
@given(st.floats(-100, 100), st.integers(0, 1000))
def test_shift_invariance_fixed_params(c, seed):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((30, 4))
    p = STKernelParams(4.0, 0.5, 0.3, 0.4)
    r1, m1 = gp_residuals(Y, COORDS[:30], p)
    r2, m2 = gp_residuals(Y + c, COORDS[:30], p)
    np.testing.assert_allclose(r1, r2, atol=1e-9 * (1 + abs(c)))
    assert m2 - m1 == pytest.approx(c, abs=1e-9 * (1 + abs(c)))


def test_matches_dense_cholesky():
    rng = np.random.default_rng(4)
    p = STKernelParams(5.0, 0.3, 0.6, 0.2)
    cc = COORDS[:80]
    Y = rng.standard_normal((80, 5))
    resid, m = gp_residuals(Y, cc, p)
    Kf = p.sd**2 * np.kron(matern32(cdist(cc, cc), 5.0), ar1_correlation(5, 0.6))
    K = Kf + p.noise_sd**2 * np.eye(400)
    y, one = Y.ravel(), np.ones(400)
    L = np.linalg.cholesky(K)

    def solve(v):
        return np.linalg.solve(L.T, np.linalg.solve(L, v))

    mean = (one @ solve(y)) / (one @ solve(one))
    post = mean + Kf @ solve(y - mean)
    assert np.abs((y - post) - resid.ravel()).max() <= 1e-8
    assert m == pytest.approx(mean, abs=1e-10)


def test_low_rank_path_removes_trend(smooth_field):
    V, _ = smooth_field
    cfg = PrewhitenConfig(max_exact_locations=100, n_rff=400)
    res = prewhiten_covariate(V, COORDS, cfg)
    assert res.residuals.std() <= 0.2 * V.std()


def test_kernel_helpers():
    assert matern32(0.0, 3.0, 2.0) == pytest.approx(4.0)
    A = ar1_correlation(4, 0.5)
    assert A[0, 3] == pytest.approx(0.125) and np.allclose(A, A.T)
    with pytest.raises(ValueError):
        STKernelParams(range=-1.0, sd=1.0)
    with pytest.raises(ValueError):
        STKernelParams(range=1.0, sd=1.0, phi=1.0)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        prewhiten_covariate(np.ones((1, 400)), COORDS)
    bad = np.ones((3, 400))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        prewhiten_covariate(bad, COORDS)


def test_residuals_csv_format():
    text = residuals_csv("rain", np.array([[0.5, np.nan], [1.0, -2.0]]), ["a", "b"])
    lines = text.strip().split("\n")
    assert lines[0] == "variable,location_id,time,residual"
    assert lines[1] == "rain,a,0,0.5" and len(lines) == 4


@pytest.fixture(scope="module")
def incidence_setup():
    sc = make_scenario(n_rows=12, n_cols=12, n_facilities=12, n_months=6, seed=2, beta0=-4, pop_mean=2000)
    cfg = FitConfig(n_basis=20, field_mode="spatiotemporal", priors=PriorConfig(field_prior="lognormal"))
    return sc, cfg


def test_incidence_self_consistency(incidence_setup):
    sc, cfg = incidence_setup
    first = prewhiten_incidence(sc.counts, sc.catchment, sc.population, sc.tsp, sc.coordinates(), cfg)
    # simulate counts from the fitted expectations and refit
    fpop = facility_population(sc.catchment.with_attractiveness(first.attractiveness), sc.population * sc.tsp)
    expected = first.fitted_rate * fpop
    sim = np.random.default_rng(0).poisson(np.nan_to_num(expected))
    res = prewhiten_incidence(sim, sc.catchment, sc.population, sc.tsp, sc.coordinates(), cfg)
    per_fac = np.nanmean(res.residuals, axis=0)[res.included]
    se = per_fac.std(ddof=1) / np.sqrt(per_fac.size)
    assert abs(per_fac.mean()) <= 2 * se


def test_incidence_zero_counts_nonpositive(incidence_setup):
    sc, cfg = incidence_setup
    res = prewhiten_incidence(np.zeros_like(sc.counts), sc.catchment, sc.population, sc.tsp, sc.coordinates(), cfg)
    assert np.all(res.residuals[:, res.included] <= 0)


def test_incidence_excludes_empty_facility():
    r = np.random.default_rng(5)
    tt = r.uniform(10, 150, size=(25, 3))
    tt[:, 2] = 1000.0
    cw = catchment_weights(tt)
    counts = r.poisson(5.0, size=(4, 3)).astype(float)
    counts[:, 2] = 0
    coords = grid_coords(5)
    with pytest.warns(RuntimeWarning, match="excluded"):
        res = prewhiten_incidence(counts, cw, np.full(25, 100.0), np.ones(25), coords,
                                  FitConfig(n_basis=10, field_mode="spatiotemporal",
                                            priors=PriorConfig(field_prior="lognormal")))
    assert list(res.included) == [True, True, False]
    assert np.all(np.isnan(res.residuals[:, 2]))


def test_incidence_rejects_negative_counts():
    cw = catchment_weights(np.full((4, 1), 50.0))
    with pytest.raises(ValueError):
        prewhiten_incidence(-np.ones((2, 1)), cw, np.ones(4), np.ones(4), grid_coords(2))
