"""Trend removal by separable Gaussian-process regression.

Covariate fields are modelled as ``mean + GP + noise`` with covariance
``sd^2 * Matern32(range) (x) AR1(phi) + noise_sd^2 * I`` over locations and
months. Hyperparameters maximise the log marginal likelihood plus log-normal
priors on range and sd; the residual is the observation minus the posterior
mean. Because the covariance is a Kronecker product, the solve uses the
eigendecompositions of the two factors and is exact on complete grids.

Incidence is prewhitened by fitting the covariate-free disaggregation model
with a spatiotemporal field and subtracting its fitted facility rates.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.spatial.distance import cdist

from .disagg import DisaggData, FitConfig, MaternBasis, PriorConfig, facility_population, fit_map, predict
from .grid import CatchmentWeights

__all__ = [
    "STKernelParams",
    "PrewhitenConfig",
    "PrewhitenResult",
    "matern32",
    "ar1_correlation",
    "gp_residuals",
    "prewhiten_covariate",
    "prewhiten_static",
    "prewhiten_incidence",
    "IncidenceResiduals",
    "residuals_csv",
]


@dataclass
class STKernelParams:
    range: float
    sd: float
    phi: float = 0.0
    noise_sd: float = 1.0

    def __post_init__(self):
        if self.range <= 0 or self.sd <= 0 or self.noise_sd <= 0:
            raise ValueError("range, sd and noise_sd must be positive")
        if not -1 < self.phi < 1:
            raise ValueError("phi must lie in (-1, 1)")


@dataclass
class PrewhitenConfig:
    log_range_mean: float = 2.0
    log_sd_mean: float = -2.0
    log_prior_sd: float = 0.1
    max_exact_locations: int = 5000
    n_rff: int = 500
    rff_seed: int = 0
    fit_locations: int = 400      # hyperparameters are fitted on at most this many locations
    subsample_seed: int = 0
    maxiter: int = 200


@dataclass
class PrewhitenResult:
    residuals: np.ndarray      # same shape as the input
    params: STKernelParams
    converged: bool
    mean: float


def matern32(d, range_, sd=1.0):
    """Matern-3/2 covariance with length-scale ``range_ / 2``."""
    kd = 2.0 * np.sqrt(3.0) * np.asarray(d, float) / range_
    return sd**2 * (1.0 + kd) * np.exp(-kd)


def ar1_correlation(n: int, phi: float) -> np.ndarray:
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return phi**lag


class _SpatialEigen:
    """Eigenpairs of the unit-variance spatial correlation (exact or low rank)."""

    def __init__(self, coords, range_, cfg: PrewhitenConfig):
        n = len(coords)
        if n <= cfg.max_exact_locations:
            a, U = np.linalg.eigh(matern32(cdist(coords, coords), range_))
            self.a = np.maximum(a, 0.0)
            self.U = U
        else:
            basis = MaternBasis(coords, cfg.n_rff // 2, cfg.rff_seed)
            U, s, _ = np.linalg.svd(basis.features(np.log(range_)), full_matrices=False)
            self.a = s**2
            self.U = U
        self.full = self.U.shape[1] == n


def _kron_solve(R, sp: _SpatialEigen, Ut, b, sd, noise_sd):
    """``K^{-1} R`` for R of shape (n_loc, n_time), plus the eigenvalues of K."""
    lam = sd**2 * np.outer(sp.a, b) + noise_sd**2
    Rt = sp.U.T @ R @ Ut
    out = sp.U @ (Rt / lam) @ Ut.T
    if not sp.full:
        comp = R - sp.U @ (sp.U.T @ R)
        out += comp / noise_sd**2
    return out, lam


def _logdet(lam, sp: _SpatialEigen, n_loc, n_time, noise_sd):
    ld = np.sum(np.log(lam))
    if not sp.full:
        ld += (n_loc - sp.U.shape[1]) * n_time * 2.0 * np.log(noise_sd)
    return ld


def _gls(Y, coords, params: STKernelParams, cfg: PrewhitenConfig, sp=None):
    """GLS intercept, ``K^{-1}(y - m)`` and the log marginal likelihood."""
    n_loc, n_time = Y.shape
    sp = sp or _SpatialEigen(coords, params.range, cfg)
    b, Ut = np.linalg.eigh(ar1_correlation(n_time, params.phi))
    b = np.maximum(b, 0.0)
    ones = np.ones_like(Y)
    kinv1, lam = _kron_solve(ones, sp, Ut, b, params.sd, params.noise_sd)
    kinvy, _ = _kron_solve(Y, sp, Ut, b, params.sd, params.noise_sd)
    m = kinvy.sum() / kinv1.sum()
    alpha = kinvy - m * kinv1
    r = Y - m
    n = Y.size
    lml = -0.5 * np.sum(r * alpha) - 0.5 * _logdet(lam, sp, n_loc, n_time, params.noise_sd) - 0.5 * n * np.log(2 * np.pi)
    return m, alpha, lml


def gp_residuals(Y, coords, params: STKernelParams, config: PrewhitenConfig | None = None):
    """Residuals ``y - posterior mean`` for fixed hyperparameters.

    ``Y`` is ``(n_locations, n_months)``. Returns ``(residuals, intercept)``.
    """
    cfg = config or PrewhitenConfig()
    Y = np.asarray(Y, float)
    m, alpha, _ = _gls(Y, np.asarray(coords, float), params, cfg)
    # y - m - sd^2 K_f K^{-1}(y - m) = noise_sd^2 K^{-1}(y - m)
    return params.noise_sd**2 * alpha, m


def _unpack(theta):
    return STKernelParams(range=float(np.exp(theta[0])), sd=float(np.exp(theta[1])),
                          phi=float(np.tanh(theta[2])), noise_sd=float(np.exp(theta[3])))


def _fit_params(Y, coords, cfg: PrewhitenConfig, temporal: bool):
    def neg(theta):
        full = np.array([theta[0], theta[1], theta[2] if temporal else 0.0, theta[-1]])
        p = _unpack(full)
        try:
            _, _, lml = _gls(Y, coords, p, cfg)
        except np.linalg.LinAlgError:
            return 1e300
        lp = -0.5 * ((theta[0] - cfg.log_range_mean) ** 2 + (theta[1] - cfg.log_sd_mean) ** 2) / cfg.log_prior_sd**2
        if temporal:
            # flat prior on phi expressed in atanh(phi)
            lp += np.log1p(-np.tanh(theta[2]) ** 2)
        return -(lml + lp)

    x0 = [cfg.log_range_mean, cfg.log_sd_mean] + ([0.5] if temporal else []) + [np.log(max(np.std(Y), 1e-3))]
    bounds = [(None, None), (None, None)] + ([(-4.0, 4.0)] if temporal else []) + [(-12.0, 5.0)]
    res = optimize.minimize(neg, np.array(x0), method="L-BFGS-B", bounds=bounds, options={"maxiter": cfg.maxiter})
    theta = res.x
    full = np.array([theta[0], theta[1], theta[2] if temporal else 0.0, theta[-1]])
    return _unpack(full), bool(res.success)


def prewhiten_covariate(values, coords, config: PrewhitenConfig | None = None) -> PrewhitenResult:
    """Detrend a covariate observed on all locations for every month.

    ``values`` is ``(n_months, n_locations)``; residuals have the same shape.
    """
    cfg = config or PrewhitenConfig()
    V = np.asarray(values, float)
    if V.ndim != 2 or V.shape[0] < 2 or V.shape[1] < 2:
        raise ValueError("need at least 2 months and 2 locations")
    return _prewhiten(V.T, np.asarray(coords, float), cfg, temporal=True)


def prewhiten_static(values, coords, config: PrewhitenConfig | None = None) -> PrewhitenResult:
    """Detrend a time-invariant field ``(n_locations,)`` with a spatial GP only."""
    cfg = config or PrewhitenConfig()
    v = np.asarray(values, float).ravel()
    if v.size < 2:
        raise ValueError("need at least 2 locations")
    return _prewhiten(v[:, None], np.asarray(coords, float), cfg, temporal=False)


def _prewhiten(Y, coords, cfg, temporal):
    if not np.all(np.isfinite(Y)):
        raise ValueError("field contains non-finite values")
    mean = float(Y.mean())
    scale = float(Y.std())
    shape_out = Y.T.shape if temporal else (Y.shape[0],)
    if scale <= 1e-12 * max(1.0, abs(mean)):
        return PrewhitenResult(np.zeros(shape_out), STKernelParams(np.exp(cfg.log_range_mean), np.exp(cfg.log_sd_mean)),
                               True, mean)
    Z = (Y - mean) / scale
    n_loc = Z.shape[0]
    if n_loc > cfg.fit_locations:
        idx = np.sort(np.random.default_rng(cfg.subsample_seed).choice(n_loc, cfg.fit_locations, replace=False))
    else:
        idx = np.arange(n_loc)
    params, ok = _fit_params(Z[idx], coords[idx], cfg, temporal)
    if not ok:
        warnings.warn("prewhitening hyperparameter search did not converge; using the best point found",
                      RuntimeWarning)
    resid, m = gp_residuals(Z, coords, params, cfg)
    resid = resid * scale
    out = resid.T if temporal else resid[:, 0]
    return PrewhitenResult(out, params, ok, mean + scale * m)


@dataclass
class IncidenceResiduals:
    residuals: np.ndarray        # (n_months, n_facilities); NaN for excluded facilities
    attractiveness: np.ndarray
    fitted_rate: np.ndarray
    observed_rate: np.ndarray
    included: np.ndarray
    model: object


def prewhiten_incidence(counts, catchment: CatchmentWeights, population, tsp, coords,
                        config: FitConfig | None = None) -> IncidenceResiduals:
    """Residual facility rates from a covariate-free spatiotemporal disaggregation fit.

    Rates are per treatment-seeking population. Facilities whose catchment
    holds no population are excluded with a warning.
    """
    counts = np.asarray(counts, float)
    if np.any(counts[np.isfinite(counts)] < 0):
        raise ValueError("counts must be non-negative")
    ts_pop = np.asarray(population, float) * np.asarray(tsp, float)
    T = counts.shape[0]
    base_pop = facility_population(catchment, ts_pop)
    included = base_pop > 0
    if not included.all():
        warnings.warn(f"{int((~included).sum())} facilities have zero catchment population and are excluded",
                      RuntimeWarning)
    cfg = config or FitConfig(field_mode="spatiotemporal", priors=PriorConfig(field_prior="lognormal"))
    data = DisaggData(counts, np.zeros((T, catchment.n_pixels, 0)), catchment, ts_pop, coords,
                      facility_mask=included)
    model = fit_map(data, cfg)
    _, mu = predict(model, data.covariates, catchment, ts_pop, coords)
    fpop = facility_population(catchment.with_attractiveness(model.attractiveness), ts_pop)
    with np.errstate(divide="ignore", invalid="ignore"):
        fitted = np.where(included, mu / fpop, np.nan)
        observed = np.where(included, counts / fpop, np.nan)
    return IncidenceResiduals(observed - fitted, model.attractiveness, fitted, observed, included, model)


def residuals_csv(variable: str, residuals, location_ids=None) -> str:
    """CSV rows ``variable,location_id,time,residual`` for a ``(n_months, n_locations)`` array."""
    R = np.atleast_2d(np.asarray(residuals, float))
    ids = list(range(R.shape[1])) if location_ids is None else list(location_ids)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variable", "location_id", "time", "residual"])
    for t in range(R.shape[0]):
        for j, loc in enumerate(ids):
            if np.isfinite(R[t, j]):
                w.writerow([variable, loc, t, repr(float(R[t, j]))])
    return buf.getvalue()
