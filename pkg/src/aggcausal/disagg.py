"""Poisson disaggregation regression fitted by penalised likelihood (MAP).

Pixel incidence rates follow ``log lam_it = b0 + X_it . b + field_it`` and
facility counts are Poisson with mean ``sum_i p_ij lam_it pop_i``, where
``p_ij`` are catchment probabilities and ``pop_i`` the treatment-seeking
population. The spatial field is a Matern-3/2 Gaussian process represented
through a seeded random Fourier basis, optionally evolving over months as an
AR(1) process.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import linalg as sparse_linalg
from scipy.special import gammaln

from .grid import CatchmentWeights

__all__ = [
    "DisaggData",
    "DisaggModel",
    "PriorConfig",
    "FitConfig",
    "MaternBasis",
    "Objective",
    "neg_log_posterior",
    "fit_map",
    "predict",
    "evaluate",
    "facility_population",
]

log = logging.getLogger(__name__)

LOG_ALPHA = np.log(0.01)


@dataclass
class PriorConfig:
    """Prior scales. ``field_prior`` is ``"pc"`` (penalised complexity) or ``"lognormal"``."""

    beta0_sd: float = 2.0
    beta_sd: float = 1.0
    log_w_sd: float = 0.25
    field_prior: str = "pc"
    pc_range: float = 1.0          # p(range < pc_range) = pc_range_prob
    pc_range_prob: float = 0.01
    pc_sigma: float = 0.5          # p(sigma > pc_sigma) = pc_sigma_prob
    pc_sigma_prob: float = 0.01
    lognormal_log_range: float = 2.0
    lognormal_log_sigma: float = -2.0
    lognormal_sd: float = 0.1

    @property
    def pc_rate_range(self) -> float:
        # P(rho < rho0) = exp(-lam * rho0^{-d/2}) with d = 2
        return -np.log(self.pc_range_prob) * self.pc_range

    @property
    def pc_rate_sigma(self) -> float:
        return -np.log(self.pc_sigma_prob) / self.pc_sigma


@dataclass
class FitConfig:
    n_basis: int = 200
    basis_seed: int = 0
    field_mode: str = "spatial"     # "spatial", "spatiotemporal" or "none"
    learn_attractiveness: bool = True
    gtol: float = 1e-5
    maxiter: int = 3000
    priors: PriorConfig = field(default_factory=PriorConfig)


class MaternBasis:
    """Random Fourier basis for a 2-D Matern-3/2 kernel with range ``rho``.

    The range is the distance at which correlation drops to roughly 0.1,
    i.e. ``rho = sqrt(8 nu) / kappa`` which gives a length-scale ``rho / 2``.
    Base frequencies are drawn once from the unit Student-t spectral density
    (3 degrees of freedom) and rescaled by ``2 / rho``.
    """

    NU = 1.5

    def __init__(self, coords: np.ndarray, n_basis: int = 200, seed: int = 0):
        self.coords = np.asarray(coords, dtype=float)
        self.n_basis = n_basis
        self.seed = seed
        rng = np.random.default_rng(seed)
        dof = 2 * self.NU
        g = rng.standard_normal((n_basis, self.coords.shape[1]))
        chi = rng.chisquare(dof, size=n_basis)
        self.base_freq = g * np.sqrt(dof / chi)[:, None]
        self._p0 = self.coords @ self.base_freq.T

    @property
    def n_coef(self) -> int:
        return 2 * self.n_basis

    def features(self, log_rho: float, coords: np.ndarray | None = None, with_derivative: bool = False):
        p0 = self._p0 if coords is None else np.asarray(coords, float) @ self.base_freq.T
        proj = 2.0 * np.exp(-log_rho) * p0
        c, s = np.cos(proj), np.sin(proj)
        scale = 1.0 / np.sqrt(self.n_basis)
        phi = np.hstack([c, s]) * scale
        if not with_derivative:
            return phi
        dphi = np.hstack([s * proj, -c * proj]) * scale
        return phi, dphi


@dataclass
class DisaggData:
    """Inputs for fitting.

    ``counts`` is ``(n_months, n_facilities)``; NaN marks unobserved cells.
    ``covariates`` is ``(n_months, n_pixels, n_features)``.
    ``population`` is the treatment-seeking-adjusted population per pixel.
    """

    counts: np.ndarray
    covariates: np.ndarray
    catchment: CatchmentWeights
    population: np.ndarray
    coords: np.ndarray
    feature_names: list = field(default_factory=list)
    facility_mask: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.covariates.ndim == 2:
            self.covariates = self.covariates[:, :, None]
        T, J = self.counts.shape
        if self.covariates.shape[:2] != (T, self.catchment.n_pixels):
            raise ValueError("covariates must be (n_months, n_pixels, n_features)")
        if self.catchment.n_facilities != J:
            raise ValueError("counts and catchment disagree on the number of facilities")
        if not self.feature_names:
            self.feature_names = [f"x{k}" for k in range(self.covariates.shape[2])]
        if self.facility_mask is None:
            self.facility_mask = np.ones(J, dtype=bool)
        obs = np.isfinite(self.counts) & self.facility_mask[None, :]
        if np.any(self.counts[obs] < 0):
            raise ValueError("counts must be non-negative")
        self.observed = obs

    @property
    def n_months(self) -> int:
        return self.counts.shape[0]

    @property
    def n_features(self) -> int:
        return self.covariates.shape[2]


def facility_population(catchment: CatchmentWeights, population) -> np.ndarray:
    """Treatment-seeking population attributed to each facility."""
    return np.asarray(population, float) @ catchment.p


@dataclass
class DisaggModel:
    beta0: float
    beta: np.ndarray
    feature_names: list
    field_coef: np.ndarray           # (2D,) or (n_months, 2D) innovations
    log_rho: float
    log_sigma: float
    phi: float
    attractiveness: np.ndarray
    field_mode: str = "spatial"
    n_basis: int = 200
    basis_seed: int = 0
    converged: bool = False
    objective: float = float("nan")
    grad_norm: float = float("nan")
    n_iter: int = 0

    @property
    def rho(self) -> float:
        return float(np.exp(self.log_rho))

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                d[k] = v.tolist()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DisaggModel":
        d = dict(d)
        for k in ("beta", "field_coef", "attractiveness"):
            d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "DisaggModel":
        return cls.from_dict(json.loads(text))


class Objective:
    """Negative log posterior and gradient over a flat parameter vector.

    Layout: ``[b0, b (p), field coefficients, log_rho, log_sigma, (atanh phi), (log w)]``.
    Any block can be frozen by passing ``fixed`` values; frozen blocks are
    excluded from the vector.
    """

    def __init__(self, data: DisaggData, config: FitConfig | None = None, fixed: dict | None = None,
                 beta_prior_var: np.ndarray | None = None):
        self.data = data
        self.cfg = config or FitConfig()
        self.priors = self.cfg.priors
        self.mode = self.cfg.field_mode
        if self.mode not in ("spatial", "spatiotemporal", "none"):
            raise ValueError(f"unknown field mode {self.mode!r}")
        self.fixed = dict(fixed or {})
        self.beta_prior_var = beta_prior_var
        self.basis = MaternBasis(data.coords, self.cfg.n_basis, self.cfg.basis_seed) if self.mode != "none" else None
        cat = data.catchment
        self.base = sparse.csr_matrix(np.where(cat.fixed[:, None], 0.0, cat.base))
        self.base_fixed = sparse.csr_matrix(np.where(cat.fixed[:, None], cat.base, 0.0))
        fixed_tot = np.asarray(self.base_fixed.sum(axis=1)).ravel()
        self.base_fixed = sparse.diags(np.divide(1.0, fixed_tot, out=np.zeros_like(fixed_tot),
                                                 where=fixed_tot > 0)) @ self.base_fixed
        self.free_rows = ~cat.fixed
        self.pop = np.asarray(data.population, float)
        self.y = np.where(data.observed, np.nan_to_num(data.counts), 0.0)
        self.obs = data.observed
        self.lgam = float(gammaln(self.y[self.obs] + 1).sum())
        T, N, p = data.covariates.shape
        J = data.counts.shape[1]
        self.sizes = {"beta0": 1, "beta": p}
        if self.mode == "spatial":
            self.sizes["field"] = self.basis.n_coef
        elif self.mode == "spatiotemporal":
            self.sizes["field"] = T * self.basis.n_coef
        else:
            self.sizes["field"] = 0
        self.sizes["log_rho"] = 0 if self.mode == "none" else 1
        self.sizes["log_sigma"] = 0 if self.mode == "none" else 1
        self.sizes["phi"] = 1 if self.mode == "spatiotemporal" else 0
        self.sizes["log_w"] = J if self.cfg.learn_attractiveness else 0
        for k in list(self.sizes):
            if k in self.fixed:
                self.sizes[k] = 0
        self.slices = {}
        pos = 0
        for k, n in self.sizes.items():
            self.slices[k] = slice(pos, pos + n)
            pos += n
        self.size = pos
        self.n_evals = 0
        self._defaults = self.default_values()

    # -- packing -------------------------------------------------------------
    def default_values(self) -> dict:
        d = self.data
        T, N, p = d.covariates.shape
        J = d.counts.shape[1]
        fpop = facility_population(d.catchment, self.pop)
        exposure = float((fpop[None, :] * self.obs).sum())
        total = float(self.y[self.obs].sum())
        b0 = np.log(max(total, 0.5) / exposure) if exposure > 0 else 0.0
        pr = self.priors
        if pr.field_prior == "lognormal":
            lr, ls = pr.lognormal_log_range, pr.lognormal_log_sigma
        else:
            extent = np.ptp(d.coords, axis=0).max() if len(d.coords) > 1 else 1.0
            lr, ls = np.log(max(extent / 4.0, 2.0 * pr.pc_range)), np.log(0.1)
        field_shape = (0,)
        if self.mode == "spatial":
            field_shape = (self.basis.n_coef,)
        elif self.mode == "spatiotemporal":
            field_shape = (T, self.basis.n_coef)
        return {"beta0": b0, "beta": np.zeros(p), "field": np.zeros(field_shape), "log_rho": lr,
                "log_sigma": ls, "phi": 0.0, "log_w": np.zeros(J)}

    def unpack(self, theta: np.ndarray) -> dict:
        vals = dict(self._defaults)
        vals.update(self.fixed)
        for k, sl in self.slices.items():
            if self.sizes[k]:
                v = theta[sl]
                if k in ("beta0", "log_rho", "log_sigma", "phi"):
                    vals[k] = float(v[0])
                elif k == "field" and self.mode == "spatiotemporal":
                    vals[k] = v.reshape(self.data.n_months, -1)
                else:
                    vals[k] = v.copy()
        return vals

    def pack(self, vals: dict) -> np.ndarray:
        theta = np.zeros(self.size)
        for k, sl in self.slices.items():
            if self.sizes[k]:
                theta[sl] = np.ravel(vals[k])
        return theta

    def initial(self) -> np.ndarray:
        return self.pack(self._defaults)

    # -- model pieces ----------------------------------------------------------
    def catchment_matrix(self, log_w):
        w = np.exp(log_w)
        raw = self.base @ sparse.diags(w)
        tot = np.asarray(raw.sum(axis=1)).ravel()
        p = sparse.diags(np.divide(1.0, tot, out=np.zeros_like(tot), where=tot > 0)) @ raw
        return sparse.csr_matrix(p), sparse.csr_matrix(p + self.base_fixed)

    def field_values(self, vals, with_grad=False):
        T, N = self.data.n_months, self.data.catchment.n_pixels
        if self.mode == "none":
            return np.zeros((1, N)), None
        phi_b, dphi_b = self.basis.features(vals["log_rho"], with_derivative=True)
        sigma = np.exp(vals["log_sigma"])
        if self.mode == "spatial":
            u = vals["field"][None, :]
            return sigma * (u @ phi_b.T), (phi_b, dphi_b, sigma, u)
        ar = np.tanh(vals["phi"])
        c = np.sqrt(1.0 - ar**2)
        e = vals["field"]
        u = np.empty_like(e)
        u[0] = e[0]
        for t in range(1, T):
            u[t] = ar * u[t - 1] + c * e[t]
        return sigma * (u @ phi_b.T), (phi_b, dphi_b, sigma, u, ar, c, e)

    def linear_predictor(self, vals, covariates=None, field_vals=None):
        X = self.data.covariates if covariates is None else covariates
        eta = vals["beta0"] + X @ np.asarray(vals["beta"])
        if field_vals is not None:
            eta = eta + field_vals
        return eta

    # -- objective ---------------------------------------------------------------
    def __call__(self, theta: np.ndarray, grad: bool = True):
        self.n_evals += 1
        vals = self.unpack(theta)
        fv, cache = self.field_values(vals)
        eta = self.linear_predictor(vals, field_vals=fv)
        with np.errstate(over="ignore"):
            q = np.exp(eta) * self.pop[None, :]
        p_free, p_all = self.catchment_matrix(vals["log_w"])
        mu = np.asarray(p_all.T @ q.T).T
        obs, y = self.obs, self.y
        with np.errstate(divide="ignore", invalid="ignore"):
            logmu = np.log(mu)
        if np.any(obs & (mu <= 0) & (y > 0)) or not np.all(np.isfinite(mu[obs])):
            return (np.inf, np.zeros_like(theta)) if grad else np.inf
        ylogmu = np.where(obs & (y > 0), y * np.where(mu > 0, logmu, 0.0), 0.0)
        nll = float(np.sum(np.where(obs, mu, 0.0)) - ylogmu.sum() + self.lgam)
        pen, pgrad = self._penalty(vals)
        f = nll + pen
        if not grad:
            return f
        G = np.where(obs, 1.0 - np.divide(y, mu, out=np.zeros_like(mu), where=mu > 0), 0.0)
        H = np.asarray(p_all @ G.T).T
        deta = q * H
        g = self._grad_from_deta(vals, deta, cache)
        if self.sizes["log_w"]:
            mu_free = np.asarray(p_free.T @ q.T).T
            gw = (G * mu_free).sum(axis=0) - np.asarray(p_free.T @ (q * H).sum(axis=0)).ravel()
            g[self.slices["log_w"]] = gw
        for k, v in pgrad.items():
            if self.sizes[k]:
                g[self.slices[k]] += np.ravel(v)
        return f, g

    def _grad_from_deta(self, vals, deta, cache):
        g = np.zeros(self.size)
        X = self.data.covariates
        if self.sizes["beta0"]:
            g[self.slices["beta0"]] = deta.sum()
        if self.sizes["beta"]:
            g[self.slices["beta"]] = np.einsum("tn,tnk->k", deta, X)
        if self.mode == "none":
            return g
        if self.mode == "spatial":
            phi_b, dphi_b, sigma, u = cache
            dF = deta.sum(axis=0)
            if self.sizes["field"]:
                g[self.slices["field"]] = sigma * (phi_b.T @ dF)
            if self.sizes["log_sigma"]:
                g[self.slices["log_sigma"]] = sigma * float(dF @ (phi_b @ u[0]))
            if self.sizes["log_rho"]:
                g[self.slices["log_rho"]] = sigma * float(dF @ (dphi_b @ u[0]))
            return g
        phi_b, dphi_b, sigma, u, ar, c, e = cache
        gu = sigma * (deta @ phi_b)          # dL/du_t, (T, 2D)
        if self.sizes["log_sigma"]:
            g[self.slices["log_sigma"]] = float(np.sum(gu * u))
        if self.sizes["log_rho"]:
            g[self.slices["log_rho"]] = sigma * float(np.sum(deta * (u @ dphi_b.T)))
        T = u.shape[0]
        adj = np.zeros_like(u)
        adj[T - 1] = gu[T - 1]
        for t in range(T - 2, -1, -1):
            adj[t] = gu[t] + ar * adj[t + 1]
        de = adj.copy()
        de[1:] *= c
        if self.sizes["field"]:
            g[self.slices["field"]] = de.ravel()
        if self.sizes["phi"]:
            dc = -ar / c if c > 0 else 0.0
            dphi = float(sum(adj[t] @ (u[t - 1] + dc * e[t]) for t in range(1, T)))
            g[self.slices["phi"]] = dphi * (1.0 - ar**2)
        return g

    def _penalty(self, vals):
        pr = self.priors
        pen = 0.0
        grad = {}
        b0 = vals["beta0"]
        pen += 0.5 * b0**2 / pr.beta0_sd**2
        grad["beta0"] = b0 / pr.beta0_sd**2
        b = np.asarray(vals["beta"])
        var = np.full(b.shape, pr.beta_sd**2) if self.beta_prior_var is None else self.beta_prior_var
        pen += 0.5 * float(np.sum(b**2 / var))
        grad["beta"] = b / var
        if self.mode != "none":
            fcoef = vals["field"]
            pen += 0.5 * float(np.sum(fcoef**2))
            grad["field"] = fcoef
            lr, ls = vals["log_rho"], vals["log_sigma"]
            if pr.field_prior == "pc":
                lam_r, lam_s = pr.pc_rate_range, pr.pc_rate_sigma
                # -log density of (log rho, log sigma), Jacobians included
                pen += lr + lam_r * np.exp(-lr) - ls + lam_s * np.exp(ls)
                grad["log_rho"] = 1.0 - lam_r * np.exp(-lr)
                grad["log_sigma"] = -1.0 + lam_s * np.exp(ls)
            elif pr.field_prior == "lognormal":
                s2 = pr.lognormal_sd**2
                pen += 0.5 * ((lr - pr.lognormal_log_range) ** 2 + (ls - pr.lognormal_log_sigma) ** 2) / s2
                grad["log_rho"] = (lr - pr.lognormal_log_range) / s2
                grad["log_sigma"] = (ls - pr.lognormal_log_sigma) / s2
            else:
                raise ValueError(f"unknown field prior {pr.field_prior!r}")
        if self.mode == "spatiotemporal":
            ar = np.tanh(vals["phi"])
            # flat prior on phi in (-1, 1), expressed for atanh(phi)
            pen += -np.log1p(-ar**2)
            grad["phi"] = 2.0 * ar
        lw = np.asarray(vals["log_w"])
        pen += 0.5 * float(np.sum(lw**2)) / pr.log_w_sd**2
        grad["log_w"] = lw / pr.log_w_sd**2
        return pen, grad

    def to_model(self, theta, **info) -> DisaggModel:
        v = self.unpack(theta)
        return DisaggModel(
            beta0=float(v["beta0"]), beta=np.asarray(v["beta"], float), feature_names=list(self.data.feature_names),
            field_coef=np.asarray(v["field"], float), log_rho=float(v["log_rho"]), log_sigma=float(v["log_sigma"]),
            phi=float(np.tanh(v["phi"])), attractiveness=np.exp(np.asarray(v["log_w"], float)),
            field_mode=self.mode, n_basis=self.cfg.n_basis, basis_seed=self.cfg.basis_seed, **info,
        )

    def theta_from_model(self, model: DisaggModel) -> np.ndarray:
        vals = {"beta0": model.beta0, "beta": model.beta, "field": model.field_coef, "log_rho": model.log_rho,
                "log_sigma": model.log_sigma, "phi": float(np.arctanh(model.phi)),
                "log_w": np.log(model.attractiveness)}
        return self.pack(vals)


def neg_log_posterior(model: DisaggModel, data: DisaggData, config: FitConfig | None = None, grad: bool = False):
    """Objective value (and gradient in the flat layout of :class:`Objective`) at ``model``."""
    cfg = config or FitConfig(n_basis=model.n_basis, basis_seed=model.basis_seed, field_mode=model.field_mode)
    obj = Objective(data, cfg)
    theta = obj.theta_from_model(model)
    return obj(theta, grad=grad)


def _newton_polish(obj, theta, f, g, gtol, max_steps=8):
    """Newton-CG steps with finite-difference Hessian products.

    Quasi-Newton line searches stall once objective differences reach
    floating-point resolution; these steps are accepted on gradient decrease
    instead, so the gradient can be driven below ``gtol``.
    """
    n = theta.size
    for _ in range(max_steps):
        gmax = np.max(np.abs(g))
        if gmax <= gtol:
            break

        def hv(v, x=theta):
            nv = np.linalg.norm(v)
            if nv == 0:
                return np.zeros_like(v)
            eps = 1e-6 / nv
            return (obj(x + eps * v)[1] - obj(x - eps * v)[1]) / (2 * eps)

        op = sparse_linalg.LinearOperator((n, n), matvec=hv, dtype=float)
        step, _ = sparse_linalg.cg(op, -g, rtol=1e-10, atol=0.0, maxiter=min(n, 300))
        accepted = False
        for scale in (1.0, 0.5, 0.25, 0.125):
            cand = theta + scale * step
            fc, gc = obj(cand)
            if np.isfinite(fc) and fc <= f + 1e-9 * max(1.0, abs(f)) and np.max(np.abs(gc)) < gmax:
                theta, f, g = cand, fc, gc
                accepted = True
                break
        if not accepted:
            break
    return theta, f, g


def fit_map(data: DisaggData, config: FitConfig | None = None, init: DisaggModel | None = None,
            fixed: dict | None = None) -> DisaggModel:
    """Quasi-Newton (L-BFGS) minimisation of the negative log posterior."""
    cfg = config or FitConfig()
    if not data.observed.any():
        raise ValueError("no observed facility-months")
    obj = Objective(data, cfg, fixed)
    theta0 = obj.initial() if init is None else obj.theta_from_model(init)
    f0 = obj(theta0, grad=False)
    if not np.isfinite(f0):
        raise ValueError("objective is infinite at the starting point (a facility with cases has zero exposure)")
    res = optimize.minimize(obj, theta0, jac=True, method="L-BFGS-B",
                            options={"maxiter": cfg.maxiter, "gtol": cfg.gtol, "ftol": 1e-15, "maxcor": 30})
    theta = res.x
    f, g = obj(theta)
    if g.size and np.max(np.abs(g)) > cfg.gtol:
        theta, f, g = _newton_polish(obj, theta, f, g, cfg.gtol)
    if f > f0:
        theta, f = theta0, f0
        g = obj(theta)[1]
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    converged = gnorm <= cfg.gtol
    if not converged:
        warnings.warn(f"MAP fit stopped with gradient norm {gnorm:.3g} ({res.message})", RuntimeWarning)
    return obj.to_model(theta, converged=bool(converged), objective=float(f), grad_norm=gnorm, n_iter=int(res.nit))


def predict(model: DisaggModel, covariates, catchment: CatchmentWeights, population, coords,
            months: Sequence[int] | None = None):
    """Pixel rates ``lam`` (n_months, n_pixels) and facility expectations ``mu`` (n_months, n_facilities).

    ``months`` index the field for the spatiotemporal mode; months after the
    fitted span decay towards zero at the AR(1) rate.
    """
    X = np.asarray(covariates, float)
    if X.ndim == 2:
        X = X[:, :, None]
    T, N, p = X.shape
    if p != len(model.beta):
        raise ValueError(f"model has {len(model.beta)} coefficients but covariates have {p} features")
    eta = model.beta0 + X @ model.beta
    if model.field_mode != "none":
        basis = MaternBasis(coords, model.n_basis, model.basis_seed)
        phi_b = basis.features(model.log_rho)
        if model.field_mode == "spatial":
            eta = eta + model.sigma * (phi_b @ model.field_coef)[None, :]
        else:
            e = model.field_coef
            u = np.empty_like(e)
            u[0] = e[0]
            c = np.sqrt(1 - model.phi**2)
            for t in range(1, e.shape[0]):
                u[t] = model.phi * u[t - 1] + c * e[t]
            months = np.arange(T) if months is None else np.asarray(months)
            last = e.shape[0] - 1
            ut = np.stack([u[m] if m <= last else model.phi ** (m - last) * u[last] for m in months])
            eta = eta + model.sigma * (ut @ phi_b.T)
    lam = np.exp(eta)
    cat = catchment.with_attractiveness(model.attractiveness)
    mu = (lam * np.asarray(population, float)[None, :]) @ cat.p
    return lam, mu


def _pearson(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size < 2 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def evaluate(predicted, observed) -> dict:
    """Correlation and RMSE metrics between predicted and observed facility-month rates.

    Both arrays are ``(n_months, n_facilities)``; NaN observations are ignored.
    Temporal correlation is computed per facility over months and averaged;
    facilities with a constant series are skipped. ``temporal_correlation_y2``
    uses months 13-24 only. Undefined metrics are ``None``.
    """
    pred = np.asarray(predicted, float)
    obs = np.asarray(observed, float)
    if pred.shape != obs.shape:
        raise ValueError("predicted and observed must have the same shape")
    ok = np.isfinite(obs) & np.isfinite(pred)
    out = {
        "overall_correlation": _pearson(pred[ok], obs[ok]),
        "rmse": float(np.sqrt(np.mean((pred[ok] - obs[ok]) ** 2))) if ok.any() else None,
    }

    def temporal(rows):
        vals, skipped = [], 0
        for j in range(obs.shape[1]):
            m = ok[rows, j]
            r = _pearson(pred[rows, j][m], obs[rows, j][m])
            if r is None:
                skipped += 1
            else:
                vals.append(r)
        return (float(np.mean(vals)) if vals else None), skipped

    out["temporal_correlation"], out["temporal_skipped"] = temporal(slice(None))
    if obs.shape[0] >= 13:
        out["temporal_correlation_y2"], out["temporal_y2_skipped"] = temporal(slice(12, 24))
    else:
        out["temporal_correlation_y2"], out["temporal_y2_skipped"] = None, obs.shape[1]
    return out
