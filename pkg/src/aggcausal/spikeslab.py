"""Spike-and-slab variable selection with a continuous bimodal variance prior.

Hierarchy (per coefficient ``l``)::

    beta_l | phi_l, tau2_l ~ N(0, phi_l * tau2_l)
    phi_l | w              ~ (1 - w) delta_{nu0} + w delta_1
    1 / tau2_l             ~ Gamma(shape=a1, scale=a2)
    w                      ~ Uniform(0, 1)

Two likelihoods are supported: Gaussian linear regression, where the
coefficient block is drawn exactly, and the Poisson disaggregation model,
where it is updated by adaptive random-walk Metropolis.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .disagg import DisaggData, DisaggModel, FitConfig, Objective, fit_map
from .pcalg import select_features

__all__ = [
    "SpikeSlabConfig",
    "PosteriorSamples",
    "GaussianLikelihood",
    "PoissonDisaggLikelihood",
    "mcmc_sample",
    "inclusion_probabilities",
    "threshold_select",
    "split_rhat",
]


@dataclass
class SpikeSlabConfig:
    a1: float = 40.0
    a2: float = 0.025
    nu0: float = 0.01
    chains: int = 4
    burn_in: int = 500
    steps: int = 3000
    target_accept: tuple = (0.2, 0.4)

    def __post_init__(self):
        if self.a1 <= 0 or self.a2 <= 0:
            raise ValueError("a1 and a2 must be positive")
        if not 0 < self.nu0 < 1:
            raise ValueError("nu0 must lie in (0, 1)")


@dataclass
class PosteriorSamples:
    """Post-burn-in draws pooled over chains (``chain`` gives each draw's chain)."""

    beta: np.ndarray        # (n_draws, p)
    phi: np.ndarray         # (n_draws, p), values in {nu0, 1}
    tau2: np.ndarray        # (n_draws, p)
    w: np.ndarray           # (n_draws,)
    chain: np.ndarray       # (n_draws,)
    feature_names: list
    intercept: np.ndarray | None = None
    acceptance: list = field(default_factory=list)
    rhat: dict = field(default_factory=dict)

    @property
    def max_rhat(self) -> float:
        vals = [v for v in self.rhat.values() if np.isfinite(v)]
        return max(vals) if vals else float("nan")

    @property
    def flagged(self) -> bool:
        return self.max_rhat > 1.1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.feature_names
        w.writerow(["chain", "w"] + [f"beta[{n}]" for n in names] + [f"phi[{n}]" for n in names]
                   + [f"tau2[{n}]" for n in names])
        for k in range(len(self.w)):
            w.writerow([int(self.chain[k]), repr(float(self.w[k]))] + [repr(float(v)) for v in self.beta[k]]
                       + [repr(float(v)) for v in self.phi[k]] + [repr(float(v)) for v in self.tau2[k]])
        return buf.getvalue()


class GaussianLikelihood:
    """``y = b0 + X b + e`` with ``e ~ N(0, s2)``; flat priors on ``b0`` and ``log s2``."""

    conjugate = True

    def __init__(self, X, y, ridge_tol: float = 1e-10):
        self.X = np.asarray(X, float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(y, float)
        self.n, self.p = self.X.shape
        self.Xa = np.hstack([np.ones((self.n, 1)), self.X])
        self.xtx = self.Xa.T @ self.Xa
        self.xty = self.Xa.T @ self.y
        self.ridge_tol = ridge_tol

    def draw_coefficients(self, prior_var, s2, rng):
        prec = self.xtx / s2
        prec[np.diag_indices(self.p + 1)] += np.concatenate([[1e-8], 1.0 / prior_var])
        try:
            chol = np.linalg.cholesky(prec)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("design is singular beyond the ridge tolerance") from None
        if np.min(np.diag(chol)) ** 2 < self.ridge_tol * np.max(np.diag(chol)) ** 2:
            raise np.linalg.LinAlgError("design is singular beyond the ridge tolerance")
        mean = np.linalg.solve(chol.T, np.linalg.solve(chol, self.xty / s2))
        z = rng.standard_normal(self.p + 1)
        return mean + np.linalg.solve(chol.T, z)

    def draw_noise(self, coef, rng):
        resid = self.y - self.Xa @ coef
        rss = float(resid @ resid)
        return rss / (2.0 * rng.gamma(self.n / 2.0))


class PoissonDisaggLikelihood:
    """Disaggregation likelihood for the coefficient block, other parameters held at a MAP fit."""

    conjugate = False

    def __init__(self, data: DisaggData, config: FitConfig | None = None, nuisance: DisaggModel | None = None):
        cfg = config or FitConfig()
        if nuisance is None:
            nuisance = fit_map(data, cfg)
        self.nuisance = nuisance
        fixed = {"field": nuisance.field_coef, "log_rho": nuisance.log_rho, "log_sigma": nuisance.log_sigma,
                 "phi": float(np.arctanh(nuisance.phi)), "log_w": np.log(nuisance.attractiveness)}
        self.obj = Objective(data, cfg, fixed=fixed, beta_prior_var=np.full(data.n_features, np.inf))
        self.p = data.n_features
        self.start = np.concatenate([[nuisance.beta0], nuisance.beta])
        self.hessian = self._hessian(self.start)

    def neg_log_lik(self, coef) -> float:
        return float(self.obj(np.asarray(coef, float), grad=False))

    def _hessian(self, x, h=1e-4):
        k = x.size
        H = np.zeros((k, k))
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            H[i] = (self.obj(x + e)[1] - self.obj(x - e)[1]) / (2 * h)
        H = 0.5 * (H + H.T)
        evals, evecs = np.linalg.eigh(H)
        return (evecs * np.maximum(evals, 1e-6)) @ evecs.T


def _draw_prior_coefficients(prior_var, rng):
    return np.concatenate([[0.0], rng.standard_normal(prior_var.size) * np.sqrt(prior_var)])


def _run_chain(likelihood, cfg: SpikeSlabConfig, p: int, seed_seq):
    rng = np.random.default_rng(seed_seq)
    nu0 = cfg.nu0
    w = rng.uniform()
    phi = np.where(rng.uniform(size=p) < w, 1.0, nu0)
    inv_tau2 = rng.gamma(cfg.a1, cfg.a2, size=p)
    s2 = 1.0
    if likelihood is None:
        coef = _draw_prior_coefficients(phi / inv_tau2, rng)
    elif likelihood.conjugate:
        coef = np.concatenate([[likelihood.y.mean()], np.zeros(p)])
        s2 = max(float(np.var(likelihood.y)), 1e-12)
    else:
        coef = likelihood.start.copy()
        cur_nll = likelihood.neg_log_lik(coef)
        log_scale = np.log(2.38 / np.sqrt(p + 1))
        accepted = 0
        window = 0

    n_total = cfg.burn_in + cfg.steps
    out = {"beta": np.empty((cfg.steps, p)), "phi": np.empty((cfg.steps, p)), "tau2": np.empty((cfg.steps, p)),
           "w": np.empty(cfg.steps), "intercept": np.empty(cfg.steps)}
    acc_kept = 0
    for it in range(n_total):
        prior_var = phi / inv_tau2
        if likelihood is None:
            coef = _draw_prior_coefficients(prior_var, rng)
        elif likelihood.conjugate:
            coef = likelihood.draw_coefficients(prior_var, s2, rng)
            s2 = likelihood.draw_noise(coef, rng)
        else:
            prec = likelihood.hessian.copy()
            prec[1:, 1:] += np.diag(1.0 / prior_var)
            chol = np.linalg.cholesky(np.linalg.inv(prec))
            prop = coef + np.exp(log_scale) * (chol @ rng.standard_normal(p + 1))
            prop_nll = likelihood.neg_log_lik(prop)
            log_ratio = (cur_nll - prop_nll) - 0.5 * np.sum((prop[1:] ** 2 - coef[1:] ** 2) / prior_var)
            ok = np.log(rng.uniform()) < log_ratio
            if ok:
                coef, cur_nll = prop, prop_nll
            if it < cfg.burn_in:
                accepted += ok
                window += 1
                if window == 50:
                    rate = accepted / window
                    # steer the acceptance rate into the target band during burn-in
                    lo, hi = cfg.target_accept
                    if rate < lo:
                        log_scale -= 0.3
                    elif rate > hi:
                        log_scale += 0.3
                    accepted = window = 0
            else:
                acc_kept += ok
        beta = coef[1:]
        # phi: two-point conditional
        log_slab = np.log(w) - 0.5 * np.log(1.0 / inv_tau2) - 0.5 * beta**2 * inv_tau2
        log_spike = np.log1p(-w) - 0.5 * np.log(nu0 / inv_tau2) - 0.5 * beta**2 * inv_tau2 / nu0
        p_slab = 1.0 / (1.0 + np.exp(np.clip(log_spike - log_slab, -700, 700)))
        phi = np.where(rng.uniform(size=p) < p_slab, 1.0, nu0)
        # 1/tau2: Gamma(a1 + 1/2, rate = 1/a2 + beta^2 / (2 phi))
        rate = 1.0 / cfg.a2 + beta**2 / (2.0 * phi)
        inv_tau2 = rng.gamma(cfg.a1 + 0.5, 1.0 / rate)
        # w: Beta from the indicator counts
        n_slab = int(np.sum(phi == 1.0))
        w = rng.beta(1.0 + n_slab, 1.0 + p - n_slab)
        if it >= cfg.burn_in:
            k = it - cfg.burn_in
            out["beta"][k] = beta
            out["phi"][k] = phi
            out["tau2"][k] = 1.0 / inv_tau2
            out["w"][k] = w
            out["intercept"][k] = coef[0]
    accept = acc_kept / cfg.steps if likelihood is not None and not likelihood.conjugate else None
    return out, accept


def split_rhat(draws: np.ndarray, chain: np.ndarray) -> float:
    """Split-R-hat of a scalar parameter."""
    halves = []
    for c in np.unique(chain):
        x = draws[chain == c]
        m = len(x) // 2
        if m < 2:
            return float("nan")
        halves += [x[:m], x[m:2 * m]]
    h = np.array(halves)
    n = h.shape[1]
    W = h.var(axis=1, ddof=1).mean()
    B = n * h.mean(axis=1).var(ddof=1)
    if W <= 0:
        return float("nan") if B > 0 else 1.0
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def mcmc_sample(likelihood, config: SpikeSlabConfig | None = None, seed: int = 0, p: int | None = None,
                feature_names=None) -> PosteriorSamples:
    """Run ``config.chains`` independent chains and pool their post-burn-in draws.

    ``likelihood=None`` samples the prior (``p`` coefficients).
    """
    cfg = config or SpikeSlabConfig()
    if likelihood is not None:
        p = likelihood.p
    elif p is None:
        raise ValueError("p is required for prior-only sampling")
    names = list(feature_names) if feature_names is not None else [f"x{k}" for k in range(p)]
    seqs = np.random.SeedSequence(seed).spawn(cfg.chains)
    parts, acc = [], []
    for c, ss in enumerate(seqs):
        out, a = _run_chain(likelihood, cfg, p, ss)
        parts.append(out)
        acc.append(a)
    chain = np.repeat(np.arange(cfg.chains), cfg.steps)
    samples = PosteriorSamples(
        beta=np.vstack([o["beta"] for o in parts]), phi=np.vstack([o["phi"] for o in parts]),
        tau2=np.vstack([o["tau2"] for o in parts]), w=np.concatenate([o["w"] for o in parts]),
        chain=chain, feature_names=names, intercept=np.concatenate([o["intercept"] for o in parts]),
        acceptance=acc,
    )
    samples.rhat = {f"beta[{n}]": split_rhat(samples.beta[:, k], chain) for k, n in enumerate(names)}
    samples.rhat["w"] = split_rhat(samples.w, chain)
    return samples


def inclusion_probabilities(samples: PosteriorSamples) -> dict[str, float]:
    """Fraction of pooled draws with ``phi == 1`` for each feature."""
    if len(samples.phi) == 0:
        raise ValueError("no posterior draws")
    probs = np.mean(samples.phi == 1.0, axis=0)
    return dict(zip(samples.feature_names, map(float, probs)))


def threshold_select(probabilities: dict, scale_tags: dict, k_static: int = 4, k_dynamic: int = 4) -> list[str]:
    """Top features per scale class by inclusion probability (same rule as causal selection)."""
    return select_features(probabilities, scale_tags, k_static, k_dynamic)


def probabilities_csv(probabilities: dict, scale_tags: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["feature", "scale_tag", "probability"])
    for k, v in probabilities.items():
        w.writerow([k, scale_tags[k], repr(float(v))])
    return buf.getvalue()
