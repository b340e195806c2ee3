"""Glue between scenarios, prewhitening, selection and fitting.

These functions back the command line interface and are usable on their own.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .citest import VariableView
from .disagg import DisaggData, FitConfig, PriorConfig, evaluate, facility_population, fit_map, predict
from .pcalg import CausalDataset, CIConfig, FeatureRanking, bootstrap_rank, select_features
from .prewhiten import PrewhitenConfig, prewhiten_covariate, prewhiten_incidence, prewhiten_static
from .spikeslab import (PoissonDisaggLikelihood, SpikeSlabConfig, inclusion_probabilities, mcmc_sample,
                        threshold_select)
from .synth import Scenario

__all__ = [
    "RESPONSE",
    "WindowSpec",
    "PipelineConfig",
    "facility_weights",
    "prewhitened_fields",
    "causal_dataset",
    "causal_ranking",
    "spikeslab_ranking",
    "disagg_data",
    "fit_and_evaluate",
    "rolling_windows",
    "ranking_stability",
    "run_report",
]

RESPONSE = "incidence"


@dataclass
class WindowSpec:
    train_months: int = 12
    forecast_months: int = 12
    n_iterations: int = 1
    step: int = 1

    def windows(self, n_months: int):
        out = []
        for k in range(self.n_iterations):
            start = k * self.step
            train = np.arange(start, start + self.train_months)
            test = np.arange(train[-1] + 1, min(train[-1] + 1 + self.forecast_months, n_months))
            if train[-1] >= n_months:
                raise ValueError(f"window {k} needs month {train[-1]} but the data has {n_months} months")
            out.append((train, test))
        return out


@dataclass
class PipelineConfig:
    seed: int = 0
    alpha: float = 0.05
    bootstrap: int = 20
    fraction: float = 0.7
    pvalue: str = "gamma"
    n_perm: int = 500
    D_z: int = 100
    D_xy: int = 5
    D_rit: int = 100
    max_depth: int = 3
    k_static: int = 4
    k_dynamic: int = 4
    prewhiten: bool = False
    covariate_rows: int | None = 600
    jobs: int = 1
    field_mode: str = "spatial"
    n_basis: int = 50
    spikeslab_chains: int = 4
    spikeslab_burn_in: int = 500
    spikeslab_steps: int = 3000
    window: WindowSpec = field(default_factory=WindowSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        if isinstance(d.get("window"), dict):
            d["window"] = WindowSpec(**d["window"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def ci_config(self) -> CIConfig:
        return CIConfig(alpha=self.alpha, max_depth=self.max_depth, D_z=self.D_z, D_xy=self.D_xy,
                        D_rit=self.D_rit, pmethod=self.pvalue, n_perm=self.n_perm)

    def fit_config(self) -> FitConfig:
        return FitConfig(n_basis=self.n_basis, basis_seed=self.seed, field_mode=self.field_mode)

    def spikeslab_config(self) -> SpikeSlabConfig:
        return SpikeSlabConfig(chains=self.spikeslab_chains, burn_in=self.spikeslab_burn_in,
                               steps=self.spikeslab_steps)


def facility_weights(scenario: Scenario) -> np.ndarray:
    """Pixel-to-facility weights ``p_ij * pop_i * tsp_i`` as an (n_facilities, n_pixels) array."""
    return (scenario.catchment.p * (scenario.population * scenario.tsp)[:, None]).T


def prewhitened_fields(scenario: Scenario, config: PrewhitenConfig | None = None) -> dict[str, np.ndarray]:
    """Residual fields with the scenario's layout (statics ``(N,)``, dynamics ``(T + lag, N)``)."""
    coords = scenario.coordinates()
    out = {}
    for k, v in scenario.static.items():
        out[k] = prewhiten_static(v, coords, config).residuals
    for k, v in scenario.dynamic.items():
        out[k] = prewhiten_covariate(v, coords, config).residuals
    return out


def _feature_block(scenario: Scenario, feature, months, fields):
    if fields is None:
        return scenario.feature_values(feature, months)
    var, lag = scenario.feature_source(feature)
    if lag is None:
        return np.broadcast_to(fields[var], (len(months), scenario.n_pixels))
    return fields[var][np.asarray(months) + scenario.max_lag - lag]


def causal_dataset(scenario: Scenario, months, features=None, response_values=None, fields=None,
                   facilities=None, covariate_rows: int | None = 600, seed: int = 0) -> CausalDataset:
    """Facility-month rows: the response is a scalar per row and each feature is the
    catchment-weighted group of pixel values for that facility and month.

    ``response_values`` defaults to the observed rate per treatment-seeking
    population. ``fields`` substitutes prewhitened covariate fields. When
    ``covariate_rows`` is set, the covariate-only search runs on that many
    randomly drawn pixel-months (scalar values) instead of facility-months.
    """
    months = np.asarray(months)
    features = scenario.feature_names() if features is None else list(features)
    tags = scenario.feature_tags()
    W = facility_weights(scenario)
    fpop = W.sum(axis=1)
    facilities = np.flatnonzero(fpop > 0) if facilities is None else np.asarray(facilities)
    if response_values is None:
        response_values = scenario.counts[months] / fpop[None, :]
    resp = np.asarray(response_values, float)[:, facilities]
    T, N = len(months), scenario.n_pixels
    Wf = sparse.csr_matrix(W[facilities])
    # rows ordered (month, facility); pixel points ordered (month, pixel)
    big = sparse.block_diag([Wf] * T, format="csr")
    views = {RESPONSE: VariableView.scalar(RESPONSE, resp.ravel(), "response")}
    for f in features:
        vals = _feature_block(scenario, f, months, fields).reshape(T * N)
        views[f] = VariableView.group(f, vals, big, tags[f])
    if not np.all(np.isfinite(resp)):
        raise ValueError("response contains non-finite values")
    cov_views = None
    if covariate_rows is not None:
        rng = np.random.default_rng([seed, 7919])
        rows = np.sort(rng.choice(T * N, size=min(covariate_rows, T * N), replace=False))
        cov_views = {f: VariableView.scalar(f, views[f].values[rows], tags[f]) for f in features}
    return CausalDataset(views, RESPONSE, cov_views)


def causal_ranking(scenario: Scenario, months, config: PipelineConfig, features=None) -> FeatureRanking:
    fields = None
    response = None
    if config.prewhiten:
        fields = prewhitened_fields(scenario)
        inc = prewhiten_incidence(scenario.counts[months], scenario.catchment, scenario.population, scenario.tsp,
                                  scenario.coordinates(),
                                  FitConfig(n_basis=config.n_basis, basis_seed=config.seed,
                                            field_mode="spatiotemporal",
                                            priors=PriorConfig(field_prior="lognormal")))
        response = np.full((len(months), scenario.catchment.n_facilities), np.nan)
        response[:] = inc.residuals
    ds = causal_dataset(scenario, months, features, fields=fields,
                        response_values=response, seed=config.seed, covariate_rows=config.covariate_rows,
                        facilities=None if response is None else np.flatnonzero(np.isfinite(response).all(axis=0)))
    return bootstrap_rank(ds, B=config.bootstrap, fraction=config.fraction, seed=config.seed,
                          config=config.ci_config(), jobs=config.jobs)


def disagg_data(scenario: Scenario, months, features) -> DisaggData:
    return DisaggData(scenario.counts[months], scenario.design(features, months), scenario.catchment,
                      scenario.population * scenario.tsp, scenario.coordinates(), list(features))


def spikeslab_ranking(scenario: Scenario, months, config: PipelineConfig, features=None):
    """Inclusion probabilities under the disaggregation likelihood."""
    features = scenario.feature_names() if features is None else list(features)
    data = disagg_data(scenario, months, features)
    lik = PoissonDisaggLikelihood(data, config.fit_config())
    samples = mcmc_sample(lik, config.spikeslab_config(), seed=config.seed, feature_names=features)
    if samples.flagged:
        warnings.warn(f"spike-and-slab chains have max split-R-hat {samples.max_rhat:.3f}", RuntimeWarning)
    probs = inclusion_probabilities(samples)
    tags = scenario.feature_tags()
    return FeatureRanking(probs, {f: tags[f] for f in features}, config.spikeslab_chains), samples


def fit_and_evaluate(scenario: Scenario, train, test, features, config: PipelineConfig):
    """Fit on ``train`` months, forecast ``test`` months, and score rates per treatment-seeking population."""
    data = disagg_data(scenario, train, features)
    model = fit_map(data, config.fit_config())
    pop = scenario.population * scenario.tsp
    _, mu = predict(model, scenario.design(features, test), scenario.catchment, pop, scenario.coordinates(),
                    months=np.asarray(test) - train[0])
    fpop = facility_population(scenario.catchment, pop)
    keep = fpop > 0
    pred = mu[:, keep] / fpop[keep]
    obs = scenario.counts[test][:, keep] / fpop[keep]
    return model, evaluate(pred, obs), pred, obs


def rolling_windows(scenario: Scenario, config: PipelineConfig):
    return config.window.windows(scenario.n_months)


def ranking_stability(rankings: list[FeatureRanking]) -> dict:
    """Pearson correlations between the score vectors of every pair of iterations."""
    if not rankings:
        return {"pairs": [], "mean": None}
    order = list(rankings[0].scores)
    vecs = [r.vector(order) for r in rankings]
    pairs = []
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            a, b = vecs[i], vecs[j]
            r = None if np.std(a) == 0 or np.std(b) == 0 else float(np.corrcoef(a, b)[0, 1])
            pairs.append({"i": i, "j": j, "correlation": r})
    vals = [p["correlation"] for p in pairs if p["correlation"] is not None]
    return {"pairs": pairs, "mean": float(np.mean(vals)) if vals else None}


def run_report(scenario: Scenario, config: PipelineConfig, methods=("none", "causal", "spikeslab")) -> dict:
    """Per-iteration selection and forecast metrics for each selection method."""
    features = scenario.feature_names()
    tags = scenario.feature_tags()
    iterations = []
    rankings = {m: [] for m in methods if m != "none"}
    for k, (train, test) in enumerate(rolling_windows(scenario, config)):
        entry = {"iteration": k, "train_months": [int(train[0]), int(train[-1])],
                 "forecast_months": [int(test[0]), int(test[-1])] if len(test) else [], "methods": {}}
        for m in methods:
            if m == "none":
                selected = features
                ranking = None
            elif m == "causal":
                ranking = causal_ranking(scenario, train, config)
                selected = select_features(ranking, tags, config.k_static, config.k_dynamic)
            elif m == "spikeslab":
                ranking, _ = spikeslab_ranking(scenario, train, config)
                selected = threshold_select(ranking.scores, tags, config.k_static, config.k_dynamic)
            else:
                raise ValueError(f"unknown selection method {m!r}")
            if ranking is not None:
                rankings[m].append(ranking)
            res = {"selected": selected, "scores": None if ranking is None else ranking.scores}
            if len(test):
                _, metrics, _, _ = fit_and_evaluate(scenario, train, test, selected, config)
                res["metrics"] = metrics
            entry["methods"][m] = res
        iterations.append(entry)
    summary = {}
    for m in methods:
        vals = [it["methods"][m].get("metrics", {}).get("overall_correlation") for it in iterations]
        vals = [v for v in vals if v is not None]
        rmse = [it["methods"][m].get("metrics", {}).get("rmse") for it in iterations]
        rmse = [v for v in rmse if v is not None]
        summary[m] = {"mean_overall_correlation": float(np.mean(vals)) if vals else None,
                      "mean_rmse": float(np.mean(rmse)) if rmse else None}
        if m in rankings:
            summary[m]["ranking_stability"] = ranking_stability(rankings[m])
    return {"iterations": iterations, "summary": summary, "features": features,
            "true_parents": sorted(scenario.response_parents)}
