"""Synthetic spatiotemporal scenarios with a known causal graph.

Also home to the exact d-separation oracle, CPDAG construction and the
structural Hamming distance used to score recovered graphs.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy import ndimage

from .grid import (
    CatchmentWeights,
    Raster,
    TreatmentSeekingParams,
    catchment_weights,
    travel_times,
    treatment_seeking_proportion,
)
from .pcalg import PDAG, meek_orient

__all__ = [
    "random_dag",
    "topological_order",
    "d_separated",
    "dsep_oracle",
    "cpdag",
    "shd",
    "noise_field",
    "simulate_fields",
    "simulate_incidence",
    "ScenarioSpec",
    "Scenario",
    "make_scenario",
    "FIGURE1_EDGES",
]

# W causes X and V; W and X cause Y; Y causes Z
FIGURE1_EDGES = [("X", "Y"), ("Y", "Z"), ("W", "X"), ("W", "Y"), ("W", "V")]

NONLINEARITIES = {
    "linear": lambda x: x,
    "quadratic": lambda x: x**2 - 1.0,
    "sine": np.sin,
}


def random_dag(n_vars: int, edge_prob: float, seed=None, names=None) -> PDAG:
    """Random DAG: uniform node order, each forward edge kept with ``edge_prob``."""
    if n_vars < 1:
        raise ValueError("n_vars must be at least 1")
    if not 0 <= edge_prob <= 1:
        raise ValueError("edge_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    names = list(range(n_vars)) if names is None else list(names)
    order = [names[i] for i in rng.permutation(n_vars)]
    keep = rng.random(n_vars * (n_vars - 1) // 2) < edge_prob
    edges = [(a, b) for (a, b), k in zip(combinations(order, 2), keep) if k]
    return PDAG(names, directed=edges)


def topological_order(dag: PDAG) -> list:
    indeg = {n: len(dag.parents(n)) for n in dag.nodes}
    ready = [n for n in dag.nodes if indeg[n] == 0]
    out = []
    while ready:
        n = ready.pop(0)
        out.append(n)
        for c in dag.children(n):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(out) != len(dag.nodes):
        raise ValueError("graph has a directed cycle")
    return out


def _ancestors(dag: PDAG, nodes) -> set:
    out, stack = set(nodes), list(nodes)
    while stack:
        for p in dag.parents(stack.pop()):
            if p not in out:
                out.add(p)
                stack.append(p)
    return out


def d_separated(dag: PDAG, x, y, z=()) -> bool:
    """Reachability ("Bayes ball") test of whether ``x`` and ``y`` are d-separated by ``z``."""
    z = set(z)
    if x in z or y in z:
        return True
    anc_z = _ancestors(dag, z)
    # states: (node, arrived_from_child) — True means travelling up
    visited = set()
    stack = [(x, True)]
    while stack:
        node, up = stack.pop()
        if (node, up) in visited:
            continue
        visited.add((node, up))
        if node == y:
            return False
        if up and node not in z:
            stack.extend((p, True) for p in dag.parents(node))
            stack.extend((c, False) for c in dag.children(node))
        elif not up:
            if node not in z:
                stack.extend((c, False) for c in dag.children(node))
            if node in anc_z:
                stack.extend((p, True) for p in dag.parents(node))
    return True


def dsep_oracle(dag: PDAG):
    """CI oracle returning p=1 for d-separated pairs and p=0 otherwise."""
    topological_order(dag)

    def oracle(x, y, cond=()):
        return 1.0 if d_separated(dag, x, y, cond) else 0.0

    return oracle


def cpdag(dag: PDAG) -> PDAG:
    """Completed PDAG of the Markov equivalence class of ``dag``."""
    g = PDAG(dag.nodes)
    for a, b in dag.directed_edges:
        g.add_undirected(a, b)
    for c in dag.nodes:
        for a, b in combinations(dag.parents(c), 2):
            if not dag.is_adjacent(a, b):
                if g.is_undirected(a, c):
                    g.orient(a, c)
                if g.is_undirected(b, c):
                    g.orient(b, c)
    return meek_orient(g)


def shd(estimated: PDAG, truth: PDAG) -> int:
    """Structural Hamming distance from ``estimated`` to the CPDAG of ``truth``.

    Each unordered pair whose mark differs (missing, extra, undirected vs
    directed, reversed) costs one.
    """
    if set(estimated.nodes) != set(truth.nodes):
        raise ValueError("estimated and true graphs have different node sets")
    target = cpdag(truth)
    return sum(estimated.mark(a, b) != target.mark(a, b) for a, b in combinations(truth.nodes, 2))


# -- fields -----------------------------------------------------------------

def noise_field(shape, n_months: int | None, spatial_length: float, temporal_ar: float, rng) -> np.ndarray:
    """Unit-variance Gaussian noise, smoothed in space and AR(1)-filtered in time.

    Returns ``(n_rows, n_cols)`` when ``n_months`` is None, else ``(n_months, n_rows, n_cols)``.
    """
    def spatial():
        e = rng.standard_normal(shape)
        if spatial_length > 0:
            e = ndimage.gaussian_filter(e, spatial_length, mode="wrap")
            e /= e.std()
        return e

    if n_months is None:
        return spatial()
    out = np.empty((n_months, *shape))
    out[0] = spatial()
    c = np.sqrt(1.0 - temporal_ar**2)
    for t in range(1, n_months):
        out[t] = temporal_ar * out[t - 1] + c * spatial()
    return out


@dataclass
class VariableSpec:
    name: str
    dynamic: bool = False
    noise_scale: float = 1.0
    spatial_length: float = 1.0
    temporal_ar: float = 0.7
    trend_scale: float = 0.0
    trend_length: float = 8.0


def simulate_fields(dag: PDAG, shape, n_months: int, seed=None, variables: dict | None = None,
                    edges: dict | None = None) -> dict[str, np.ndarray]:
    """Evaluate structural equations in topological order.

    ``edges`` maps ``(parent, child)`` to ``(coefficient, nonlinearity)``
    (default ``(1.0, "linear")``). ``variables`` maps names to
    :class:`VariableSpec`. Static fields have shape ``(n_rows, n_cols)``,
    dynamic ones ``(n_months, n_rows, n_cols)``.
    """
    rng = np.random.default_rng(seed)
    variables = variables or {}
    edges = edges or {}
    out = {}
    for node in topological_order(dag):
        spec = variables.get(node, VariableSpec(str(node)))
        months = n_months if spec.dynamic else None
        target_shape = (n_months, *shape) if spec.dynamic else tuple(shape)
        val = np.zeros(target_shape)
        for p in dag.parents(node):
            coef, kind = edges.get((p, node), (1.0, "linear"))
            pv = out[p]
            if pv.ndim == 3 and not spec.dynamic:
                raise ValueError(f"dynamic parent {p!r} cannot drive static {node!r}")
            val = val + coef * NONLINEARITIES[kind](pv)
        if spec.noise_scale > 0:
            val = val + spec.noise_scale * noise_field(shape, months, spec.spatial_length, spec.temporal_ar, rng)
        if spec.trend_scale > 0:
            val = val + spec.trend_scale * noise_field(shape, months, spec.trend_length, 0.95, rng)
        out[node] = np.broadcast_to(val, target_shape).copy()
    return out


def simulate_incidence(lin_pred, catchment: CatchmentWeights, pop, tsp, seed=None, return_pixels=False):
    """Route Poisson pixel cases to facilities.

    ``lin_pred`` is the log incidence rate per person, shape ``(n_months, n_pixels)``.
    Pixel cases are ``Poisson(exp(lin_pred) * pop * tsp)`` and are split among
    facilities multinomially by the catchment probabilities; cases in
    uncovered pixels are never observed.
    """
    rng = np.random.default_rng(seed)
    lin_pred = np.atleast_2d(np.asarray(lin_pred, dtype=float))
    if np.any(np.abs(lin_pred) > 20):
        warnings.warn("log rate clipped to [-20, 20]", RuntimeWarning)
        lin_pred = np.clip(lin_pred, -20, 20)
    people = np.asarray(pop, float) * np.asarray(tsp, float)
    lam = np.exp(lin_pred) * people[None, :]
    pix = rng.poisson(lam)
    p = catchment.p
    lost = np.clip(1.0 - p.sum(axis=1, keepdims=True), 0.0, 1.0)
    pvals = np.hstack([p, lost])
    pvals /= pvals.sum(axis=1, keepdims=True)
    n_fac = p.shape[1]
    counts = np.zeros((lin_pred.shape[0], n_fac), dtype=np.int64)
    for t in range(lin_pred.shape[0]):
        routed = rng.multinomial(pix[t], pvals)
        counts[t] = routed[:, :n_fac].sum(axis=0)
    return (counts, pix) if return_pixels else counts


# -- scenarios ----------------------------------------------------------------

def feature_name(var: str, lag: int | None) -> str:
    return var if lag is None else f"{var}_lag{lag}"


def scale_tag(lag: int | None) -> str:
    return "static" if lag is None else f"dynamic({lag})"


@dataclass
class ScenarioSpec:
    """Everything needed to regenerate a scenario bit-for-bit."""

    n_rows: int = 30
    n_cols: int = 30
    cell_size: float = 1.0
    n_months: int = 12
    lags: tuple = (0, 1)
    n_static: int = 6
    n_dynamic: int = 3
    edge_prob: float = 0.3
    n_true_static: int = 2
    n_true_dynamic: int = 2
    beta_range: tuple = (0.3, 0.5)
    beta0: float = -5.0
    response_noise_sd: float = 0.1
    response_spatial_length: float = 3.0
    n_facilities: int = 150
    friction_minutes: float = 10.0
    friction_spread: float = 0.5
    pop_mean: float = 1000.0
    cutoff: float = 200.0
    spatial_length: float = 1.0
    temporal_ar: float = 0.6
    trend_scale: float = 0.3
    nonlinear_fraction: float = 0.0
    response_nonlinear_fraction: float = 0.0   # share of response parents entering through a nonlinearity
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        d = dict(d)
        if "lags" in d:
            d["lags"] = tuple(d["lags"])
        if "beta_range" in d:
            d["beta_range"] = tuple(d["beta_range"])
        return cls(**d)


@dataclass
class Scenario:
    spec: ScenarioSpec
    friction: Raster
    population: np.ndarray            # (n_pixels,)
    facility_cells: list
    travel_time: np.ndarray           # (n_pixels, n_facilities)
    catchment: CatchmentWeights
    tsp: np.ndarray                   # (n_pixels,)
    static: dict[str, np.ndarray]     # name -> (n_pixels,)
    dynamic: dict[str, np.ndarray]    # name -> (n_months + max_lag, n_pixels)
    counts: np.ndarray                # (n_months, n_facilities)
    dag: PDAG                         # over variables
    edge_params: dict
    response_parents: dict[str, float]  # feature -> beta
    true_log_rate: np.ndarray         # (n_months, n_pixels)
    extra: dict = field(default_factory=dict)

    @property
    def max_lag(self) -> int:
        return max(self.spec.lags) if self.dynamic else 0

    @property
    def n_pixels(self) -> int:
        return self.population.size

    @property
    def n_months(self) -> int:
        return self.counts.shape[0]

    def coordinates(self) -> np.ndarray:
        return self.friction.coordinates()

    def feature_names(self) -> list[str]:
        names = list(self.static)
        for v in self.dynamic:
            names += [feature_name(v, lag) for lag in self.spec.lags]
        return names

    def feature_tags(self) -> dict[str, str]:
        tags = dict.fromkeys(self.static, "static")
        for v in self.dynamic:
            for lag in self.spec.lags:
                tags[feature_name(v, lag)] = scale_tag(lag)
        return tags

    def feature_source(self, feature: str) -> tuple[str, int | None]:
        if feature in self.static:
            return feature, None
        var, _, lag = feature.rpartition("_lag")
        if var not in self.dynamic:
            raise KeyError(f"unknown feature {feature!r}")
        return var, int(lag)

    def feature_values(self, feature: str, months=None) -> np.ndarray:
        """Covariate values ``(len(months), n_pixels)`` for response months ``months``."""
        months = np.arange(self.n_months) if months is None else np.asarray(months)
        var, lag = self.feature_source(feature)
        if lag is None:
            return np.broadcast_to(self.static[var], (len(months), self.n_pixels)).copy()
        idx = months + self.max_lag - lag
        if np.any(idx < 0) or np.any(idx >= self.dynamic[var].shape[0]):
            bad = months[(idx < 0) | (idx >= self.dynamic[var].shape[0])][0]
            raise KeyError(f"no data for {var} at month {bad} with lag {lag}")
        return self.dynamic[var][idx]

    def design(self, features, months=None) -> np.ndarray:
        """Covariate array ``(n_months, n_pixels, n_features)``."""
        months = np.arange(self.n_months) if months is None else np.asarray(months)
        if not features:
            return np.zeros((len(months), self.n_pixels, 0))
        return np.stack([self.feature_values(f, months) for f in features], axis=-1)


def make_scenario(spec: ScenarioSpec | None = None, **overrides) -> Scenario:
    """Generate a full synthetic scenario from ``spec`` (deterministic given ``spec.seed``)."""
    spec = spec or ScenarioSpec()
    if overrides:
        spec = ScenarioSpec.from_dict({**asdict(spec), **overrides})
    ss = np.random.SeedSequence(spec.seed)
    rng_graph, rng_geo, rng_fields, rng_resp, rng_counts = (np.random.default_rng(s) for s in ss.spawn(5))
    shape = (spec.n_rows, spec.n_cols)
    n_pix = spec.n_rows * spec.n_cols

    # geography
    fr = spec.friction_minutes * np.exp(spec.friction_spread * noise_field(shape, None, 3.0, 0.0, rng_geo))
    friction = Raster(fr, cell_size=spec.cell_size)
    pop = spec.pop_mean * np.exp(0.5 * noise_field(shape, None, 2.0, 0.0, rng_geo)).ravel()
    cells = rng_geo.choice(n_pix, size=spec.n_facilities, replace=False)
    facility_cells = [tuple(int(v) for v in divmod(int(c), spec.n_cols)) for c in np.sort(cells)]
    tt = travel_times(friction, facility_cells).T
    catch = catchment_weights(tt, cutoff=spec.cutoff)
    tsp = treatment_seeking_proportion(tt.min(axis=1), TreatmentSeekingParams())

    # variable graph: statics precede dynamics in the causal order
    statics = [f"s{i}" for i in range(spec.n_static)]
    dynamics = [f"d{i}" for i in range(spec.n_dynamic)]
    names = statics + dynamics
    order = list(rng_graph.permutation(statics)) + list(rng_graph.permutation(dynamics))
    dag = PDAG(names)
    edge_params = {}
    for a, b in combinations(order, 2):
        if rng_graph.random() < spec.edge_prob:
            kind = "linear"
            if rng_graph.random() < spec.nonlinear_fraction:
                kind = str(rng_graph.choice(["quadratic", "sine"]))
            coef = float(rng_graph.choice([-1, 1]) * rng_graph.uniform(0.5, 1.0))
            dag.add_directed(a, b)
            edge_params[(a, b)] = (coef, kind)
    variables = {n: VariableSpec(n, dynamic=n in dynamics, spatial_length=spec.spatial_length,
                                 temporal_ar=spec.temporal_ar, trend_scale=spec.trend_scale) for n in names}
    total_months = spec.n_months + max(spec.lags)
    fields = simulate_fields(dag, shape, total_months, rng_fields, variables, edge_params)
    # standardise each variable so coefficients are on a common scale
    for k, v in fields.items():
        fields[k] = (v - v.mean()) / v.std()
    static = {k: fields[k].ravel() for k in statics}
    dynamic = {k: fields[k].reshape(total_months, n_pix) for k in dynamics}

    # response parents
    true_static = list(rng_resp.choice(statics, size=spec.n_true_static, replace=False))
    dyn_feats = [feature_name(v, lag) for v in dynamics for lag in spec.lags]
    true_dynamic = list(rng_resp.choice(dyn_feats, size=spec.n_true_dynamic, replace=False))
    parents = {}
    for f in sorted(true_static) + sorted(true_dynamic):
        parents[f] = float(rng_resp.choice([-1, 1]) * rng_resp.uniform(*spec.beta_range))

    links = dict.fromkeys(parents, "linear")
    if spec.response_nonlinear_fraction > 0:
        for f in parents:
            if rng_resp.random() < spec.response_nonlinear_fraction:
                links[f] = str(rng_resp.choice(["quadratic", "sine"]))

    scen = Scenario(spec, friction, pop, facility_cells, tt, catch, tsp, static, dynamic,
                    np.zeros((spec.n_months, spec.n_facilities), dtype=np.int64), dag, edge_params,
                    parents, np.zeros((spec.n_months, n_pix)), extra={"response_links": links})
    lp = np.full((spec.n_months, n_pix), float(spec.beta0))
    for f, b in parents.items():
        lp += b * NONLINEARITIES[links[f]](scen.feature_values(f))
    if spec.response_noise_sd > 0:
        lp += spec.response_noise_sd * noise_field(shape, spec.n_months, spec.response_spatial_length,
                                                   spec.temporal_ar, rng_resp).reshape(spec.n_months, n_pix)
    scen.true_log_rate = lp
    scen.counts = simulate_incidence(lp, catch, pop, tsp, rng_counts)
    return scen
