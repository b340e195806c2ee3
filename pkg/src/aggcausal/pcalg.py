"""PC algorithm, the response-aware two-stage variant and bootstrap feature ranking."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from .citest import FeatureBank, KernelCITest, VariableView, derive_seed, scale_class

__all__ = [
    "PDAG",
    "PCError",
    "pc_skeleton",
    "orient_v_structures",
    "meek_orient",
    "pc",
    "pc_two_stage",
    "CausalDataset",
    "FeatureRanking",
    "bootstrap_rank",
    "select_features",
]

log = logging.getLogger(__name__)

Oracle = Callable[[Hashable, Hashable, tuple], float]


class PCError(RuntimeError):
    pass


class PDAG:
    """Partially directed graph with undirected (``--``) and directed (``->``) edges."""

    def __init__(self, nodes: Iterable[Hashable], undirected=(), directed=()):
        self.nodes = list(nodes)
        self._und: set[frozenset] = set()
        self._dir: set[tuple] = set()
        self.sepsets: dict[frozenset, tuple] = {}
        self.conflicts = 0
        for a, b in undirected:
            self.add_undirected(a, b)
        for a, b in directed:
            self.add_directed(a, b)

    @classmethod
    def complete(cls, nodes):
        nodes = list(nodes)
        return cls(nodes, combinations(nodes, 2))

    def copy(self) -> "PDAG":
        g = PDAG(self.nodes)
        g._und = set(self._und)
        g._dir = set(self._dir)
        g.sepsets = dict(self.sepsets)
        g.conflicts = self.conflicts
        return g

    def add_node(self, node):
        if node not in self.nodes:
            self.nodes.append(node)

    def add_undirected(self, a, b):
        self.remove_edge(a, b)
        self._und.add(frozenset((a, b)))

    def add_directed(self, a, b):
        self.remove_edge(a, b)
        self._dir.add((a, b))

    def remove_edge(self, a, b):
        self._und.discard(frozenset((a, b)))
        self._dir.discard((a, b))
        self._dir.discard((b, a))

    def orient(self, a, b):
        """Turn an undirected ``a -- b`` into ``a -> b``."""
        if frozenset((a, b)) not in self._und:
            raise ValueError(f"{a} -- {b} is not an undirected edge")
        self._und.discard(frozenset((a, b)))
        self._dir.add((a, b))

    def is_adjacent(self, a, b) -> bool:
        return frozenset((a, b)) in self._und or (a, b) in self._dir or (b, a) in self._dir

    def is_undirected(self, a, b) -> bool:
        return frozenset((a, b)) in self._und

    def is_directed(self, a, b) -> bool:
        return (a, b) in self._dir

    def adjacent(self, a) -> list:
        return [n for n in self.nodes if n != a and self.is_adjacent(a, n)]

    def parents(self, a) -> list:
        return [n for n in self.nodes if (n, a) in self._dir]

    def children(self, a) -> list:
        return [n for n in self.nodes if (a, n) in self._dir]

    def undirected_neighbors(self, a) -> list:
        return [n for n in self.nodes if frozenset((a, n)) in self._und]

    def mark(self, a, b) -> str | None:
        """``'--'``, ``'->'``, ``'<-'`` or ``None``."""
        if frozenset((a, b)) in self._und:
            return "--"
        if (a, b) in self._dir:
            return "->"
        if (b, a) in self._dir:
            return "<-"
        return None

    @property
    def undirected_edges(self) -> set[frozenset]:
        return set(self._und)

    @property
    def directed_edges(self) -> set[tuple]:
        return set(self._dir)

    def n_edges(self) -> int:
        return len(self._und) + len(self._dir)

    def has_directed_cycle(self) -> bool:
        children = {n: [] for n in self.nodes}
        for a, b in self._dir:
            children[a].append(b)
        state = dict.fromkeys(self.nodes, 0)

        def visit(u):
            state[u] = 1
            for v in children[u]:
                if state[v] == 1 or (state[v] == 0 and visit(v)):
                    return True
            state[u] = 2
            return False

        return any(state[n] == 0 and visit(n) for n in self.nodes)

    def same_structure(self, other: "PDAG") -> bool:
        return set(self.nodes) == set(other.nodes) and self._und == other._und and self._dir == other._dir

    def __eq__(self, other):
        return isinstance(other, PDAG) and self.same_structure(other)

    def __repr__(self):
        parts = [f"{a}->{b}" for a, b in sorted(self._dir, key=str)]
        parts += ["{}--{}".format(*sorted(e, key=str)) for e in sorted(self._und, key=lambda e: sorted(map(str, e)))]
        return f"PDAG({', '.join(parts)})"

    def to_edge_list(self) -> str:
        """``src dst mark`` lines; a leading comment lists all nodes."""
        pos = {n: i for i, n in enumerate(self.nodes)}
        lines = ["# nodes: " + " ".join(map(str, self.nodes))]
        und = sorted((sorted(e, key=pos.get) for e in self._und), key=lambda e: (pos[e[0]], pos[e[1]]))
        for a, b in und:
            lines.append(f"{a} {b} --")
        for a, b in sorted(self._dir, key=lambda e: (pos[e[0]], pos[e[1]])):
            lines.append(f"{a} {b} ->")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edge_list(cls, text: str) -> "PDAG":
        nodes, und, dirs = [], [], []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("nodes:"):
                    nodes = line.split(":", 1)[1].split()
                continue
            a, b, mark = line.split()
            if mark == "--":
                und.append((a, b))
            elif mark == "->":
                dirs.append((a, b))
            else:
                raise ValueError(f"unknown edge mark {mark!r}")
            for n in (a, b):
                if n not in nodes:
                    nodes.append(n)
        return cls(nodes, und, dirs)


def _test(oracle, a, b, cond):
    try:
        return float(oracle(a, b, tuple(cond)))
    except Exception as exc:
        raise PCError(f"CI test failed for ({a}, {b} | {list(cond)}): {exc}") from exc


def pc_skeleton(oracle: Oracle, nodes: Sequence, alpha: float = 0.05, max_depth: int | None = 3) -> PDAG:
    """Edge-removal stage of PC, starting from the complete graph.

    Returns an undirected :class:`PDAG` whose ``sepsets`` record the
    conditioning set that separated every removed pair.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    nodes = list(nodes)
    g = PDAG.complete(nodes)
    depth = 0
    while max_depth is None or depth <= max_depth:
        if all(len(g.adjacent(a)) - 1 < depth for a in nodes):
            break
        for i, a in enumerate(nodes):
            for b in nodes[i + 1:]:
                if not g.is_adjacent(a, b):
                    continue
                found = None
                for x, y in ((a, b), (b, a)):
                    pool = [n for n in g.adjacent(x) if n != y]
                    if len(pool) < depth:
                        continue
                    for cond in combinations(pool, depth):
                        if _test(oracle, a, b, cond) >= alpha:
                            found = cond
                            break
                    if found is not None:
                        break
                if found is not None:
                    g.remove_edge(a, b)
                    g.sepsets[frozenset((a, b))] = tuple(found)
        depth += 1
    return g


def orient_v_structures(skeleton: PDAG, sepsets: dict | None = None) -> PDAG:
    """Orient unshielded colliders ``a -> c <- b`` when ``c`` is not in ``sepset(a, b)``.

    An edge demanded in both directions is left undirected and counted in
    ``conflicts``.
    """
    g = skeleton.copy()
    sepsets = skeleton.sepsets if sepsets is None else sepsets
    g.sepsets = dict(sepsets)
    demands = set()
    nodes = g.nodes
    for c in nodes:
        nbrs = [n for n in g.adjacent(c) if g.is_undirected(c, n) or g.is_directed(n, c)]
        for i, a in enumerate(nbrs):
            for b in nbrs[i + 1:]:
                if g.is_adjacent(a, b):
                    continue
                key = frozenset((a, b))
                if key not in sepsets:
                    raise KeyError(f"no separating set recorded for ({a}, {b})")
                if c not in sepsets[key]:
                    demands.add((a, c))
                    demands.add((b, c))
    for a, b in sorted(demands, key=lambda e: (nodes.index(e[0]), nodes.index(e[1]))):
        if (b, a) in demands:
            if nodes.index(a) < nodes.index(b):
                g.conflicts += 1
            continue
        if g.is_undirected(a, b):
            g.orient(a, b)
    return g


def _meek_step(g: PDAG) -> bool:
    for e in sorted(g.undirected_edges, key=lambda e: sorted(map(str, e))):
        for a, b in (tuple(e), tuple(e)[::-1]):
            if not g.is_undirected(a, b):
                break
            # R1: c -> a -- b, c and b nonadjacent
            if any(not g.is_adjacent(c, b) for c in g.parents(a)):
                g.orient(a, b)
                return True
            # R2: a -> c -> b with a -- b
            if any(g.is_directed(c, b) for c in g.children(a)):
                g.orient(a, b)
                return True
            # R3: a -- c -> b, a -- d -> b, c and d nonadjacent
            cands = [c for c in g.undirected_neighbors(a) if g.is_directed(c, b)]
            if any(not g.is_adjacent(c, d) for c, d in combinations(cands, 2)):
                g.orient(a, b)
                return True
            # R4: a -- k -> l -> b with a adjacent to l, k and b nonadjacent
            for k in g.undirected_neighbors(a):
                if k == b or g.is_adjacent(k, b):
                    continue
                if any(l != a and g.is_adjacent(a, l) and g.is_directed(l, b) for l in g.children(k)):
                    g.orient(a, b)
                    return True
    return False


def meek_orient(pdag: PDAG) -> PDAG:
    """Apply Meek's orientation rules R1-R4 until nothing changes."""
    g = pdag.copy()
    while _meek_step(g):
        pass
    return g


def pc(oracle: Oracle, nodes: Sequence, alpha: float = 0.05, max_depth: int | None = 3) -> PDAG:
    return meek_orient(orient_v_structures(pc_skeleton(oracle, nodes, alpha, max_depth)))


def pc_two_stage(oracle: Oracle, covariates: Sequence, response, alpha: float = 0.05,
                 max_depth: int | None = 3, covariate_oracle: Oracle | None = None) -> PDAG:
    """PC over the covariates, then test only the response edges.

    The response starts adjacent to every covariate. An edge ``c -- R`` is
    removed when ``R`` and ``c`` test independent given some subset of the
    response's current neighbours, or of ``c``'s neighbours in the covariate
    graph. Surviving edges point into the response.
    """
    covariates = list(covariates)
    stage_a = pc(covariate_oracle or oracle, covariates, alpha, max_depth)
    cov_adj = {c: stage_a.adjacent(c) for c in covariates}
    resp_adj = list(covariates)
    sepsets = {}
    depth = 0
    while max_depth is None or depth <= max_depth:
        pools_ok = False
        for c in covariates:
            if c not in resp_adj:
                continue
            found = None
            seen = set()
            for pool in ([n for n in resp_adj if n != c], [n for n in cov_adj[c] if n != c]):
                if len(pool) < depth:
                    continue
                pools_ok = True
                for cond in combinations(pool, depth):
                    key = frozenset(cond)
                    if key in seen:
                        continue
                    seen.add(key)
                    if _test(oracle, response, c, cond) >= alpha:
                        found = cond
                        break
                if found is not None:
                    break
            if found is not None:
                resp_adj.remove(c)
                sepsets[frozenset((c, response))] = tuple(found)
        if not pools_ok:
            break
        depth += 1
    g = stage_a.copy()
    g.add_node(response)
    for c in resp_adj:
        g.add_directed(c, response)
    g.sepsets.update(sepsets)
    return g


@dataclass
class CausalDataset:
    """Variables for the two-stage search.

    ``variables`` hold one row per response observation (e.g. facility-month)
    and must include ``response``. ``covariate_variables`` optionally hold a
    different set of rows (e.g. pixel-months) for the covariate-only stage.
    """

    variables: dict[str, VariableView]
    response: str
    covariate_variables: dict[str, VariableView] | None = None

    @property
    def features(self) -> list[str]:
        return [k for k in self.variables if k != self.response]

    @property
    def n(self) -> int:
        return self.variables[self.response].n

    def tags(self) -> dict[str, str]:
        return {k: self.variables[k].scale_tag for k in self.features}


@dataclass
class FeatureRanking:
    scores: dict[str, float]
    scale_tags: dict[str, str]
    B: int
    counts: dict[str, int] = field(default_factory=dict)
    failures: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "scale_tag", "score"])
        for k in self.scores:
            w.writerow([k, self.scale_tags[k], repr(float(self.scores[k]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, B: int = 0) -> "FeatureRanking":
        rows = list(csv.DictReader(io.StringIO(text)))
        scores = {r["feature"]: float(r["score"]) for r in rows}
        tags = {r["feature"]: r["scale_tag"] for r in rows}
        return cls(scores, tags, B)

    def vector(self, order: Sequence[str] | None = None) -> np.ndarray:
        order = list(self.scores) if order is None else order
        return np.array([self.scores[k] for k in order])


@dataclass
class CIConfig:
    alpha: float = 0.05
    max_depth: int | None = 3
    D_z: int = 100
    D_xy: int = 5
    D_rit: int = 100
    ridge: float = 1e-3
    pmethod: str = "gamma"
    n_perm: int = 500


def _subsample(views: dict[str, VariableView], rows) -> dict[str, VariableView]:
    return {k: v.take(rows) for k, v in views.items()}


def _one_run(dataset: CausalDataset, fraction: float, seed: int, b: int, cfg: CIConfig, banks=None):
    rng = np.random.default_rng([seed, b])
    n = dataset.n
    m = max(1, int(round(fraction * n)))
    rows = np.sort(rng.choice(n, size=m, replace=False))
    kw = dict(D_z=cfg.D_z, D_xy=cfg.D_xy, D_rit=cfg.D_rit, ridge=cfg.ridge, pmethod=cfg.pmethod, n_perm=cfg.n_perm)
    bank, cov_bank = banks if banks is not None else (None, None)
    if bank is None:
        oracle = KernelCITest(_subsample(dataset.variables, rows), seed=derive_seed(seed, b), **kw)
    else:
        oracle = KernelCITest(dataset.variables, seed=derive_seed(seed, b), bank=bank, rows=rows, **kw)
    cov_oracle = None
    if dataset.covariate_variables is not None:
        cv = dataset.covariate_variables
        n_c = next(iter(cv.values())).n
        m_c = max(1, int(round(fraction * n_c)))
        rows_c = np.sort(rng.choice(n_c, size=m_c, replace=False))
        if cov_bank is None:
            cov_oracle = KernelCITest(_subsample(cv, rows_c), seed=derive_seed(seed, b, "cov"), **kw)
        else:
            cov_oracle = KernelCITest(cv, seed=derive_seed(seed, b, "cov"), bank=cov_bank, rows=rows_c, **kw)
    g = pc_two_stage(oracle, dataset.features, dataset.response, cfg.alpha, cfg.max_depth, cov_oracle)
    return g.adjacent(dataset.response)


def _safe_run(args):
    try:
        return _one_run(*args), None
    except Exception as exc:  # recorded, excluded from the denominator
        return None, f"{type(exc).__name__}: {exc}"


def bootstrap_rank(dataset: CausalDataset, B: int = 20, fraction: float = 0.7, seed: int = 0,
                   config: CIConfig | None = None, jobs: int = 1, shared_features: bool = True,
                   **kw) -> FeatureRanking:
    """Score each feature by how often it is adjacent to the response over ``B`` subsampled runs.

    With ``shared_features`` every run uses the same random feature map per
    variable (computed once on all rows), so runs differ only in their row
    subsample and test seeds. Otherwise each run draws its own maps.
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    cfg = config or CIConfig(**kw)
    banks = None
    if shared_features:
        banks = (FeatureBank(dataset.variables, derive_seed(seed, "bank")),
                 None if dataset.covariate_variables is None
                 else FeatureBank(dataset.covariate_variables, derive_seed(seed, "bank", "cov")))
    args = [(dataset, fraction, seed, b, cfg, banks) for b in range(B)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_safe_run, args))
    else:
        results = [_safe_run(a) for a in args]
    feats = dataset.features
    counts = dict.fromkeys(feats, 0)
    ok = 0
    for b, (parents, err) in enumerate(results):
        if err is not None:
            warnings.warn(f"bootstrap run {b} failed and is excluded: {err}", RuntimeWarning)
            continue
        ok += 1
        for p in parents:
            counts[p] += 1
    if ok == 0:
        raise PCError("every bootstrap run failed")
    scores = {f: counts[f] / ok for f in feats}
    return FeatureRanking(scores, dataset.tags(), ok, counts, B - ok)


def select_features(ranking: FeatureRanking | dict, scale_tags: dict | None = None,
                    k_static: int = 4, k_dynamic: int = 4) -> list[str]:
    """Top ``k_static`` static and ``k_dynamic`` dynamic features by score.

    Ties are broken by feature name.
    """
    if isinstance(ranking, FeatureRanking):
        scores, tags = ranking.scores, ranking.scale_tags
    else:
        scores, tags = ranking, scale_tags
    chosen = []
    for cls, k in (("static", k_static), ("dynamic", k_dynamic)):
        members = [f for f in scores if scale_class(tags[f]) == cls]
        members.sort(key=lambda f: (-scores[f], f))
        chosen.extend(members[:k])
    return chosen
