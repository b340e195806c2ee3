"""Randomised kernel (conditional) independence tests for scalar and grouped data.

Variables are either observed once per observation (``scalar`` kind) or as a
weighted group of fine-scale values per observation (``group`` kind, e.g. the
pixels in a facility catchment). Group variables are embedded with the
weighted sum of their random Fourier features, which approximates the linear
kernel between empirical mean embeddings.
"""

from __future__ import annotations

import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, sparse, stats

from .kernels import DegenerateVariableError, aggregate_matrix, median_heuristic, rff_features, sample_rff

__all__ = [
    "VariableView",
    "TestResult",
    "CITestError",
    "featurize",
    "rit",
    "rcit",
    "permutation_pvalue",
    "gamma_pvalue",
    "KernelCITest",
    "FeatureBank",
    "derive_seed",
]

SCALAR = "scalar"
GROUP = "group"


class CITestError(RuntimeError):
    pass


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from a tuple of ints/strings."""
    key = "\x1f".join(str(p) for p in parts).encode()
    return zlib.crc32(key)


def scale_class(tag: str) -> str:
    """``"static"`` or ``"dynamic"`` for a scale tag like ``"dynamic(2)"``."""
    return "static" if tag == "static" else "dynamic"


@dataclass
class VariableView:
    """A named variable with one row per observation.

    For ``scalar`` kind, ``values`` has shape ``(n,)`` or ``(n, d)``.
    For ``group`` kind, ``values`` holds fine-scale point values and ``weights``
    is an ``(n, n_points)`` sparse matrix giving each observation's group.
    """

    name: str
    values: np.ndarray
    weights: sparse.csr_matrix | None = None
    scale_tag: str = "static"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.weights is not None:
            self.weights = sparse.csr_matrix(self.weights, dtype=float)
            if self.weights.shape[1] != self.values.shape[0]:
                raise ValueError(f"{self.name}: weights columns must match the number of points")
            if self.weights.nnz and (self.weights.data.min() < 0 or not np.all(np.isfinite(self.weights.data))):
                raise ValueError(f"{self.name}: weights must be finite and non-negative")

    @classmethod
    def scalar(cls, name, values, scale_tag="static"):
        return cls(name, values, None, scale_tag)

    @classmethod
    def group(cls, name, points, weights, scale_tag="static", normalize=True):
        w = sparse.csr_matrix(weights, dtype=float)
        if normalize:
            tot = np.asarray(w.sum(axis=1)).ravel()
            inv = np.divide(1.0, tot, out=np.zeros_like(tot), where=tot > 0)
            w = sparse.diags(inv) @ w
        return cls(name, points, w, scale_tag)

    @property
    def kind(self) -> str:
        return SCALAR if self.weights is None else GROUP

    @property
    def n(self) -> int:
        return self.values.shape[0] if self.weights is None else self.weights.shape[0]

    def take(self, rows) -> "VariableView":
        rows = np.asarray(rows)
        if self.weights is None:
            return VariableView(self.name, self.values[rows], None, self.scale_tag)
        return VariableView(self.name, self.values, self.weights[rows], self.scale_tag)

    def support(self) -> np.ndarray:
        """Values entering the bandwidth choice."""
        if self.weights is None:
            return self.values
        used = np.asarray(self.weights.sum(axis=0)).ravel() > 0
        return self.values[used]


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str
    n: int
    fallback: bool = False
    extra: dict = field(default_factory=dict)

    def rejects(self, alpha: float) -> bool:
        return self.p_value < alpha


def featurize(var: VariableView, D: int, seed, bandwidth: float | None = None, center: bool = True) -> np.ndarray:
    """``n x 2D`` random Fourier feature matrix for a variable, columns centred."""
    try:
        lam = bandwidth if bandwidth is not None else median_heuristic(var.support(), seed=derive_seed(seed, "bw"))
    except DegenerateVariableError as exc:
        raise DegenerateVariableError(f"variable {var.name!r}: {exc}") from None
    vals = var.values
    dim = 1 if vals.ndim == 1 else vals.shape[1]
    rff = sample_rff(lam, D, dim, seed)
    if var.weights is None:
        f = np.atleast_2d(rff_features(vals, rff))
    else:
        f = aggregate_matrix(var.weights, vals, rff)
    if center:
        f = f - f.mean(axis=0)
    return f


def _hs_statistic(fx: np.ndarray, fy: np.ndarray) -> float:
    n = fx.shape[0]
    c = fx.T @ fy / n
    return float(n * np.sum(c * c))


def gamma_pvalue(rx: np.ndarray, ry: np.ndarray, statistic: float | None = None):
    """Moment-matched Gamma tail probability for ``n * ||Cov(rx, ry)||_F^2``.

    Under independence the statistic is close to a weighted sum of chi-square
    variables whose weights are the eigenvalues of the covariance of the
    per-row outer products ``rx_i (x) ry_i``. Those share their non-zero
    spectrum with ``(Kx o Ky) / n``, so the first two moments come from traces.

    Returns ``(p_value, ok)``; ``ok`` is False when the moments are unusable.
    """
    n = rx.shape[0]
    if statistic is None:
        statistic = _hs_statistic(rx, ry)
    px, py = rx.shape[1], ry.shape[1]
    # both matrices share their non-zero spectrum; build the cheaper one
    if n * (px * py) ** 2 <= n * n * (px + py):
        prod = (rx[:, :, None] * ry[:, None, :]).reshape(n, px * py)
        mat = prod.T @ prod / n
    else:
        mat = (rx @ rx.T) * (ry @ ry.T) / n
    # sum of eigenvalues and of their squares, without an eigendecomposition
    mean = float(np.trace(mat))
    var = 2.0 * float(np.sum(mat * mat))
    if not (mean > 0 and var > 0 and np.isfinite(mean) and np.isfinite(var)):
        return float("nan"), False
    shape = mean**2 / var
    scale = var / mean
    p = float(stats.gamma.sf(statistic, a=shape, scale=scale))
    return min(max(p, 0.0), 1.0), True


def permutation_pvalue(statistic_fn: Callable[[np.ndarray | None], float], n: int, n_perm: int = 500,
                       seed=None, observed: float | None = None) -> float:
    """Permutation p-value ``(1 + #{perm >= observed}) / (1 + n_perm)``.

    ``statistic_fn(perm)`` must return the statistic after permuting the rows
    of one side by ``perm`` (``None`` means unpermuted).
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    if observed is None:
        observed = statistic_fn(None)
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_perm):
        if statistic_fn(rng.permutation(n)) >= observed:
            exceed += 1
    return (1 + exceed) / (1 + n_perm)


def _pvalue(rx, ry, stat, pmethod, n_perm, seed):
    if pmethod == "gamma":
        p, ok = gamma_pvalue(rx, ry, stat)
        if ok:
            return p, "gamma", False
        warnings.warn("gamma moments non-positive; falling back to permutation", RuntimeWarning)
    elif pmethod not in ("perm", "permutation"):
        raise ValueError(f"unknown p-value method {pmethod!r}")
    p = permutation_pvalue(lambda perm: _hs_statistic(rx, ry if perm is None else ry[perm]),
                           rx.shape[0], n_perm, seed, stat)
    return p, "permutation", pmethod == "gamma"


def rit(x: VariableView, y: VariableView, D: int = 100, pmethod: str = "gamma", seed=0,
        n_perm: int = 500) -> TestResult:
    """Randomised independence test of ``x`` and ``y``."""
    if x.n != y.n:
        raise ValueError("variables must have the same number of observations")
    if x.n < 20:
        raise ValueError("rit needs at least 20 observations")
    fx = featurize(x, D, derive_seed(seed, x.name, "rit"))
    fy = featurize(y, D, derive_seed(seed, y.name, "rit"))
    return _rit_from_features(fx, fy, pmethod, seed, n_perm)


def _rit_from_features(fx, fy, pmethod, seed, n_perm):
    stat = _hs_statistic(fx, fy)
    p, method, fb = _pvalue(fx, fy, stat, pmethod, n_perm, derive_seed(seed, "perm"))
    return TestResult(stat, p, method, fx.shape[0], fb)


def _standardize(f: np.ndarray) -> np.ndarray:
    f = f - f.mean(axis=0)
    sd = f.std(axis=0)
    keep = sd > 1e-12 * max(1.0, sd.max(initial=0.0))
    return f[:, keep] / sd[keep]


class RidgeProjector:
    """Ridge-regression residual maker for a fixed conditioning feature matrix.

    Columns of ``fz`` are standardised and the penalty is ``ridge * n`` on the
    Gram ``fz' fz``, i.e. ``ridge`` on the normalised Gram ``fz' fz / n``.
    """

    def __init__(self, fz: np.ndarray, ridge: float = 1e-3):
        n = fz.shape[0]
        self.fz = _standardize(fz)
        k = self.fz.shape[1]
        if ridge <= 0:
            raise CITestError("ridge must be positive")
        # unit-variance columns bound the largest eigenvalue by n * k
        cond = 1.0 + k / ridge
        if cond > 1e12:
            raise CITestError(f"conditioning system ill-conditioned (cond<={cond:.3g}, n={n}, p={k})")
        gram = self.fz.T @ self.fz + ridge * n * np.eye(k)
        try:
            self.chol = linalg.cho_factor(gram, lower=True)
        except linalg.LinAlgError:
            raise CITestError(f"conditioning system singular (n={n}, p={k})") from None

    def residual(self, t: np.ndarray) -> np.ndarray:
        return t - self.fz @ linalg.cho_solve(self.chol, self.fz.T @ t)


def residualize(targets: Sequence[np.ndarray], fz: np.ndarray, ridge: float = 1e-3):
    """Ridge-regression residuals of each target on standardised ``fz``."""
    proj = RidgeProjector(fz, ridge)
    return [proj.residual(t) for t in targets]


def conditioning_dims(D_z: int, n_cond: int) -> int:
    """Frequencies per conditioning variable so that the set shares a budget of ``D_z``."""
    return max(1, -(-D_z // max(n_cond, 1)))


def rcit(x: VariableView, y: VariableView, z: Sequence[VariableView], D_z: int = 100, D_xy: int = 5,
         ridge: float = 1e-3, pmethod: str = "gamma", seed=0, n_perm: int = 500, D_rit: int = 100) -> TestResult:
    """Randomised conditional independence test of ``x`` and ``y`` given ``z``.

    With an empty ``z`` this is :func:`rit` with ``D_rit`` features.
    """
    z = list(z)
    if not z:
        return rit(x, y, D_rit, pmethod, seed, n_perm)
    n = x.n
    if any(v.n != n for v in [y, *z]):
        raise ValueError("variables must have the same number of observations")
    if n < 50:
        raise ValueError("rcit needs at least 50 observations")
    fx = featurize(x, D_xy, derive_seed(seed, x.name, "xy"))
    fy = featurize(y, D_xy, derive_seed(seed, y.name, "xy"))
    fzs_small = [featurize(v, D_xy, derive_seed(seed, v.name, "xy")) for v in z]
    dz = conditioning_dims(D_z, len(z))
    fz = np.hstack([featurize(v, dz, derive_seed(seed, v.name, "z", dz)) for v in z])
    return _rcit_from_features(np.hstack([fx, *fzs_small]), fy, fz, ridge, pmethod, seed, n_perm)


def _rcit_from_features(fxdot, fy, fz, ridge, pmethod, seed, n_perm):
    rx, ry = residualize([fxdot, fy], fz, ridge)
    stat = _hs_statistic(rx, ry)
    p, method, fb = _pvalue(rx, ry, stat, pmethod, n_perm, derive_seed(seed, "perm"))
    return TestResult(stat, p, method, fxdot.shape[0], fb)


class FeatureBank:
    """Uncentred feature matrices over all rows of a set of variables.

    Shared by the bootstrap runs of one ranking so that each variable keeps
    the same random map and only the row subset changes between runs.
    """

    def __init__(self, variables: dict[str, VariableView], seed: int = 0):
        self.variables = variables
        self.seed = seed
        self._cache: dict = {}

    def features(self, name, D, role) -> np.ndarray:
        key = (name, D, role)
        if key not in self._cache:
            self._cache[key] = featurize(self.variables[name], D, derive_seed(self.seed, name, role, D), center=False)
        return self._cache[key]


class KernelCITest:
    """CI oracle over a set of named variables backed by :func:`rit` / :func:`rcit`.

    Feature matrices are cached per (variable, dimension, role), so repeated
    tests inside one PC run reuse the same random maps. Each variable's map is
    seeded from ``(seed, name)``, which keeps results independent of test order.
    With a ``bank``, features come from the bank's full-row matrices restricted
    to ``rows`` and are centred on that subset.
    """

    def __init__(self, variables: dict[str, VariableView], D_z: int = 100, D_xy: int = 5, D_rit: int = 100,
                 ridge: float = 1e-3, pmethod: str = "gamma", n_perm: int = 500, seed: int = 0,
                 max_cached_sets: int = 64, max_cached_residuals: int = 4096, bank: FeatureBank | None = None,
                 rows=None):
        self.variables = variables
        self.bank = bank
        self.rows = None if rows is None else np.asarray(rows)
        self.max_cached_sets = max_cached_sets
        self.max_cached_residuals = max_cached_residuals
        self.D_z, self.D_xy, self.D_rit = D_z, D_xy, D_rit
        self.ridge = ridge
        self.pmethod = pmethod
        self.n_perm = n_perm
        self.seed = seed
        self._cache: dict = {}
        self._projectors: OrderedDict = OrderedDict()
        self._resid: OrderedDict = OrderedDict()
        self.n_tests = 0

    def _features(self, name, D, role):
        key = (name, D, role)
        if key not in self._cache:
            if self.bank is None:
                f = featurize(self.variables[name], D, derive_seed(self.seed, name, role, D))
            else:
                f = self.bank.features(name, D, role)
                if self.rows is not None:
                    f = f[self.rows]
                f = f - f.mean(axis=0)
            self._cache[key] = f
        return self._cache[key]

    def _projector(self, cond: tuple) -> RidgeProjector:
        proj = self._projectors.get(cond)
        if proj is None:
            dz = conditioning_dims(self.D_z, len(cond))
            proj = RidgeProjector(np.hstack([self._features(v, dz, "z") for v in cond]), self.ridge)
            self._projectors[cond] = proj
            if len(self._projectors) > self.max_cached_sets:
                self._projectors.popitem(last=False)
        else:
            self._projectors.move_to_end(cond)
        return proj

    def _residual(self, name, cond: tuple):
        key = (name, cond)
        r = self._resid.get(key)
        if r is None:
            r = self._projector(cond).residual(self._features(name, self.D_xy, "xy"))
            self._resid[key] = r
            if len(self._resid) > self.max_cached_residuals:
                self._resid.popitem(last=False)
        return r

    def test(self, x: str, y: str, cond: Sequence[str] = ()) -> TestResult:
        # symmetric: order the pair so (x, y) and (y, x) give identical results
        x, y = sorted((x, y))
        cond = tuple(sorted(cond))
        self.n_tests += 1
        tseed = derive_seed(self.seed, x, y, *cond)
        if not cond:
            return _rit_from_features(self._features(x, self.D_rit, "rit"), self._features(y, self.D_rit, "rit"),
                                      self.pmethod, tseed, self.n_perm)
        rx = np.hstack([self._residual(v, cond) for v in (x, *cond)])
        ry = self._residual(y, cond)
        stat = _hs_statistic(rx, ry)
        p, method, fb = _pvalue(rx, ry, stat, self.pmethod, self.n_perm, derive_seed(tseed, "perm"))
        return TestResult(stat, p, method, rx.shape[0], fb)

    def __call__(self, x: str, y: str, cond: Sequence[str] = ()) -> float:
        return self.test(x, y, cond).p_value
