"""Rasters, least-cost travel time, treatment seeking and catchment weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

__all__ = [
    "Raster",
    "TreatmentSeekingParams",
    "CatchmentWeights",
    "read_ascii_grid",
    "write_ascii_grid",
    "travel_time",
    "travel_times",
    "treatment_seeking_proportion",
    "catchment_weights",
]

DEFAULT_CUTOFF = 200.0


@dataclass
class Raster:
    """A gridded field with an activity mask.

    ``values`` has shape ``(n_rows, n_cols)``. Cells with ``mask == False``
    are inactive and their values are ignored.
    """

    values: np.ndarray
    cell_size: float = 1.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.values.shape:
                raise ValueError("mask shape does not match values")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def flat_index(self, cell) -> int:
        r, c = cell
        return int(r) * self.n_cols + int(c)

    def cell_of(self, index: int) -> tuple[int, int]:
        return divmod(int(index), self.n_cols)

    def coordinates(self) -> np.ndarray:
        """Cell-centre coordinates ``(row, col) * cell_size`` of every cell, row-major."""
        rr, cc = np.indices(self.shape)
        return np.column_stack([rr.ravel(), cc.ravel()]).astype(float) * self.cell_size

    def active_values(self) -> np.ndarray:
        return self.values[self.mask]


def read_ascii_grid(path) -> Raster:
    """Read an ESRI-ASCII-style grid. ``nodata`` cells become masked."""
    header = {}
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if not rows and len(parts) == 2 and key[0].isalpha():
                header[key] = parts[1]
                continue
            rows.append([float(v) for v in parts])
    try:
        n_rows = int(header["nrows"])
        n_cols = int(header["ncols"])
    except KeyError as exc:
        raise ValueError(f"{path}: missing header field {exc}") from None
    cell_size = float(header.get("cellsize", 1.0))
    nodata = header.get("nodata", header.get("nodata_value"))
    values = np.array(rows, dtype=float)
    if values.shape != (n_rows, n_cols):
        raise ValueError(f"{path}: expected {n_rows}x{n_cols} values, got {values.shape}")
    mask = np.isfinite(values)
    if nodata is not None:
        mask &= values != float(nodata)
    return Raster(values, cell_size=cell_size, mask=mask)


def write_ascii_grid(path, raster: Raster, nodata: float = -9999.0, fmt: str = "%.10g") -> None:
    out = np.where(raster.mask, raster.values, nodata)
    lines = [
        f"ncols {raster.n_cols}",
        f"nrows {raster.n_rows}",
        "xllcorner 0",
        "yllcorner 0",
        f"cellsize {raster.cell_size:.10g}",
        f"NODATA_value {nodata:.10g}",
    ]
    lines.extend(" ".join(fmt % v for v in row) for row in out)
    Path(path).write_text("\n".join(lines) + "\n")


def _grid_graph(friction: Raster) -> sparse.csr_matrix:
    # 8-neighbour graph; edge cost = mean friction of the two cells * centre distance
    f = np.where(friction.mask, friction.values, np.inf)
    n_rows, n_cols = f.shape
    idx = np.arange(f.size).reshape(f.shape)
    src, dst, cost = [], [], []
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        r0, r1 = max(0, -dr), n_rows - max(0, dr)
        c0, c1 = max(0, -dc), n_cols - max(0, dc)
        a = idx[r0:r1, c0:c1].ravel()
        b = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        dist = friction.cell_size * np.hypot(dr, dc)
        w = 0.5 * (f.ravel()[a] + f.ravel()[b]) * dist
        ok = np.isfinite(w)
        src.append(a[ok])
        dst.append(b[ok])
        cost.append(w[ok])
    src, dst, cost = map(np.concatenate, (src, dst, cost))
    if np.any(cost <= 0):
        raise ValueError("friction must be strictly positive on active cells")
    g = sparse.coo_matrix((cost, (src, dst)), shape=(f.size, f.size))
    return g.tocsr()


def travel_times(friction: Raster, facility_cells) -> np.ndarray:
    """Least-cost travel time from every facility to every cell.

    Returns an array of shape ``(n_facilities, n_rows * n_cols)``; unreachable
    and masked cells are ``inf``.
    """
    sources = [friction.flat_index(c) for c in facility_cells]
    for cell, s in zip(facility_cells, sources):
        r, c = cell
        if not (0 <= r < friction.n_rows and 0 <= c < friction.n_cols):
            raise ValueError(f"facility cell {tuple(cell)} outside the grid")
        if not friction.mask.ravel()[s] or not np.isfinite(friction.values.ravel()[s]):
            raise ValueError(f"facility cell {tuple(cell)} is masked")
    if not sources:
        return np.zeros((0, friction.values.size))
    graph = _grid_graph(friction)
    dist = dijkstra(graph, directed=False, indices=sources)
    dist[:, ~friction.mask.ravel()] = np.inf
    return np.atleast_2d(dist)


def travel_time(friction: Raster, facility_cell) -> Raster:
    """Travel-time raster (minutes) from a single facility cell."""
    t = travel_times(friction, [facility_cell])[0].reshape(friction.shape)
    return Raster(t, cell_size=friction.cell_size, mask=friction.mask.copy())


@dataclass(frozen=True)
class TreatmentSeekingParams:
    alpha: float = 0.6
    sigma: float = 0.00916
    beta: float = 0.15

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta > 1:
            raise ValueError("need alpha >= 0, beta >= 0 and alpha + beta <= 1")


def treatment_seeking_proportion(t, params: TreatmentSeekingParams = TreatmentSeekingParams()):
    """Proportion seeking formal treatment at travel time ``t`` minutes."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("travel time must be non-negative")
    # exp overflow at large t is fine: the logistic term goes to 0
    with np.errstate(over="ignore"):
        out = params.alpha / (1.0 + np.exp(params.sigma * t)) + params.beta
    return out if out.ndim else float(out)


@dataclass
class CatchmentWeights:
    """Per-(pixel, facility) attendance probabilities.

    ``base`` holds the unnormalised inverse-square travel-time weights with the
    cutoff applied (or the zero-time indicator for ``fixed`` rows).
    ``p`` is the normalised matrix for the current ``attractiveness``.
    """

    travel_time: np.ndarray
    attractiveness: np.ndarray
    p: np.ndarray
    base: np.ndarray
    fixed: np.ndarray
    covered: np.ndarray
    cutoff: float = DEFAULT_CUTOFF
    extra: dict = field(default_factory=dict)

    @property
    def n_pixels(self) -> int:
        return self.p.shape[0]

    @property
    def n_facilities(self) -> int:
        return self.p.shape[1]

    def with_attractiveness(self, w) -> "CatchmentWeights":
        w = np.asarray(w, dtype=float)
        return CatchmentWeights(
            self.travel_time, w, normalise_catchment(self.base, self.fixed, w),
            self.base, self.fixed, self.covered, self.cutoff,
        )


def normalise_catchment(base: np.ndarray, fixed: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-normalise ``base * w`` (rows in ``fixed`` ignore ``w``)."""
    raw = np.where(fixed[:, None], base, base * w[None, :])
    tot = raw.sum(axis=1, keepdims=True)
    return np.divide(raw, tot, out=np.zeros_like(raw), where=tot > 0)


def catchment_weights(travel_time, attractiveness=None, cutoff: float = DEFAULT_CUTOFF) -> CatchmentWeights:
    """Build catchment probabilities from a ``(n_pixels, n_facilities)`` travel-time matrix.

    A facility farther than ``cutoff`` minutes receives nothing from a pixel.
    A pixel at zero travel time from one or more facilities sends everyone to
    those facilities, split equally.
    """
    t = np.asarray(travel_time, dtype=float)
    if t.ndim != 2:
        raise ValueError("travel_time must be (n_pixels, n_facilities)")
    n_fac = t.shape[1]
    w = np.ones(n_fac) if attractiveness is None else np.asarray(attractiveness, dtype=float)
    if w.shape != (n_fac,):
        raise ValueError("one attractiveness value per facility required")
    if np.any(w <= 0):
        raise ValueError("attractiveness must be positive")
    if np.any(t < 0):
        raise ValueError("travel times must be non-negative")
    within = t <= cutoff
    zero = t == 0
    fixed = zero.any(axis=1)
    with np.errstate(divide="ignore"):
        inv_sq = np.where(within & ~zero, 1.0 / np.square(t), 0.0)
    base = np.where(fixed[:, None], zero.astype(float), inv_sq)
    covered = base.sum(axis=1) > 0
    p = normalise_catchment(base, fixed, w)
    return CatchmentWeights(t, w, p, base, fixed, covered, float(cutoff))
