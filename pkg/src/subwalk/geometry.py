"""Approximate subunit distance, subunit balls and ball-box inclusion constants."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .operator import OperatorSpec, coefficients
from .reduction import NumericDiffeo, UniversalBlock

__all__ = [
    "EPS_SCHEDULE", "MetricGrid", "DistanceField", "BallBoxReport", "stencil_offsets", "local_cost",
    "distance_map", "extrapolated_distance", "ball", "ball_halfwidths", "ballbox_check", "box_grid",
]

EPS_SCHEDULE = (1e-2, 1e-3, 1e-4)


def stencil_offsets(n: int, radius: int = 2) -> np.ndarray:
    """All nonzero integer offsets with ``|o|_inf <= radius``; ``(2r+1)^n - 1`` rows."""
    offs = [o for o in itertools.product(range(-radius, radius + 1), repeat=n) if any(o)]
    return np.array(offs, dtype=int)


@dataclass
class MetricGrid:
    """Node grid on the box ``[lo, hi]`` with ``shape`` nodes per axis."""

    lo: np.ndarray
    hi: np.ndarray
    shape: tuple[int, ...]
    eps_reg: float = 1e-3
    stencil: np.ndarray = field(default=None)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.shape = tuple(int(s) for s in self.shape)
        if min(self.shape) < 16:
            raise ValueError("use at least 16 nodes per axis")
        if not self.eps_reg > 0:
            raise ValueError("eps_reg must be positive")
        if self.stencil is None:
            self.stencil = stencil_offsets(len(self.shape))
        n = len(self.shape)
        for j in range(n):
            e = np.zeros(n, dtype=int)
            e[j] = 1
            if not any((self.stencil == e).all(1)) or not any((self.stencil == -e).all(1)):
                raise ValueError("stencil must contain the unit offsets")

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> np.ndarray:
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, s) for a, b, s in zip(self.lo, self.hi, self.shape)]

    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def with_eps(self, eps: float) -> "MetricGrid":
        return MetricGrid(self.lo, self.hi, self.shape, eps, self.stencil)


def box_grid(x0, halfwidths, per_axis: int = 256, eps_reg: float = 1e-3) -> MetricGrid:
    """Grid centred on ``x0`` with ``per_axis`` cells (so ``x0`` is a node)."""
    x0 = np.asarray(x0, dtype=float)
    hw = np.asarray(halfwidths, dtype=float)
    return MetricGrid(x0 - hw, x0 + hw, (per_axis + 1,) * len(x0), eps_reg)


def local_cost(spec: OperatorSpec, x, v, eps_reg: float) -> np.ndarray:
    """``sqrt(v^T (A2(x) + eps I)^{-1} v)``: the least ``r`` making the segment ``v`` subunit for ``r^2 A``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    a = coefficients(spec, x) + eps_reg * np.eye(spec.dim)
    v = np.broadcast_to(v, a.shape[:-1])
    sol = np.linalg.solve(a, v[..., None])[..., 0]
    return np.sqrt(np.maximum(np.einsum("...i,...i->...", v, sol), 0.0))


@dataclass
class DistanceField:
    x0: np.ndarray
    grid: MetricGrid
    values: np.ndarray  # shape grid.shape
    eps_reg: float

    def at(self, index) -> float:
        return float(self.values[tuple(index)])


def _graph(spec: OperatorSpec, grid: MetricGrid):
    shape = np.array(grid.shape)
    n = grid.dim
    idx = np.arange(int(np.prod(shape))).reshape(grid.shape)
    pts = grid.points()
    h = grid.spacing
    rows, cols, vals = [], [], []
    # one of each +-o pair: the graph is undirected with the same midpoint cost
    half = [o for o in grid.stencil if tuple(o) > tuple(-o)]
    for o in half:
        src = tuple(slice(max(0, -k), s - max(0, k)) for k, s in zip(o, shape))
        dst = tuple(slice(max(0, k), s - max(0, -k)) for k, s in zip(o, shape))
        a, b = idx[src].ravel(), idx[dst].ravel()
        mid = 0.5 * (pts[src] + pts[dst]).reshape(-1, n)
        cost = local_cost(spec, mid, o * h, grid.eps_reg)
        rows.append(a)
        cols.append(b)
        vals.append(cost)
    N = idx.size
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))


def _source_index(grid: MetricGrid, x0) -> tuple[int, ...]:
    x0 = np.asarray(x0, dtype=float)
    if np.any(x0 < grid.lo) or np.any(x0 > grid.hi):
        raise ValueError("base point outside the grid region")
    k = np.rint((x0 - grid.lo) / grid.spacing).astype(int)
    return tuple(int(v) for v in k)


def distance_map(spec: OperatorSpec, x0, grid: MetricGrid) -> DistanceField:
    """Shortest-path distances from the node nearest ``x0`` over the stencil graph."""
    G = _graph(spec, grid)
    src = int(np.ravel_multi_index(_source_index(grid, x0), grid.shape))
    d = dijkstra(G, directed=False, indices=src)
    return DistanceField(np.asarray(x0, dtype=float), grid, d.reshape(grid.shape), grid.eps_reg)


def extrapolated_distance(spec: OperatorSpec, x0, grid: MetricGrid, schedule=EPS_SCHEDULE) -> DistanceField:
    """Distances extrapolated to ``eps_reg -> 0`` from a decreasing schedule.

    Uses Aitken's delta-squared on the last three maps where the increments
    shrink at least by half; elsewhere the finest map is kept.  The result never
    falls below the finest map, since distances grow as ``eps_reg`` decreases.
    """
    maps = [distance_map(spec, x0, grid.with_eps(e)).values for e in schedule]
    fine = maps[-1]
    if len(maps) < 3:
        return DistanceField(np.asarray(x0, float), grid, fine, 0.0)
    d1, d2, d3 = maps[-3:]
    a, b = d2 - d1, d3 - d2
    with np.errstate(divide="ignore", invalid="ignore"):
        r = b / a
        ext = d3 + b * r / (1.0 - r)
    ok = np.isfinite(ext) & (a > 0) & (b >= 0) & (r <= 0.5)
    out = np.where(ok, np.maximum(ext, fine), fine)
    return DistanceField(np.asarray(x0, float), grid, out, 0.0)


def ball(field: DistanceField, rho: float) -> np.ndarray:
    """Boolean mask of grid nodes with distance below ``rho``."""
    return field.values < rho


def ball_halfwidths(field: DistanceField, rho: float) -> np.ndarray:
    """Largest ``|x_j - x0_j|`` over the ball, per axis."""
    mask = ball(field, rho)
    pts = field.grid.points()[mask]
    return np.max(np.abs(pts - field.x0), axis=0)


@dataclass
class BallBoxReport:
    rho: float
    c_in: float  # largest c with B(c rho) inside Phi(Q_rho)
    C_out: float  # smallest C with Phi(Q_rho) inside B(C rho)
    ball_halfwidths: np.ndarray  # extents of B(rho) along each axis
    block_sides: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.c_in) and np.isfinite(self.C_out) and self.c_in > 0)


def ballbox_check(spec: OperatorSpec, x0, rho: float, block: UniversalBlock, phi: NumericDiffeo,
                  per_axis: int = 256, margin: float = 2.5, schedule=EPS_SCHEDULE,
                  eps_scale: float | None = None) -> BallBoxReport:
    """Sample the inclusions ``B(c rho) in Phi(Q_rho) in B(C rho)``.

    The distance grid is a box of ``margin`` times the block sides around
    ``x0``, in the coordinates of ``spec``; ``phi`` maps chart coordinates to them.
    The regularization schedule is multiplied by ``eps_scale``, by default
    ``min_j (side_j / rho)^2``, the smallest coefficient scale inside the block.
    """
    x0 = np.asarray(x0, dtype=float)
    sides = block.sides
    if eps_scale is None:
        eps_scale = float(np.min(sides / rho) ** 2)
    span = np.abs(phi.jacobian(np.zeros(len(sides)))) @ sides
    grid = box_grid(x0, margin * span, per_axis)
    field = extrapolated_distance(spec, x0, grid, [e * eps_scale for e in schedule])
    pts = grid.points().reshape(-1, len(x0))
    inside = block.contains(phi.inverse(pts))
    d = field.values.ravel()
    c_out = float(d[inside].max() / rho) if inside.any() else float("inf")
    c_in = float(d[~inside].min() / rho) if (~inside).any() else float("inf")
    return BallBoxReport(float(rho), c_in, c_out, ball_halfwidths(field, rho), np.asarray(sides))
