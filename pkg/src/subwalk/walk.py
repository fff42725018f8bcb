"""Random walk along the normalized chart fields ``X_ij = (c_j rho^kappa_j / gamma_i) d/dw_j``."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .manifold import Atlas, Density, Torus, wrap
from .reduction import FlowEscape

__all__ = [
    "ChartFlow", "WalkStats", "chart_flows", "flow", "step", "simulate", "h0",
    "check_divfree", "divergence_residual", "uniform_draws", "cell_masses",
]


class ChartFlow:
    """Flows of the fields ``X_ij`` in the coordinates of chart ``i``.

    When the chart density is constant on the dilated block the flow is an
    exact translation; otherwise RK4 with ``steps`` substeps is used.
    """

    def __init__(self, atlas: Atlas, density: Density, i: int, probe: int = 9):
        self.atlas = atlas
        self.density = density
        self.i = i
        self.chart = atlas.charts[i]
        self.v = self.chart.sides.copy()
        self.outer = atlas.cstar * self.v
        n = atlas.dim
        axes = [np.linspace(-s, s, probe) for s in self.outer]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        g = self.gamma(pts, exact=True)
        self.gamma_min = float(g.min())
        self.gamma_const = float(g.mean()) if np.ptp(g) <= 1e-12 * g.mean() else None

    TABLE = {1: 257, 2: 65, 3: 17}

    @cached_property
    def _table(self) -> RegularGridInterpolator:
        # the density is smooth, and evaluating it exactly inverts every chart map
        n = len(self.v)
        axes = [np.linspace(-s, s, self.TABLE[n]) for s in self.outer]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        vals = self.density.chart_density(self.i, pts).reshape([len(a) for a in axes])
        return RegularGridInterpolator(axes, vals, method="cubic", bounds_error=False, fill_value=None)

    def gamma(self, w, exact: bool = False) -> np.ndarray:
        """Chart density; tabulated and interpolated unless ``exact`` or constant."""
        w = np.asarray(w, dtype=float)
        if not exact and self.gamma_const is not None:
            return np.full(w.shape[:-1], self.gamma_const)
        flat = w.reshape(-1, w.shape[-1])
        g = self.density.chart_density(self.i, flat) if exact else self._table(flat)
        return g.reshape(w.shape[:-1])

    def speed(self, w, j: int) -> np.ndarray:
        return self.v[j] / self.gamma(w)

    def flow(self, w, j: int, t, steps: int = 8) -> np.ndarray:
        """``exp(t X_ij) w``; raises :class:`FlowEscape` outside the dilated block."""
        w = np.array(w, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.gamma_const is not None:
            w[..., j] = w[..., j] + t * self.v[j] / self.gamma_const
        else:
            dt = t / steps
            for _ in range(steps):
                k1 = self.speed(w, j)
                w2 = w.copy()
                w2[..., j] += 0.5 * dt * k1
                k2 = self.speed(w2, j)
                w2[..., j] = w[..., j] + 0.5 * dt * k2
                k3 = self.speed(w2, j)
                w2[..., j] = w[..., j] + dt * k3
                k4 = self.speed(w2, j)
                w[..., j] += dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
                if np.any(np.abs(w[..., j]) > self.outer[j]):
                    raise FlowEscape("walk flow left the dilated block")
        if np.any(np.abs(w[..., j]) > self.outer[j]):
            raise FlowEscape("walk flow left the dilated block")
        return w

    def travel_time(self, w, j: int, target) -> np.ndarray:
        """Time for ``X_ij`` to carry coordinate ``j`` of ``w`` to ``target``."""
        w = np.asarray(w, dtype=float)
        target = np.asarray(target, dtype=float)
        a = w[..., j]
        if self.gamma_const is not None:
            return (target - a) * self.gamma_const / self.v[j]
        s, wt = np.polynomial.legendre.leggauss(16)
        total = np.zeros(np.broadcast(a, target).shape)
        for sq, wq in zip(s, wt):
            p = w.copy()
            p[..., j] = 0.5 * (a + target) + 0.5 * (target - a) * sq
            total += 0.5 * wq * self.gamma(p)
        return total * (target - a) / self.v[j]


def chart_flows(atlas: Atlas, density: Density) -> list[ChartFlow]:
    return [ChartFlow(atlas, density, i) for i in range(len(atlas))]


def h0(flows: list[ChartFlow]) -> float:
    """Largest ``h`` keeping flows from the inner cubes inside the dilated ones."""
    cstar = flows[0].atlas.cstar
    return float((cstar - 1.0) * min(f.gamma_min for f in flows))


def flow(flows: list[ChartFlow], i: int, j: int, x, t, steps: int = 8) -> np.ndarray:
    """Move torus points ``x`` by ``exp(t X_ij)``; returns torus points."""
    ch = flows[i].chart
    w = flows[i].flow(ch.psi(x), j, t, steps)
    return ch.to_torus(w)


# ---------------------------------------------------------------- random numbers

def uniform_draws(seed: int, trajectory: int, steps: int, start: int = 0) -> np.ndarray:
    """Uniforms for steps ``start .. start+steps-1`` of one trajectory, shape ``(steps, 4)``.

    Each step consumes one Philox counter block (four doubles) of the stream
    keyed by ``(seed, trajectory)``, so a step's draws do not depend on how
    the run is chunked.
    """
    bg = np.random.Philox(key=np.array([seed, trajectory], dtype=np.uint64))
    if start:
        bg.advance(start)
    return np.random.Generator(bg).random((steps, 4))


# ---------------------------------------------------------------- walk

@dataclass
class WalkStats:
    histogram: np.ndarray  # pooled visit frequencies after burn-in, shape (bins,)*n
    per_trajectory: np.ndarray  # visit frequencies per trajectory, shape (T, bins**n)
    accepted: int
    rejected: int
    escaped: int
    final: np.ndarray
    samples: int  # recorded visits, equal to the histogram mass
    per_chart: np.ndarray  # (N, 3) accepted, rejected, escaped per chosen chart
    paths: np.ndarray | None = None  # (T, K, n) positions every `thin` steps when requested


def step(flows: list[ChartFlow], x: np.ndarray, u: np.ndarray, h: float):
    """One step for each row of ``x`` given uniforms ``u`` (rows of 4).

    Chart ``i``, direction ``j`` and time ``t`` in ``(-h, h)`` come from the
    first three uniforms.  The point moves only if it lies in the inner cube
    of chart ``i`` and so does its image.  Returns ``(x_new, status)`` with
    status 1 accepted, 0 rejected, -1 flow escape.
    """
    x = np.atleast_2d(x)
    N = len(flows)
    n = x.shape[1]
    ii = np.minimum((u[:, 0] * N).astype(int), N - 1)
    jj = np.minimum((u[:, 1] * n).astype(int), n - 1)
    tt = h * (2.0 * u[:, 2] - 1.0)
    out = x.copy()
    status = np.zeros(len(x), dtype=int)
    for i in np.unique(ii):
        sel = np.flatnonzero(ii == i)
        fl = flows[i]
        w = fl.chart.psi(x[sel])
        inside = fl.chart.in_inner(w)
        for j in np.unique(jj[sel]):
            k = np.flatnonzero(inside & (jj[sel] == j))
            if not len(k):
                continue
            try:
                w2 = fl.flow(w[k], int(j), tt[sel[k]])
            except FlowEscape:
                # retry one by one so only the offending points are flagged
                w2 = np.empty_like(w[k])
                ok = np.ones(len(k), dtype=bool)
                for r, kk in enumerate(k):
                    try:
                        w2[r] = fl.flow(w[kk:kk + 1], int(j), tt[sel[kk]:sel[kk] + 1])[0]
                    except FlowEscape:
                        ok[r] = False
                status[sel[k[~ok]]] = -1
                k, w2 = k[ok], w2[ok]
            acc = fl.chart.in_inner(w2)
            rows = sel[k[acc]]
            out[rows] = fl.chart.to_torus(w2[acc])
            status[rows] = 1
    return out, status


def simulate(flows: list[ChartFlow], h: float, seed: int, trajectories: int, steps: int,
             bins: int = 16, x0=None, thin: int = 0) -> WalkStats:
    """Run independent trajectories; histogram visits after a burn-in of ``steps // 4``.

    Starting points are uniform draws from a separate stream unless ``x0`` is
    given.  With ``thin > 0`` every ``thin``-th position is kept in ``paths``.
    """
    n = flows[0].atlas.dim
    N = len(flows)
    rng_start = np.random.Generator(np.random.Philox(key=np.array([seed, 2 ** 32], dtype=np.uint64)))
    x = rng_start.random((trajectories, n)) if x0 is None else np.tile(np.asarray(x0, float), (trajectories, 1))
    x = wrap(x)
    draws = np.stack([uniform_draws(seed, t, steps) for t in range(trajectories)], axis=1)
    burn = steps // 4
    counts = np.zeros((trajectories, bins ** n))
    per_chart = np.zeros((N, 3), dtype=np.int64)
    strides = bins ** np.arange(n - 1, -1, -1)
    paths = [] if thin > 0 else None
    rows = np.arange(trajectories)
    for k in range(steps):
        x, status = step(flows, x, draws[k], h)
        chart = np.minimum((draws[k][:, 0] * N).astype(int), N - 1)
        for col, code in enumerate((1, 0, -1)):
            np.add.at(per_chart[:, col], chart[status == code], 1)
        if k >= burn:
            cell = np.minimum((x * bins).astype(int), bins - 1) @ strides
            np.add.at(counts, (rows, cell), 1.0)
        if thin > 0 and (k + 1) % thin == 0:
            paths.append(x.copy())
    recorded = steps - burn
    per = counts / max(recorded, 1)
    hist = per.mean(axis=0).reshape((bins,) * n)
    acc, rej, esc = (int(v) for v in per_chart.sum(axis=0))
    return WalkStats(hist, per, acc, rej, esc, x, int(counts.sum()), per_chart,
                     None if paths is None else np.stack(paths, axis=1))


def cell_masses(density: Density, bins: int, sub: int = 8) -> np.ndarray:
    """``mu`` mass of each histogram cell by midpoint quadrature, shape ``(bins,)*n``."""
    n = density.atlas.dim
    pts = Torus(n).grid(bins * sub, offset=0.5)
    vals = density(pts).reshape((bins, sub) * n)
    axes = tuple(range(1, 2 * n, 2))
    return vals.sum(axis=axes) / (bins * sub) ** n


# ---------------------------------------------------------------- divergence

def divergence_residual(gamma, field, samples, j: int, eps: float = 1e-3) -> float:
    """``max |d_j (gamma X^j)|`` by central differences at ``samples``."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    e = np.zeros(samples.shape[1])
    e[j] = eps
    plus = gamma(samples + e) * field(samples + e)
    minus = gamma(samples - e) * field(samples - e)
    return float(np.max(np.abs(plus - minus)) / (2 * eps))


def check_divfree(flows: list[ChartFlow], samples_per_axis: int = 7) -> float:
    """Largest divergence residual of the chart fields with respect to ``gamma_i dw``."""
    worst = 0.0
    n = flows[0].atlas.dim
    for fl in flows:
        axes = [np.linspace(-0.9 * s, 0.9 * s, samples_per_axis) for s in fl.v]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        for j in range(n):
            worst = max(worst, divergence_residual(fl.gamma, lambda w, _j=j: fl.v[_j] / fl.gamma(w), pts, j))
    return worst
