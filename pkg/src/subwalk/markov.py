"""Discretized averaging operator ``S_h`` on a periodic grid and its spectral diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401  (sp.linalg.norm)
import scipy.sparse.linalg as spla

from . import expr as ex
from .manifold import Atlas, Density, Torus, torus_delta, wrap
from .walk import ChartFlow

__all__ = [
    "DegenerateTop", "MarkovMatrix", "Spectrum", "transitions", "chart_rows", "step_length", "assemble", "spectrum", "spectral_gap",
    "kernel_lower_bound", "eigenfunction_linf", "weyl_count", "weyl_fit", "apply_exact",
    "generator_limit", "generator_residual", "dirichlet_form", "dirichlet_exact", "dirichlet_limit",
    "frequency_split", "tv_decay", "fit_rate", "loglog_fit",
]

DENSE_MAX = 4096


class DegenerateTop(RuntimeError):
    """The top eigenvalue is not simple."""


@dataclass
class MarkovMatrix:
    S: sp.csr_matrix
    weights: np.ndarray  # mu-mass of each grid cell, sums to one
    grid: int
    dim: int
    h: float
    asymmetry: float  # ||F - F^T|| / ||F|| for the off-diagonal fluxes F = W S before projection

    @property
    def size(self) -> int:
        return self.S.shape[0]

    @property
    def cellvol(self) -> float:
        return 1.0 / self.size

    def dense(self) -> np.ndarray:
        return self.S.toarray()

    def points(self) -> np.ndarray:
        return Torus(self.dim).grid(self.grid)


# ---------------------------------------------------------------- transitions

@dataclass
class _Block:
    rows: np.ndarray  # indices into the point set
    dest: np.ndarray  # (P, Q, n) torus points
    weight: np.ndarray  # (P, Q) including 1/(2h) and quadrature weights
    stay: np.ndarray  # (P,) rejection mass m_ij


def transitions(atlas: Atlas, flows: Sequence[ChartFlow], h: float, points: np.ndarray, nodes: int = 8,
                grid: int | None = None):
    """Yield one :class:`_Block` per chart and direction for the torus ``points``."""
    for fl in flows:
        w = fl.chart.psi(points)
        inside = np.flatnonzero(fl.chart.in_inner(w))
        if not len(inside):
            continue
        for j in range(atlas.dim):
            dest, wt, stay = chart_rows(fl, j, h, w[inside], points[inside], nodes, grid)
            yield _Block(inside, dest, wt, stay)


def chart_rows(fl: ChartFlow, j: int, h: float, w: np.ndarray, x: np.ndarray, nodes: int = 8,
               grid: int | None = None):
    """Destinations, weights and rejection mass of ``S_ij`` at chart points ``w`` (inside ``Q_i``).

    The accepted times form an interval (the flow is monotone along ``w_j``);
    Gauss-Legendre nodes are placed on that interval, so ``m_ij = 1 - |accepted| / 2h``
    exactly.  With ``grid`` set, panels keep the node spacing near half a cell and
    node times are scaled per row so that the interpolated kernel has the exact
    second moment along the move (see :func:`_moment_factor`).
    """
    ch = fl.chart
    side = ch.sides[j]
    panels = 1
    if grid is not None:
        span = 2.0 * h * fl.v[j] / fl.gamma_min * _axis_stretch(ch)[j]
        panels = max(1, math.ceil(2.0 * span * grid / nodes))
    s, wq = _composite_gauss(nodes, panels)
    t_hi = np.minimum(h, fl.travel_time(w, j, side))
    t_lo = np.maximum(-h, fl.travel_time(w, j, -side))
    mid = 0.5 * (t_hi + t_lo)
    half = 0.5 * (t_hi - t_lo)
    t = mid[:, None] + half[:, None] * s[None, :]
    wt = half[:, None] * wq[None, :] / (2.0 * h)
    wr = np.repeat(w[:, None, :], len(s), axis=1)

    def dest(lam):
        moved = fl.flow(wr, j, lam[:, None] * t)
        moved[..., j] = np.clip(moved[..., j], -side, side)
        return ch.to_torus(moved)

    lam = np.ones(len(w)) if grid is None else _moment_factor(dest, x, wt, grid)
    return dest(lam), wt, 1.0 - wt.sum(axis=1)


def _axis_stretch(ch) -> np.ndarray:
    """Length of ``D Phi e_j`` at the chart centre."""
    return np.linalg.norm(ch.phi.jacobian(np.zeros(len(ch.sides))), axis=0)


def step_length(flows: Sequence[ChartFlow]) -> float:
    """Standard deviation of the displacement of a unit-time step along the fastest chart field.

    Times are uniform on ``(-1, 1)``, so a field of speed ``v`` gives ``v / sqrt(3)``.
    """
    return float(max(np.max(fl.v / fl.gamma_min * _axis_stretch(fl.chart)) for fl in flows) / math.sqrt(3.0))


def _composite_gauss(order: int, panels: int):
    """Gauss-Legendre nodes and weights on ``[-1, 1]`` split into equal panels."""
    s, w = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(-1.0, 1.0, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 1.0 / panels
    return (mid[:, None] + half * s[None, :]).ravel(), np.tile(w * half, panels)


def _moment_factor(dest, x, wt, G: int, lam_min: float = 0.1, iters: int = 14) -> np.ndarray:
    """Per-row time scale removing the interpolation variance along the move.

    Multilinear interpolation at a point with fractional offsets ``f_k`` adds
    variance ``f_k (1 - f_k) / G^2`` along axis ``k``.  The factor ``lam``
    solves ``lam^2 M2 + E(lam) = M2`` by bisection, where ``M2`` is the exact
    second moment of the row's displacements along the move direction and
    ``E`` the excess; it is clipped below at ``lam_min``.
    """
    d1 = torus_delta(dest(np.ones(len(x))), x[:, None, :])
    m2 = np.einsum("pq,pqk,pqk->p", wt, d1, d1)
    u = d1[:, 0, :] - d1[:, -1, :]
    norm = np.linalg.norm(u, axis=-1)
    ok = (m2 > 0) & (norm > 0)
    u = np.where(ok[:, None], u / np.where(norm > 0, norm, 1.0)[:, None], 0.0)

    def excess(lam):
        y = wrap(dest(lam)) * G
        f = y - np.floor(y)
        return np.einsum("pq,pqk,pk->p", wt, f * (1 - f), u ** 2) / G ** 2

    lo = np.full(len(x), lam_min)
    hi = np.ones(len(x))
    need = ok & (excess(hi) > 1e-14 * np.maximum(m2, 1e-300))
    for _ in range(iters):
        lam = 0.5 * (lo + hi)
        r = lam ** 2 * m2 + excess(lam) - m2
        hi = np.where(r > 0, lam, hi)
        lo = np.where(r > 0, lo, lam)
    return np.where(need, 0.5 * (lo + hi), 1.0)


def _interp(dest: np.ndarray, G: int):
    """Multilinear interpolation indices and weights on the periodic grid ``k / G``."""
    n = dest.shape[-1]
    u = wrap(dest) * G
    base = np.floor(u).astype(np.int64)
    frac = u - base
    idx = []
    wts = []
    strides = G ** np.arange(n - 1, -1, -1)
    for corner in range(2 ** n):
        bits = [(corner >> (n - 1 - k)) & 1 for k in range(n)]
        ind = np.zeros(dest.shape[:-1], dtype=np.int64)
        wt = np.ones(dest.shape[:-1])
        for k, b in enumerate(bits):
            ind += ((base[..., k] + b) % G) * strides[k]
            wt *= frac[..., k] if b else 1.0 - frac[..., k]
        idx.append(ind)
        wts.append(wt)
    return np.stack(idx, -1), np.stack(wts, -1)


def assemble(atlas: Atlas, density: Density, flows: Sequence[ChartFlow], h: float, G: int,
             nodes: int = 8, moment_match: bool = True) -> MarkovMatrix:
    """``S = (1/nN) sum_ij S_ij`` on the grid ``G^n`` with weighted-symmetric projection.

    Off-diagonal fluxes ``w_a S_ab`` are replaced by their symmetric part and
    the diagonal is rebalanced, so rows sum to one and ``w`` is stationary.
    """
    if nodes < 8:
        raise ValueError("use at least 8 quadrature nodes")
    n = atlas.dim
    N = len(atlas)
    pts = Torus(n).grid(G)
    P = len(pts)
    scale = 1.0 / (n * N)
    diag = np.full(P, 1.0)  # every (i, j) with x outside Q_i contributes the identity
    rows, cols, vals = [], [], []
    for blk in transitions(atlas, flows, h, pts, nodes, grid=G if moment_match else None):
        diag[blk.rows] -= scale * (1.0 - blk.stay)
        idx, wts = _interp(blk.dest, G)
        r = np.broadcast_to(blk.rows[:, None, None], idx.shape)
        rows.append(r.ravel())
        cols.append(idx.ravel())
        vals.append((scale * blk.weight[..., None] * wts).ravel())
    rows.append(np.arange(P))
    cols.append(np.arange(P))
    vals.append(diag)
    S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, P))
    S.sum_duplicates()
    mu = density(pts)
    w = mu / mu.sum()
    F = sp.diags(w) @ S
    off = F - sp.diags(F.diagonal())
    asym = float(sp.linalg.norm(off - off.T) / max(sp.linalg.norm(off), 1e-300))
    off = 0.5 * (off + off.T)
    S_off = sp.diags(1.0 / w) @ off
    d = 1.0 - np.asarray(S_off.sum(axis=1)).ravel()
    S_new = (S_off + sp.diags(d)).tocsr()
    S_new.eliminate_zeros()
    return MarkovMatrix(S_new, w, G, n, float(h), asym)


# ---------------------------------------------------------------- spectrum

@dataclass
class Spectrum:
    values: np.ndarray  # descending
    vectors: np.ndarray | None  # columns are right eigenvectors, mu-normalized
    complete: bool
    h: float
    dim: int


def _symmetric(M: MarkovMatrix):
    r = np.sqrt(M.weights)
    return sp.diags(r) @ M.S @ sp.diags(1.0 / r)


def spectrum(M: MarkovMatrix, vectors: bool = True, k: int = 16, lowest: bool = True) -> Spectrum:
    """Eigenpairs of ``W^1/2 S W^-1/2``.

    Dense up to 4096 states.  Beyond that only the ``k`` eigenvalues nearest 1
    and (if ``lowest``) the smallest one are computed; ``complete`` is False.
    """
    A = _symmetric(M)
    if M.size <= DENSE_MAX:
        A = A.toarray()
        A = 0.5 * (A + A.T)
        if vectors:
            vals, U = scipy.linalg.eigh(A, driver="evd")
        else:
            vals, U = scipy.linalg.eigh(A, eigvals_only=True), None
        complete = True
    else:
        A = (0.5 * (A + A.T)).tocsc()
        # shift-invert on I - A resolves the clustered eigenvalues near 1
        L = sp.identity(M.size, format="csc") - A
        mu, U = spla.eigsh(L, k=k, sigma=-1e-6, which="LM")
        vals = 1.0 - mu
        lo = spla.eigsh(A, k=1, which="SA", return_eigenvectors=False, tol=1e-10) if lowest else []
        if not vectors:
            U = None
        else:
            U = np.concatenate([U, np.full((M.size, len(lo)), np.nan)], axis=1)
        vals = np.concatenate([vals, lo])
        complete = False
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = None
    if U is not None:
        U = U[:, order]
        vecs = U / np.sqrt(M.weights)[:, None]
    return Spectrum(vals, vecs, complete, M.h, M.dim)


def spectral_gap(spec: Spectrum, tol: float = 1e-10) -> float:
    if spec.values[0] - spec.values[1] < tol:
        raise DegenerateTop(f"top eigenvalue not simple: {spec.values[0]:.12f}, {spec.values[1]:.12f}")
    return float(1.0 - spec.values[1])


def loglog_fit(x, y):
    """Least-squares slope, intercept and R^2 of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    slope, icpt = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + icpt)
    r2 = 1.0 - resid.var() / ly.var() if ly.var() > 0 else 1.0
    return float(slope), float(icpt), float(r2)


# ---------------------------------------------------------------- diagnostics

def kernel_lower_bound(M: MarkovMatrix, delta: float):
    """Largest ``c`` with ``(S^n)_ab >= c h^-n cellvol`` whenever ``|a - b| < delta h``.

    Returns ``(c_est, tau)`` where ``tau`` is the largest row sum of the
    remainder ``S^n - c h^-n 1{d < delta h} cellvol``.
    """
    n, G, h = M.dim, M.grid, M.h
    Sn = M.S.toarray() if M.size <= DENSE_MAX else M.S
    P = np.linalg.matrix_power(Sn, n) if isinstance(Sn, np.ndarray) else (Sn ** n)
    P = np.asarray(P.todense()) if sp.issparse(P) else P
    r = delta * h * G
    rng = int(math.ceil(r))
    offsets = [o for o in np.ndindex(*([2 * rng + 1] * n))]
    offsets = [np.array(o) - rng for o in offsets]
    offsets = [o for o in offsets if np.linalg.norm(o) < r]
    idx = np.array(list(np.ndindex(*([G] * n))))
    strides = G ** np.arange(n - 1, -1, -1)
    a = idx @ strides
    vals = []
    for o in offsets:
        b = ((idx + o) % G) @ strides
        vals.append(P[a, b])
    vals = np.min(np.stack(vals), axis=0)
    scale = h ** (-n) * M.cellvol
    c = float(vals.min() / scale)
    tau = float(1.0 - c * scale * len(offsets))
    return c, tau


def eigenfunction_linf(spec: Spectrum, band=(0.9, 1.0)) -> float:
    """``max ||e||_inf / (h^{-n/2} ||e||_{2,mu})`` over eigenvectors with eigenvalue in ``band``."""
    sel = (spec.values >= band[0]) & (spec.values <= band[1] + 1e-12)
    vecs = spec.vectors[:, sel]
    vecs = vecs[:, np.all(np.isfinite(vecs), axis=0)]
    return float(np.abs(vecs).max(axis=0).max() * spec.h ** (spec.dim / 2.0))


def weyl_count(spec: Spectrum, zetas, tol: float = 1e-9) -> np.ndarray:
    """``N(zeta)``: eigenvalues of ``(I - S) / h^2`` not exceeding ``zeta`` (up to ``tol``)."""
    lam = np.sort((1.0 - spec.values) / spec.h ** 2)
    return np.searchsorted(lam, np.asarray(zetas, float) + tol, side="right")


def weyl_fit(spec: Spectrum, band: float = 0.1, lo_count: int = 4):
    """Fit ``N(zeta) ~ C (1 + zeta)^m`` over the resolved range.

    The resolved range holds the eigenvalues with ``1 - lambda <= band`` and
    counts ``N >= lo_count``.  Returns ``(m, C', points)`` with
    ``C' = max N(zeta) / (1 + zeta)^m`` over that range; ``m`` is NaN when
    fewer than three points are available.
    """
    lam = np.sort(np.maximum(1.0 - spec.values, 0.0)) / spec.h ** 2
    counts = np.arange(1, len(lam) + 1)
    sel = (lam <= band / spec.h ** 2) & (counts >= lo_count)
    if sel.sum() < 3:
        return float("nan"), float("nan"), int(sel.sum())
    m, _, _ = loglog_fit(1.0 + lam[sel], counts[sel])
    cprime = float(np.max(counts[sel] / (1.0 + lam[sel]) ** m))
    return m, cprime, int(sel.sum())


# ---------------------------------------------------------------- exact application

def apply_exact(atlas: Atlas, flows: Sequence[ChartFlow], h: float, f: Callable, points: np.ndarray,
                nodes: int = 16) -> np.ndarray:
    """``S_h f`` at ``points`` with ``f`` evaluated exactly at the flowed points."""
    n, N = atlas.dim, len(atlas)
    fx = f(points)
    out = np.zeros(len(points))
    count = np.zeros(len(points))
    for blk in transitions(atlas, flows, h, points, nodes):
        fy = f(blk.dest.reshape(-1, n)).reshape(blk.dest.shape[:-1])
        out[blk.rows] += (blk.weight * fy).sum(axis=1) + blk.stay * fx[blk.rows]
        count[blk.rows] += 1
    out += (n * N - count) * fx
    return out / (n * N)


def _as_callable(f):
    return f if callable(f) else (lambda p, _f=f: ex.evaluate(_f, p))


def _chart_derivatives(fl: ChartFlow, f: ex.Expr, w: np.ndarray, j: int, order: int):
    """``X f`` (order 1) or ``X^2 f`` (order 2) for ``X = (v_j / gamma) d/dw_j`` in chart coordinates."""
    n = w.shape[-1]
    ch = fl.chart
    x = ch.phi.forward(w)
    J = ch.phi.jacobian(w)
    d = J[..., :, j]
    grad = np.stack([ex.evaluate(ex.diff(f, k), x) for k in range(n)], axis=-1)
    s = fl.speed(w, j)
    d1 = np.einsum("...k,...k->...", grad, d)
    if order == 1:
        return s * d1
    hess = np.empty(x.shape[:-1] + (n, n))
    for a in range(n):
        da = ex.diff(f, a)
        for b in range(a, n):
            v = ex.evaluate(ex.diff(da, b), x)
            hess[..., a, b] = v
            hess[..., b, a] = v
    d2 = np.einsum("...a,...ab,...b->...", d, hess, d)
    if not ch.phi.is_affine:
        eps = 1e-4 * ch.sides[j]
        e = np.zeros(n)
        e[j] = eps
        ddd = (ch.phi.forward(w + e) - 2 * x + ch.phi.forward(w - e)) / eps ** 2
        d2 = d2 + np.einsum("...k,...k->...", grad, ddd)
    out = s * s * d2
    if fl.gamma_const is None:
        eps = 1e-4 * ch.sides[j]
        e = np.zeros(n)
        e[j] = eps
        ds = (fl.speed(w + e, j) - fl.speed(w - e, j)) / (2 * eps)
        out = out + s * ds * d1
    return out


def generator_limit(atlas: Atlas, flows: Sequence[ChartFlow], f: ex.Expr, points: np.ndarray) -> np.ndarray:
    """``-(1/6nN) sum_{i: x in Q_i} sum_j X_ij^2 f`` at ``points``."""
    n, N = atlas.dim, len(atlas)
    out = np.zeros(len(points))
    for fl in flows:
        w = fl.chart.psi(points)
        inside = fl.chart.in_inner(w)
        if not inside.any():
            continue
        for j in range(n):
            out[inside] += _chart_derivatives(fl, f, w[inside], j, 2)
    return -out / (6.0 * n * N)


def interior_points(flows: Sequence[ChartFlow], h_max: float, per_axis: int, margin: float = 1.05) -> np.ndarray:
    """Grid points whose every chart keeps all flows of duration ``h_max`` inside the inner cube."""
    n = flows[0].atlas.dim
    pts = Torus(n).grid(per_axis, offset=0.5)
    ok = np.ones(len(pts), dtype=bool)
    for fl in flows:
        w = fl.chart.psi(pts)
        inside = fl.chart.in_inner(w)
        reach = margin * h_max * fl.v / fl.gamma_min
        safe = np.all(np.abs(w) + reach < fl.v, axis=-1)
        ok &= ~inside | safe
    return pts[ok]


def generator_residual(atlas: Atlas, flows: Sequence[ChartFlow], f: ex.Expr, hs: Sequence[float],
                       points: np.ndarray | None = None, per_axis: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Max residual of ``(I - S_h) f / h^2`` against the generator at interior points."""
    if points is None:
        points = interior_points(flows, max(hs), per_axis)
    if not len(points):
        raise ValueError("no interior points for the largest h")
    fn = _as_callable(f)
    target = generator_limit(atlas, flows, f, points)
    fx = fn(points)
    res = []
    for h in hs:
        Sf = apply_exact(atlas, flows, h, fn, points)
        res.append(float(np.max(np.abs((fx - Sf) / h ** 2 - target))))
    return np.array(res), points


def dirichlet_form(M: MarkovMatrix, u: np.ndarray, v: np.ndarray) -> float:
    """``((I - S) u, v)_mu / h^2`` for grid functions."""
    Iu = u - M.S @ u
    return float(np.sum(M.weights * Iu * v) / M.h ** 2)


def _chart_quadrature(fl: ChartFlow, h: float, per_panel: int = 16):
    """Gauss-Legendre nodes and ``gamma dw`` weights on the inner cube of a chart.

    Each axis is split where rejection starts, ``|w_j| = side - reach``, so
    the integrands of the Dirichlet form are smooth on every panel.
    """
    s, wq = np.polynomial.legendre.leggauss(per_panel)
    axes, weights = [], []
    for side in fl.v:
        reach = min(h * side / fl.gamma_min, side)
        edges = np.unique(np.array([-side, -side + reach, side - reach, side]))
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        axes.append((mid[:, None] + half[:, None] * s).ravel())
        weights.append((half[:, None] * wq).ravel())
    w = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    wt = np.prod(np.stack(np.meshgrid(*weights, indexing="ij"), axis=-1).reshape(-1, len(axes)), axis=-1)
    return w, wt * fl.gamma(w)


def dirichlet_exact(atlas: Atlas, flows, h: float, f, g, per_panel: int = 16, nodes: int = 16) -> float:
    """``((I - S_h) f, g)_mu / h^2`` with exact flows, integrated chart by chart."""
    fn, gn = _as_callable(f), _as_callable(g)
    n, N = atlas.dim, len(atlas)
    total = 0.0
    for fl in flows:
        w, wq = _chart_quadrature(fl, h, per_panel)
        x = fl.chart.to_torus(w)
        fx, gx = fn(x), gn(x)
        for j in range(n):
            dest, wt, stay = chart_rows(fl, j, h, w, x, nodes)
            fy = fn(dest.reshape(-1, n)).reshape(dest.shape[:-1])
            Sf = (wt * fy).sum(axis=1) + stay * fx
            total += float(np.sum(wq * (fx - Sf) * gx))
    return total / (n * N * h ** 2)


def dirichlet_limit(atlas: Atlas, flows, f: ex.Expr, g: ex.Expr, per_panel: int = 16) -> float:
    """``(1/6nN) sum_ij (X_ij f, X_ij g)_{L^2(Q_i, mu)}``."""
    n, N = atlas.dim, len(atlas)
    total = 0.0
    for fl in flows:
        w, wq = _chart_quadrature(fl, 0.0, per_panel)
        for j in range(n):
            xf = _chart_derivatives(fl, f, w, j, 1)
            xg = _chart_derivatives(fl, g, w, j, 1)
            total += float(np.sum(wq * xf * xg))
    return total / (6.0 * n * N)


# ---------------------------------------------------------------- frequency split

def frequency_split(u: np.ndarray, G: int, dim: int, width: float):
    """Split a grid function with a Gaussian mollifier of standard deviation ``width``.

    Returns ``(uL, uH, ||uL||_H1, ||uH||_2)``; norms use the Lebesgue measure
    of the unit torus and derivatives are spectral.  Callers pass
    ``width = h * step_length(flows)`` so the mollifier matches a step.
    """
    field = np.asarray(u, dtype=float).reshape((G,) * dim)
    k = np.fft.fftfreq(G, d=1.0 / G)
    kk = np.meshgrid(*([k] * dim), indexing="ij")
    k2 = sum(q ** 2 for q in kk)
    mult = np.exp(-2.0 * math.pi ** 2 * width ** 2 * k2)
    fh = np.fft.fftn(field)
    uL = np.real(np.fft.ifftn(fh * mult))
    uH = field - uL
    coef = np.abs(fh * mult) ** 2 / field.size ** 2
    h1 = math.sqrt(float(np.sum(coef * (1.0 + 4 * math.pi ** 2 * k2))))
    l2h = math.sqrt(float(np.mean(uH ** 2)))
    return uL.ravel(), uH.ravel(), h1, l2h


# ---------------------------------------------------------------- total variation

def tv_decay(M: MarkovMatrix, rows=None, k_max: int = 2 ** 20, tol: float = 1e-7, dense_steps: int = 32):
    """``D(k) = max_a 1/2 sum_b |(S^k)_ab - mu_b|``.

    Every ``k <= dense_steps`` (from ``k = 0``) is computed by repeated multiplication, then
    powers of two by repeated squaring until ``D < tol`` or ``k_max``.
    Returns ``(ks, D)``.
    """
    S = M.dense()
    mu = M.weights
    rows = np.arange(M.size) if rows is None else np.asarray(rows)
    R = np.eye(M.size)[rows]
    ks, D = [0], [0.5 * float(np.abs(R - mu).sum(axis=1).max())]
    for k in range(1, dense_steps + 1):
        R = R @ S
        ks.append(k)
        D.append(0.5 * float(np.abs(R - mu).sum(axis=1).max()))
    P = np.linalg.matrix_power(S, dense_steps)
    k = dense_steps
    while k < k_max and D[-1] > tol:
        P = P @ P
        k *= 2
        ks.append(k)
        D.append(0.5 * float(np.abs(P[rows] - mu).sum(axis=1).max()))
    return np.array(ks), np.array(D)


def fit_rate(ks, D, floor: float = 1e-12) -> float:
    """Decay rate ``r`` in ``D(k) ~ C exp(-r k)`` over the last decade of ``k``."""
    ks, D = np.asarray(ks, float), np.asarray(D, float)
    good = D > floor
    ks, D = ks[good], D[good]
    sel = ks >= ks[-1] / 10.0
    if sel.sum() < 2:
        sel = slice(-2, None)
    slope, _ = np.polyfit(ks[sel], np.log(D[sel]), 1)
    return float(-slope)
