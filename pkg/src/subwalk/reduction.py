"""Calderon-Zygmund style coordinate reduction and anisotropic blocks.

A stage takes a PSD coefficient field ``b`` on a neighbourhood of the origin,
selects a dyadic scale and a pivot direction, straightens the pivot field and
returns the reduced (Schur complement) field on the transversal coordinates,
averaged over a slab.  Chaining the stages produces a numeric diffeomorphism
``Phi`` and block exponents ``kappa``.

All lengths handed between stages are in the physical units of the chart; the
dyadic rescaling ``y = 10 x / delta`` is applied inside each stage and undone
again by an affine factor of the diffeomorphism.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import expr as ex
from .operator import OperatorSpec

__all__ = [
    "NoSelection", "FlowEscape", "StageFailure",
    "ExprField", "ScaledField", "TabulatedField", "CZSelection",
    "cz_select", "rescale_cz", "straighten", "average_slab", "build_block", "model_operator",
    "AffineMap", "FlowMap", "EmbeddedMap", "NumericDiffeo", "UniversalBlock", "BlockResult",
    "StageRecord", "Straightening", "coefficient_sup",
]

CSTAR = 1.5
FLOW_STEP = 1e-3
JAC_STEP = 1e-5
R1_MIN = 1e-3


class NoSelection(RuntimeError):
    """No dyadic level up to the cap satisfies the selection inequality."""


class FlowEscape(RuntimeError):
    """An integral curve left its safety cube."""


class StageFailure(RuntimeError):
    """A reduction stage could not be completed."""


# ---------------------------------------------------------------- coefficient fields

def _cube(m: int, half: float, per_axis: int) -> np.ndarray:
    g = np.linspace(-half, half, per_axis)
    return np.stack(np.meshgrid(*([g] * m), indexing="ij"), axis=-1).reshape(-1, m)


class ExprField:
    """Principal matrix of an operator, recentred at ``x0``: ``b(u) = a(x0 + u)``."""

    def __init__(self, spec: OperatorSpec, x0):
        self.spec = spec
        self.x0 = np.asarray(x0, dtype=float)
        self.dim = spec.dim
        self.halfwidth = math.inf

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        x = u + self.x0
        n = self.dim
        out = np.empty(u.shape[:-1] + (n, n))
        for i in range(n):
            for j in range(i, n):
                v = ex.evaluate(self.spec.a2[i][j], x)
                out[..., i, j] = v
                out[..., j, i] = v
        return out

    def row_is_constant(self, p: int) -> bool:
        return all(ex.num_vars(self.spec.a2[p][j]) == 0 for j in range(self.dim))

    def derivative_sup(self, half: float, per_axis: int) -> float:
        pts = _cube(self.dim, half, per_axis) + self.x0
        worst = 0.0
        for i in range(self.dim):
            for j in range(i, self.dim):
                e = self.spec.a2[i][j]
                terms = [e]
                firsts = [ex.diff(e, k) for k in range(self.dim)]
                terms += firsts
                for k, l in itertools.combinations_with_replacement(range(self.dim), 2):
                    terms.append(ex.diff(firsts[k], l))
                for t in terms:
                    worst = max(worst, float(np.max(np.abs(ex.evaluate(t, pts)))))
        return worst


class ScaledField:
    """``b~(y) = 100 delta^-2 b(delta y / 10)``."""

    def __init__(self, base, delta: float):
        self.base = base
        self.delta = float(delta)
        self.dim = base.dim
        self.halfwidth = base.halfwidth * 10.0 / delta

    def __call__(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return 100.0 / self.delta ** 2 * self.base(self.delta * y / 10.0)

    def row_is_constant(self, p: int) -> bool:
        return getattr(self.base, "row_is_constant", lambda _p: False)(p)


class TabulatedField:
    """Symmetric matrix field sampled on a tensor grid, cubic interpolation inside."""

    def __init__(self, values: np.ndarray, half: float, scale: float = 1.0):
        self.dim = values.shape[-1]
        self.halfwidth = float(half)
        self.scale = scale
        m = self.dim
        per_axis = values.shape[0]
        self.axis = np.linspace(-half, half, per_axis)
        self.values = values
        self.constant = bool(np.ptp(values.reshape(-1, m * m), axis=0).max() <= 1e-12 * max(np.abs(values).max(), 1e-300))
        if not self.constant:
            method = "cubic" if per_axis >= 4 else "linear"
            self._interp = RegularGridInterpolator([self.axis] * m, values.reshape(values.shape[:m] + (m * m,)),
                                                   method=method, bounds_error=False, fill_value=None)

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        m = self.dim
        if self.constant:
            c = self.values.reshape(-1, m, m)[0]
            return np.broadcast_to(c, u.shape[:-1] + (m, m)).copy()
        flat = self._interp(u.reshape(-1, m)).reshape(u.shape[:-1] + (m, m))
        return 0.5 * (flat + np.swapaxes(flat, -1, -2))

    def row_is_constant(self, p: int) -> bool:
        return self.constant

    def derivative_sup(self, half: float, per_axis: int) -> float:
        half = min(half, self.halfwidth)
        pts_axis = np.linspace(-half, half, per_axis)
        pts = np.stack(np.meshgrid(*([pts_axis] * self.dim), indexing="ij"), axis=-1)
        vals = self(pts)
        worst = float(np.abs(vals).max())
        if self.constant or per_axis < 3:
            return worst
        dx = pts_axis[1] - pts_axis[0]
        firsts = np.gradient(vals, dx, axis=tuple(range(self.dim)))
        firsts = firsts if isinstance(firsts, (list, tuple)) else [firsts]
        for g in firsts:
            worst = max(worst, float(np.abs(g).max()))
            seconds = np.gradient(g, dx, axis=tuple(range(self.dim)))
            seconds = seconds if isinstance(seconds, (list, tuple)) else [seconds]
            worst = max(worst, max(float(np.abs(s).max()) for s in seconds))
        return worst


def coefficient_sup(fld, half: float = CSTAR, per_axis: int | None = None) -> float:
    """Sampled sup of the coefficients and their derivatives of order <= 2."""
    per_axis = per_axis or (64 if fld.dim <= 2 else 24)
    return fld.derivative_sup(min(half, fld.halfwidth), per_axis)


# ---------------------------------------------------------------- selection and rescaling

@dataclass
class CZSelection:
    delta: float
    level: int
    pivot: int
    R: float
    offdiag_ratio: float  # max |b_ij| / (R delta^2) on Q(0, delta); lemma bound is 40
    pivot_ratio: float  # min b_pp / (R delta^2) on Q(0, delta); lemma bound is 1

    @property
    def lemma_ok(self) -> bool:
        return self.offdiag_ratio <= 40.0 and self.pivot_ratio >= 1.0


def cz_select(fld, R: float | None = None, per_axis: int | None = None, max_level: int = 40) -> CZSelection:
    """Largest dyadic ``delta = 2^-N`` with ``max_i max_{Q(0,delta)} |b_ii| >= 10 R delta^2``."""
    m = fld.dim
    per_axis = per_axis or (64 if m <= 2 else 16)
    if R is None:
        R = 10.0 * coefficient_sup(fld)
    if R <= 0:
        raise NoSelection("coefficients vanish identically")
    for level in range(1, max_level + 1):
        delta = 2.0 ** -level
        if delta > fld.halfwidth:
            continue
        pts = _cube(m, delta, per_axis)
        b = fld(pts)
        diag = np.abs(np.diagonal(b, axis1=-2, axis2=-1)).max(axis=0)
        if diag.max() >= 10.0 * R * delta ** 2:
            p = int(np.argmax(diag))
            off = float(np.abs(b).max()) / (R * delta ** 2)
            piv = float(b[:, p, p].min()) / (R * delta ** 2)
            return CZSelection(delta, level, p, float(R), off, piv)
    raise NoSelection(f"no dyadic level <= {max_level} satisfies the selection inequality")


def rescale_cz(fld, delta: float) -> ScaledField:
    return ScaledField(fld, delta)


# ---------------------------------------------------------------- diffeomorphisms

class AffineMap:
    is_affine = True

    def __init__(self, A, b):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.b = np.asarray(b, dtype=float)
        self._Ainv = np.linalg.inv(self.A)

    def forward(self, w):
        return np.asarray(w, dtype=float) @ self.A.T + self.b

    def inverse(self, x):
        return (np.asarray(x, dtype=float) - self.b) @ self._Ainv.T

    def jacobian(self, w):
        return np.broadcast_to(self.A, np.shape(w)[:-1] + self.A.shape)


def _insert(z: np.ndarray, p: int, value) -> np.ndarray:
    shape = z.shape[:-1] + (z.shape[-1] + 1,)
    y = np.empty(shape)
    y[..., :p] = z[..., :p]
    y[..., p] = value
    y[..., p + 1:] = z[..., p:]
    return y


def _remove(y: np.ndarray, p: int) -> np.ndarray:
    return np.concatenate([y[..., :p], y[..., p + 1:]], axis=-1)


class FlowMap:
    """``(w1, z) -> exp(w1 V)(z with 0 inserted at the pivot)``; ``V_p > 0``."""

    is_affine = False

    def __init__(self, V: Callable, pivot: int, dim: int, step: float = FLOW_STEP, safety: float = math.inf):
        self.V = V
        self.pivot = pivot
        self.dim = dim
        self.step = step
        self.safety = safety

    def _flow(self, y, t):
        y = np.array(y, dtype=float)
        t = np.asarray(t, dtype=float)
        tmax = float(np.abs(t).max()) if t.size else 0.0
        k = max(1, math.ceil(tmax / self.step))
        dt = (t / k)[..., None]
        for _ in range(k):
            k1 = self.V(y)
            k2 = self.V(y + 0.5 * dt * k1)
            k3 = self.V(y + 0.5 * dt * k2)
            k4 = self.V(y + dt * k3)
            y = y + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            if np.isfinite(self.safety) and np.abs(y).max(initial=0.0) > self.safety:
                raise FlowEscape(f"flow left the safety cube of half-width {self.safety:g}")
        return y

    def forward(self, u):
        u = np.asarray(u, dtype=float)
        y0 = _insert(u[..., 1:], self.pivot, 0.0)
        return self._flow(y0, u[..., 0])

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        p = self.pivot
        t = y[..., p] / self.V(y)[..., p]
        for _ in range(30):
            back = self._flow(y, -t)
            g = back[..., p]
            t = t + g / self.V(back)[..., p]
            if np.abs(g).max(initial=0.0) < 1e-14:
                break
        back = self._flow(y, -t)
        return np.concatenate([t[..., None], _remove(back, p)], axis=-1)

    def jacobian(self, u, step: float = JAC_STEP):
        u = np.asarray(u, dtype=float)
        x = self.forward(u)
        cols = [self.V(x)]
        for k in range(1, self.dim):
            e = np.zeros(self.dim)
            e[k] = step
            cols.append((self.forward(u + e) - self.forward(u - e)) / (2 * step))
        return np.stack(cols, axis=-1)


class EmbeddedMap:
    """Acts on coordinates ``offset:`` and leaves the leading ones alone."""

    def __init__(self, inner, offset: int):
        self.inner = inner
        self.offset = offset
        self.is_affine = inner.is_affine

    def forward(self, w):
        w = np.asarray(w, dtype=float)
        return np.concatenate([w[..., :self.offset], self.inner.forward(w[..., self.offset:])], axis=-1)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[..., :self.offset], self.inner.inverse(x[..., self.offset:])], axis=-1)


class NumericDiffeo:
    """Composition ``maps[-1] o ... o maps[0]`` with a finite-difference Jacobian."""

    def __init__(self, maps: Sequence, dim: int):
        self.maps = list(maps)
        self.dim = dim
        self.is_affine = all(m.is_affine for m in self.maps)
        self._const_jac = None

    def __call__(self, w):
        return self.forward(w)

    def forward(self, w):
        x = np.asarray(w, dtype=float)
        for m in self.maps:
            x = m.forward(x)
        return x

    def inverse(self, x):
        w = np.asarray(x, dtype=float)
        for m in reversed(self.maps):
            w = m.inverse(w)
        return w

    def jacobian(self, w, step: float = JAC_STEP) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if self.is_affine:
            if self._const_jac is None:
                self._const_jac = self._fd_jacobian(np.zeros(self.dim), 1.0)
            return np.broadcast_to(self._const_jac, w.shape[:-1] + (self.dim, self.dim))
        return self._fd_jacobian(w, step)

    def _fd_jacobian(self, w, step):
        cols = []
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = step
            cols.append((self.forward(w + e) - self.forward(w - e)) / (2 * step))
        return np.stack(cols, axis=-1)

    def det_jacobian(self, w, step: float = JAC_STEP) -> np.ndarray:
        return np.linalg.det(self.jacobian(w, step))


# ---------------------------------------------------------------- straightening

@dataclass
class Straightening:
    phi: object  # map (w1, z) -> y in the coordinates of the input field
    reduced: Callable  # (w1, z) -> Schur complement of the pushforward, (m-1)x(m-1)
    r1: float
    residual: float  # max |B_11 - 1| and |B_1j| / sqrt(B_11 B_jj) over sample points
    affine: bool


def _pushforward(fld, phi, u):
    """Pushforward ``J^-1 B J^-T`` of the field under ``phi`` at chart points ``u``."""
    y = phi.forward(u)
    J = phi.jacobian(u)
    Jinv = np.linalg.inv(J)
    return Jinv @ fld(y) @ np.swapaxes(Jinv, -1, -2)


def _schur(B):
    return B[..., 1:, 1:] - B[..., 1:, :1] * B[..., :1, 1:] / B[..., :1, :1]


def straighten(fld, pivot: int, r1: float, z_half: float, safety: float = math.inf,
               step: float = FLOW_STEP, samples: int = 9, check_half: float | None = None) -> Straightening:
    """Straighten ``V = sum_j b_pj / sqrt(b_pp) d_j`` so that it becomes ``d/dw1``.

    The flow time ``w1`` is the new first coordinate, so the pivot coefficient
    of the pushforward is one.  The flow is checked on ``|w1| <= r1`` from a
    transversal grid of half-width ``z_half``; on :class:`FlowEscape` the time
    range is halved until ``r1 < 1e-3``.  The residual is sampled on
    ``|w1| <= check_half`` (default ``r1``).
    """
    m = fld.dim
    p = pivot

    def V(y):
        b = fld(y)
        return b[..., p, :] / np.sqrt(b[..., p, p])[..., None]

    zs = _cube(m - 1, z_half, samples) if m > 1 else np.zeros((1, 0))
    if fld.row_is_constant(p):
        v = V(np.zeros(m))
        A = np.zeros((m, m))
        A[:, 0] = v
        others = [k for k in range(m) if k != p]
        for col, k in enumerate(others, start=1):
            A[k, col] = 1.0
        phi = AffineMap(A, np.zeros(m))
        affine = True
    else:
        phi = FlowMap(V, p, m, step=step, safety=safety)
        affine = False
        while True:
            try:
                for t in (r1, -r1):
                    phi.forward(np.concatenate([np.full((len(zs), 1), t), zs], axis=1))
                break
            except FlowEscape:
                r1 *= 0.5
                if r1 < R1_MIN:
                    raise
    wmax = r1 if check_half is None else min(r1, check_half)
    if m > 1:
        ws = np.linspace(-wmax, wmax, 5)
        u = np.array([[w, *z] for w in ws for z in zs])
    else:
        u = np.linspace(-wmax, wmax, 5)[:, None]
    B = _pushforward(fld, phi, u)
    diag = np.diagonal(B, axis1=-2, axis2=-1)
    if m > 1:
        den = np.sqrt(np.maximum(diag[:, :1] * diag[:, 1:], 0.0))
        off = np.abs(B[:, 0, 1:])
        # a vanishing transversal coefficient forces the cross term to vanish too
        corr = np.where(den > 0, off / np.where(den > 0, den, 1.0), off)
    else:
        corr = np.zeros((1, 0))
    residual = float(max(np.abs(B[:, 0, 0] - 1.0).max(), corr.max(initial=0.0)))

    def reduced(uu):
        return _schur(_pushforward(fld, phi, np.asarray(uu, dtype=float)))

    return Straightening(phi, reduced, r1, residual, affine)


def average_slab(b: Callable, half: float, z, nodes: int = 16) -> np.ndarray:
    """``(1/2 half) int_{-half}^{half} b(w1, z) dw1`` by Gauss-Legendre."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    s, w = np.polynomial.legendre.leggauss(nodes)
    out = None
    for sq, wq in zip(s, w):
        u = np.concatenate([np.full((len(z), 1), half * sq), z], axis=1)
        val = 0.5 * wq * b(u)
        out = val if out is None else out + val
    return out


# ---------------------------------------------------------------- blocks

@dataclass(frozen=True)
class UniversalBlock:
    """``Q_rho = prod_j (-c_j rho^kappa_j, c_j rho^kappa_j)``."""

    kappa: tuple[float, ...]
    c: tuple[float, ...]
    rho: float

    @property
    def sides(self) -> np.ndarray:
        return np.array(self.c) * self.rho ** np.array(self.kappa)

    def contains(self, w, scale: float = 1.0) -> np.ndarray:
        return np.all(np.abs(np.asarray(w)) < scale * self.sides, axis=-1)


@dataclass
class StageRecord:
    selection: CZSelection
    r1: float
    residual: float
    scale: float  # sqrt of the pivot coefficient at the centre before normalization
    side: float
    affine: bool


@dataclass
class BlockResult:
    block: UniversalBlock
    phi: NumericDiffeo  # chart coordinates w -> x (absolute)
    stages: list[StageRecord]
    sides_half: np.ndarray  # stage sides at rho / 2, used for kappa


def _quarter(v: float) -> float:
    return round(v * 4.0) / 4.0


def _run_stages(fld0, rho: float, domain_half: float, cstar: float):
    """Run all stages at radius ``rho``; returns the maps (inner first) and records."""
    n = fld0.dim
    fld = fld0
    stage_maps = []
    records: list[StageRecord] = []
    for j in range(n):
        m = fld.dim
        sel = cz_select(fld)
        p = sel.pivot
        if j == 0:
            scale = 1.0
            work = fld
        else:
            bpp = float(fld(np.zeros(m))[p, p])
            if not bpp > 0:
                raise StageFailure(f"stage {j + 1}: averaged pivot coefficient vanishes at the centre")
            scale = math.sqrt(bpp)
            work = _Normalized(fld, bpp)
        side = rho * scale
        delta = sel.delta
        scaled = rescale_cz(work, delta)
        to_y = 10.0 / delta
        avail = min(domain_half, work.halfwidth)
        z_half = 0.6 * avail
        r1_start = 0.9 * avail / max(1.0, math.sqrt(float(np.abs(work(np.zeros(m))).max())))
        try:
            st = straighten(scaled, p, r1=r1_start, z_half=z_half * to_y, safety=avail * to_y,
                            check_half=cstar * side)
        except FlowEscape as err:
            raise StageFailure(f"stage {j + 1}: {err}") from err
        need = cstar * side
        if st.r1 < min(need, avail):
            raise StageFailure(f"stage {j + 1}: straightening time {st.r1:.3g} shorter than block {need:.3g}")
        # physical (w_j, z) -> y -> physical x; the map acts on this stage's coordinates
        pre = AffineMap(np.diag([1.0] + [to_y] * (m - 1)), np.zeros(m))
        post = AffineMap(np.eye(m) / to_y, np.zeros(m))
        inner = NumericDiffeo([pre, st.phi, post], m)
        stage_maps.append(inner)
        records.append(StageRecord(sel, st.r1, st.residual, scale, side, st.affine))
        if m == 1:
            break
        # reduced field in physical transversal units, averaged over the slab
        slab = side

        def reduced_phys(u, _st=st, _to_y=to_y, _scale2=scale ** 2):
            uy = np.asarray(u, dtype=float).copy()
            uy[..., 1:] *= _to_y
            return _scale2 * _st.reduced(uy) / _to_y ** 2

        per_axis = 65 if m - 1 == 1 else (17 if m - 1 == 2 else 9)
        grid = _cube(m - 1, z_half, per_axis)
        vals = average_slab(reduced_phys, slab, grid)
        fld = TabulatedField(vals.reshape((per_axis,) * (m - 1) + (m - 1, m - 1)), z_half)
    return stage_maps, records


class _Normalized:
    def __init__(self, base, s2: float):
        self.base = base
        self.s2 = s2
        self.dim = base.dim
        self.halfwidth = base.halfwidth

    def __call__(self, u):
        return self.base(u) / self.s2

    def row_is_constant(self, p):
        return self.base.row_is_constant(p)

    def derivative_sup(self, half, per_axis):
        return self.base.derivative_sup(half, per_axis) / self.s2


def build_block(spec: OperatorSpec, x0, rho: float, domain_half: float = 1.0,
                cstar: float = CSTAR, kappa_cap: bool = True) -> BlockResult:
    """Block exponents from stage sides at ``rho`` and ``rho / 2``.

    ``kappa_j = log2(side_j(rho) / side_j(rho/2))`` rounded to a quarter and made
    nondecreasing; ``c_j = side_j(rho) / rho^kappa_j``.
    """
    x0 = np.asarray(x0, dtype=float)
    n = spec.dim
    fld = ExprField(spec, x0)
    maps, recs = _run_stages(fld, rho, domain_half, cstar)
    _, recs_half = _run_stages(fld, rho / 2.0, domain_half, cstar)
    sides = np.array([r.side for r in recs])
    sides_half = np.array([r.side for r in recs_half])
    kappa = []
    for j in range(n):
        k = _quarter(math.log2(sides[j] / sides_half[j]))
        if j == 0:
            k = 1.0
        k = max(k, kappa[-1]) if kappa else k
        kappa.append(k)
    if kappa_cap and kappa[-1] > 1.0 / spec.epsilon + 0.25:
        raise StageFailure(f"kappa_n = {kappa[-1]} exceeds 1/epsilon = {1.0 / spec.epsilon:g}")
    c = tuple(float(sides[j] / rho ** kappa[j]) for j in range(n))
    full = [EmbeddedMap(mp, j) if j else mp for j, mp in enumerate(maps)]
    full = list(reversed(full)) + [AffineMap(np.eye(n), x0)]
    phi = NumericDiffeo(full, n)
    return BlockResult(UniversalBlock(tuple(kappa), c, float(rho)), phi, recs, sides_half)


def model_operator(block: UniversalBlock) -> np.ndarray:
    """Constant-coefficient model ``diag(c_j^2 rho^{2 kappa_j})``."""
    return np.diag(block.sides ** 2)
