"""Second-order operators with PSD principal part and their subunit fields."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import expr as ex
from .expr import Expr

__all__ = [
    "OperatorSpec", "VectorField", "NotPSD", "NotSpanned", "PSDReport",
    "make_spec", "coefficients", "principal_symbol", "check_psd", "check_periodic",
    "is_subunit", "or_fields", "bracket", "bracket_depth", "integrate_field",
    "or_local_markov", "matrix_subunit_violation",
]

PSD_TOL = 1e-10


class NotPSD(ValueError):
    """The principal matrix has a negative eigenvalue at a sample point."""

    def __init__(self, min_eig: float, point):
        super().__init__(f"principal matrix not PSD: min eigenvalue {min_eig:.3e} at {np.round(point, 6)}")
        self.min_eig = min_eig
        self.point = np.asarray(point)


class NotSpanned(RuntimeError):
    """Brackets up to the requested depth do not span the tangent space."""


@dataclass(frozen=True)
class OperatorSpec:
    """``A u = -sum_ij a_ij d_i d_j u + sum_i b_i d_i u + d u``.

    ``epsilon`` is the declared subelliptic exponent; it bounds the block
    exponents produced by the coordinate reduction.
    """

    a2: tuple[tuple[Expr, ...], ...]
    b: tuple[Expr, ...]
    d: Expr
    epsilon: float
    name: str = "operator"

    def __post_init__(self):
        n = len(self.a2)
        if any(len(row) != n for row in self.a2):
            raise ValueError("a2 must be square")
        if len(self.b) != n:
            raise ValueError("b must have one entry per variable")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        used = [ex.num_vars(e) for row in self.a2 for e in row] + [ex.num_vars(e) for e in self.b]
        if max(used + [ex.num_vars(self.d)]) > n:
            raise ValueError("coefficient uses a variable beyond the dimension")
        for i, j in itertools.combinations(range(n), 2):
            if self.a2[i][j] != self.a2[j][i]:
                pts = np.random.default_rng(0).uniform(-1, 1, size=(64, n))
                if not np.allclose(ex.evaluate(self.a2[i][j], pts), ex.evaluate(self.a2[j][i], pts)):
                    raise ValueError(f"a2 is not symmetric in entries ({i}, {j})")

    @property
    def dim(self) -> int:
        return len(self.a2)


def make_spec(a2: Sequence[Sequence[str | Expr]], b=None, d="0", epsilon=1.0, name="operator") -> OperatorSpec:
    """Build a spec from strings (or expressions)."""
    n = len(a2)

    def conv(s):
        return s if not isinstance(s, str) else ex.parse(s, n_vars=n)

    a = tuple(tuple(conv(s) for s in row) for row in a2)
    bb = tuple(conv(s) for s in (b if b is not None else ["0"] * n))
    return OperatorSpec(a, bb, conv(d), float(epsilon), name)


def coefficients(spec: OperatorSpec, x) -> np.ndarray:
    """Principal matrix at points ``x`` (shape ``(..., n)``) -> ``(..., n, n)``."""
    x = np.asarray(x, dtype=float)
    n = spec.dim
    out = np.empty(x.shape[:-1] + (n, n))
    for i in range(n):
        for j in range(i, n):
            v = ex.evaluate(spec.a2[i][j], x)
            out[..., i, j] = v
            out[..., j, i] = v
    return out


def principal_symbol(spec: OperatorSpec, x, xi) -> np.ndarray:
    a = coefficients(spec, x)
    xi = np.asarray(xi, dtype=float)
    return np.einsum("...i,...ij,...j->...", xi, a, xi)


@dataclass
class PSDReport:
    min_eig: float
    argmin: np.ndarray


def check_psd(spec: OperatorSpec, samples, tol: float = PSD_TOL) -> PSDReport:
    """Smallest eigenvalue of ``A2`` over ``samples``; raises :class:`NotPSD`."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    eig = np.linalg.eigvalsh(coefficients(spec, samples))[:, 0]
    k = int(np.argmin(eig))
    if eig[k] < -tol:
        raise NotPSD(float(eig[k]), samples[k])
    return PSDReport(float(eig[k]), samples[k])


def check_periodic(spec: OperatorSpec, n_samples: int = 256, tol: float = 1e-9, seed: int = 0) -> float:
    """Largest change of any coefficient under a unit shift in one variable."""
    rng = np.random.default_rng(seed)
    n = spec.dim
    x = rng.uniform(0, 1, size=(n_samples, n))
    exprs = [e for row in spec.a2 for e in row] + list(spec.b) + [spec.d]
    worst = 0.0
    for k in range(n):
        shifted = x.copy()
        shifted[:, k] += 1.0
        for e in exprs:
            worst = max(worst, float(np.max(np.abs(ex.evaluate(e, x) - ex.evaluate(e, shifted)))))
    if worst > tol:
        raise ValueError(f"coefficients of {spec.name} are not 1-periodic (max jump {worst:.2e})")
    return worst


# ---------------------------------------------------------------- vector fields

@dataclass(frozen=True)
class VectorField:
    """``X = sum_k comps[k] d_k`` with expression coefficients."""

    comps: tuple[Expr, ...]
    label: str = ""

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.stack([ex.evaluate(c, x) for c in self.comps], axis=-1)

    def apply(self, f: Expr) -> Expr:
        """``X f`` as an expression."""
        out: Expr = ex.Num(0.0)
        for k, c in enumerate(self.comps):
            out = ex.add(out, ex.mul(c, ex.diff(f, k)))
        return out


def bracket(X: VectorField, Y: VectorField) -> VectorField:
    comps = []
    for k in range(len(X.comps)):
        comps.append(ex.sub(X.apply(Y.comps[k]), Y.apply(X.comps[k])))
    return VectorField(tuple(comps), f"[{X.label},{Y.label}]")


def bracket_depth(fields: Sequence[VectorField], x, max_depth: int = 6, rtol: float = 1e-9) -> int:
    """Smallest ``r`` such that brackets of length ``<= r`` span ``R^n`` at ``x``."""
    x = np.asarray(x, dtype=float)
    n = len(fields[0].comps)
    level = list(fields)
    vectors = [f(x) for f in level]
    scale = max(1.0, max(float(np.linalg.norm(v)) for v in vectors))
    for depth in range(1, max_depth + 1):
        if depth > 1:
            level = [bracket(X, L) for X in fields for L in level]
            vectors += [f(x) for f in level]
            scale = max(scale, max(float(np.linalg.norm(v)) for v in vectors))
        sv = np.linalg.svd(np.array(vectors), compute_uv=False)
        if len(sv) >= n and sv[n - 1] > rtol * scale:
            return depth
    raise NotSpanned(f"brackets of length <= {max_depth} do not span at {x}")


def is_subunit(spec: OperatorSpec, fields: Sequence[VectorField], samples, tol: float = 1e-9) -> bool:
    """``A2 - sum X X^T`` is PSD (to ``-tol``) at every sample point."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    a = coefficients(spec, samples)
    for X in fields:
        v = X(samples)
        a = a - v[:, :, None] * v[:, None, :]
    return bool(np.linalg.eigvalsh(a)[:, 0].min() >= -tol)


def _unit_cube_samples(n: int, per_axis: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, per_axis, endpoint=False)
    return np.stack(np.meshgrid(*([g] * n), indexing="ij"), axis=-1).reshape(-1, n)


def or_fields(spec: OperatorSpec, samples=None) -> list[VectorField]:
    """Normalized fields ``Y_j = C^{-1/2} sum_i a_ij d_i`` with ``C = 2 max_j sup a_jj``."""
    n = spec.dim
    if samples is None:
        samples = _unit_cube_samples(n, 64 if n <= 2 else 16)
    diag = np.stack([ex.evaluate(spec.a2[j][j], samples) for j in range(n)])
    c = 2.0 * float(diag.max())
    if c <= 0:
        raise ValueError("principal part vanishes on the sample set")
    s = ex.const(1.0 / np.sqrt(c))
    return [VectorField(tuple(ex.mul(s, spec.a2[i][j]) for i in range(n)), f"Y{j + 1}") for j in range(n)]


def integrate_field(X, x, t, steps: int = 8) -> np.ndarray:
    """RK4 flow ``exp(t X) x``; ``X`` maps ``(..., n)`` to ``(..., n)``; ``t`` broadcasts."""
    y = np.array(x, dtype=float)
    t = np.asarray(t, dtype=float)
    dt = (t / steps)[..., None] if t.ndim else t / steps
    for _ in range(steps):
        k1 = X(y)
        k2 = X(y + 0.5 * dt * k1)
        k3 = X(y + 0.5 * dt * k2)
        k4 = X(y + dt * k3)
        y = y + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return y


def or_local_markov(spec: OperatorSpec, h: float, f, x, fields=None, nodes: int = 16, steps: int = 16) -> np.ndarray:
    """``(1/n) sum_j (1/2h) int_{-h}^{h} f(exp(t Y_j) x) dt`` by Gauss-Legendre in ``t``.

    ``f`` is an expression or a callable on ``(..., n)`` arrays.
    """
    fields = or_fields(spec) if fields is None else fields
    x = np.atleast_2d(np.asarray(x, dtype=float))
    fn = (lambda p: ex.evaluate(f, p)) if not callable(f) else f
    s, w = np.polynomial.legendre.leggauss(nodes)
    total = np.zeros(x.shape[0])
    for Y in fields:
        for sq, wq in zip(s, w):
            y = integrate_field(Y, x, h * sq, steps=steps)
            total += 0.5 * wq * fn(y)
    return total / len(fields)


def matrix_subunit_violation(a: np.ndarray, xi: np.ndarray) -> float:
    """Largest ``|sum_i a_ij xi_i|^2 - 2 a_jj <A xi, xi>`` over ``j`` and the rows of ``xi``."""
    a = np.asarray(a, dtype=float)
    xi = np.atleast_2d(xi)
    axi = xi @ a
    quad = np.einsum("ki,ki->k", axi, xi)
    lhs = axi ** 2
    rhs = 2.0 * np.diag(a)[None, :] * quad[:, None]
    return float(np.max(lhs - rhs))
