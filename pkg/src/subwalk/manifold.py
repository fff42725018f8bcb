"""Flat torus, atlases of subunit charts and the smooth reference density."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .operator import OperatorSpec, check_periodic, check_psd
from .reduction import CSTAR, NumericDiffeo, UniversalBlock, build_block

__all__ = [
    "CoverageFailure", "Torus", "SubunitChart", "Atlas", "Density",
    "wrap", "torus_delta", "build_atlas", "lattice_centers", "bump",
]


class CoverageFailure(RuntimeError):
    """The inner cubes of the atlas miss part of the torus."""


def wrap(x) -> np.ndarray:
    """Reduce coordinates mod 1 into ``[0, 1)``."""
    x = np.mod(np.asarray(x, dtype=float), 1.0)
    return np.where(x >= 1.0, 0.0, x)


def torus_delta(x, y) -> np.ndarray:
    """Shortest representative of ``x - y`` in ``[-1/2, 1/2)^n``."""
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return d - np.floor(d + 0.5)


@dataclass(frozen=True)
class Torus:
    dim: int

    def grid(self, per_axis: int, offset: float = 0.0) -> np.ndarray:
        """Points ``(k + offset) / per_axis`` in lexicographic order, shape ``(per_axis^n, n)``."""
        g = (np.arange(per_axis) + offset) / per_axis
        return np.stack(np.meshgrid(*([g] * self.dim), indexing="ij"), axis=-1).reshape(-1, self.dim)


def bump(t) -> np.ndarray:
    """``exp(-1 / (1 - t^2))`` on ``|t| < 1``, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    inside = np.abs(t) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


@dataclass
class SubunitChart:
    """Chart ``Psi = Phi^{-1}`` around ``center`` with inner cube ``Phi(Q_rho)``."""

    center: np.ndarray
    block: UniversalBlock
    phi: NumericDiffeo
    stages: list = field(default_factory=list)
    cstar: float = CSTAR

    @property
    def sides(self) -> np.ndarray:
        return self.block.sides

    def lift(self, x) -> np.ndarray:
        """Representative of ``x`` nearest to the centre (unwrapped)."""
        return self.center + torus_delta(x, self.center)

    @cached_property
    def reach(self) -> np.ndarray:
        """Half-widths of a box around the centre holding the image of the dilated block."""
        n = len(self.center)
        axes = [np.linspace(-self.cstar * s, self.cstar * s, 9) for s in self.sides]
        w = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
        return 1.1 * np.abs(self.phi.forward(w) - self.center).max(axis=0)

    def psi(self, x) -> np.ndarray:
        """Chart coordinates; points outside :attr:`reach` map to ``inf``."""
        y = self.lift(x)
        near = np.all(np.abs(y - self.center) <= self.reach, axis=-1)
        if self.phi.is_affine or np.all(near):
            return self.phi.inverse(y)
        w = np.full(y.shape, np.inf)
        w[near] = self.phi.inverse(y[near])
        return w

    def to_torus(self, w) -> np.ndarray:
        return wrap(self.phi.forward(w))

    def in_inner(self, w) -> np.ndarray:
        return self.block.contains(w)

    def contains(self, x) -> np.ndarray:
        return self.in_inner(self.psi(x))

    def bump_weight(self, w) -> np.ndarray:
        return np.prod(bump(np.asarray(w) / self.sides), axis=-1)


def lattice_centers(lattice: Sequence[int]) -> np.ndarray:
    axes = [np.arange(k) / k for k in lattice]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lattice))


@dataclass
class Atlas:
    spec: OperatorSpec
    rho: float
    charts: list[SubunitChart]
    cstar: float = CSTAR

    @property
    def dim(self) -> int:
        return self.spec.dim

    def __len__(self) -> int:
        return len(self.charts)

    def coverage_gap(self, per_axis: int) -> np.ndarray:
        """Lattice points not contained in any inner cube."""
        pts = Torus(self.dim).grid(per_axis, offset=0.5)
        covered = np.zeros(len(pts), dtype=bool)
        for ch in self.charts:
            covered |= ch.contains(pts)
        return pts[~covered]

    @property
    def affine(self) -> bool:
        return all(ch.phi.is_affine for ch in self.charts)


def build_atlas(spec: OperatorSpec, rho: float, lattice, cstar: float = CSTAR,
                coverage_per_axis: int | None = None, check: bool = True) -> Atlas:
    """Charts centred on a lattice (sizes per axis, or explicit centres).

    Raises :class:`CoverageFailure` if the inner cubes miss a point of a fine
    test lattice.  Inner cubes must fit in a half period after dilation.
    """
    n = spec.dim
    lattice = np.asarray(lattice)
    centers = lattice_centers(lattice) if lattice.ndim == 1 and lattice.dtype.kind in "iu" else np.atleast_2d(lattice).astype(float)
    if check:
        check_periodic(spec)
        check_psd(spec, Torus(n).grid(32 if n <= 2 else 8, offset=0.5))
    charts = []
    for c in centers:
        res = build_block(spec, c, rho, domain_half=1.0, cstar=cstar)
        if np.any(cstar * res.block.sides >= 0.5):
            raise CoverageFailure(f"dilated block at {c} does not fit in a half period; lower rho")
        charts.append(SubunitChart(np.asarray(c, dtype=float), res.block, res.phi, res.stages, cstar))
    atlas = Atlas(spec, float(rho), charts, cstar)
    per_axis = coverage_per_axis or (512 if n == 1 else (128 if n == 2 else 32))
    missing = atlas.coverage_gap(per_axis)
    if len(missing):
        raise CoverageFailure(f"{len(missing)} test points uncovered, e.g. {missing[0]}")
    return atlas


class Density:
    """``mu = sum_k psi_k Psi_k^* |dw|`` normalized to mass one.

    ``psi_k`` are tensor bumps on the inner cubes divided by their sum, so the
    density is ``sum_k psi_k |det D Psi_k|`` up to the normalizing constant.
    """

    def __init__(self, atlas: Atlas, quad_per_axis: int = 256):
        self.atlas = atlas
        self.z = 1.0
        pts = Torus(atlas.dim).grid(quad_per_axis, offset=0.5)
        self.z = float(np.mean(self._raw(pts)))

    def _raw(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        num = np.zeros(len(x))
        den = np.zeros(len(x))
        for ch in self.atlas.charts:
            w = ch.psi(x)
            beta = ch.bump_weight(w)
            on = beta > 0
            if not np.any(on):
                continue
            num[on] += beta[on] / np.abs(ch.phi.det_jacobian(w[on]))
            den += beta
        if np.any(den <= 0):
            raise CoverageFailure("density evaluated outside every inner cube")
        return num / den / self.z

    def __call__(self, x) -> np.ndarray:
        return self._raw(x)

    def chart_density(self, i: int, w) -> np.ndarray:
        """``gamma_i(w) = rho_mu(Phi_i(w)) |det D Phi_i(w)|``."""
        ch = self.atlas.charts[i]
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return self(ch.to_torus(w)) * np.abs(ch.phi.det_jacobian(w))
