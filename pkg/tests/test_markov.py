import math

import numpy as np
import pytest

from subwalk import expr as ex
from subwalk import markov as mk
from subwalk.manifold import Density, build_atlas
from subwalk.operator import make_spec
from subwalk.walk import chart_flows

# lowest eigenvalues of -(a u')' on the circle with a = v^2 m(x) / (6N), where
# m counts inner cubes over x (four charts of half-width 0.2 centred at k/4);
# computed once with a 4000-cell finite-volume discretization
LIMIT_EIGS_1D = np.array([0.0932854, 0.0932854, 0.3071798, 0.4771259, 0.8827244])

G1 = 1024


@pytest.fixture(scope="module")
def line():
    atlas = build_atlas(make_spec([["1"]]), 0.2, [4])
    dens = Density(atlas)
    return atlas, dens, chart_flows(atlas, dens)


@pytest.fixture(scope="module")
def chain(line):
    atlas, dens, flows = line
    return {h: mk.assemble(atlas, dens, flows, h, G1) for h in (0.1, 0.05)}


@pytest.fixture(scope="module")
def spectra(chain):
    return {h: mk.spectrum(M) for h, M in chain.items()}


def test_stochastic_and_symmetric(chain):
    for M in chain.values():
        assert np.allclose(M.S @ np.ones(M.size), 1.0, atol=1e-8)
        assert M.S.min() >= 0
        assert M.weights.sum() == pytest.approx(1.0)
        F = (M.S.T.multiply(M.weights)).T.toarray()
        assert np.allclose(F, F.T, atol=1e-15)


def test_spectrum_bounds(spectra):
    for s in spectra.values():
        assert s.values.max() <= 1 + 1e-8 and s.values.min() >= -1 - 1e-8
        assert s.values[0] == pytest.approx(1.0, abs=1e-10)
        assert s.values[1] < 1.0
        top = s.vectors[:, 0]
        assert np.ptp(top) <= 1e-8 * np.abs(top).max()


def test_low_spectrum_matches_limit_operator(spectra):
    h = 0.05
    s = spectra[h]
    scaled = (1.0 - s.values[1:6]) / h ** 2
    assert np.allclose(scaled, LIMIT_EIGS_1D, rtol=0.05)
    assert mk.spectral_gap(s) == pytest.approx(h ** 2 * scaled[0], rel=1e-12)


def test_degenerate_top_detected():
    s = mk.Spectrum(np.array([1.0, 1.0, 0.5]), None, True, 0.1, 1)
    with pytest.raises(mk.DegenerateTop):
        mk.spectral_gap(s)


def test_shift_invert_agrees_with_dense(line, monkeypatch):
    atlas, dens, flows = line
    M = mk.assemble(atlas, dens, flows, 0.2, 256)
    dense = mk.spectrum(M, vectors=False)
    monkeypatch.setattr(mk, "DENSE_MAX", 64)
    sparse = mk.spectrum(M, vectors=False, k=8)
    assert not sparse.complete
    assert np.allclose(sparse.values[:8], dense.values[:8], atol=1e-9)
    assert sparse.values[-1] == pytest.approx(dense.values[-1], abs=1e-8)


def test_kernel_bound_and_remainder(chain):
    for h, M in chain.items():
        delta = 0.05
        c, tau = mk.kernel_lower_bound(M, delta)
        assert c > 0 and 0 <= tau < 1
        P = M.dense()
        r = delta * h * G1
        k = np.arange(G1)
        d = np.abs((k[:, None] - k[None, :] + G1 // 2) % G1 - G1 // 2)
        R = P - c / h * M.cellvol * (d < r)
        assert R.min() >= -1e-12
        assert R.sum(axis=1).max() == pytest.approx(tau, abs=1e-9)


def test_eigenfunction_ratio_of_constant(spectra):
    s = spectra[0.1]
    assert mk.eigenfunction_linf(s, band=(1 - 1e-12, 1.0)) == pytest.approx(0.1 ** 0.5)
    r = mk.eigenfunction_linf(s)
    assert np.isfinite(r) and r > 0.1 ** 0.5


def test_weyl_counts(spectra):
    s = spectra[0.05]
    zetas = [0, 1, 2, 5, 10, 50, 100]
    counts = mk.weyl_count(s, zetas)
    assert counts[0] == 1
    assert np.all(np.diff(counts) >= 0)
    m, cprime, pts = mk.weyl_fit(s)
    assert m <= 0.5 + 0.5 and cprime > 0 and pts >= 3


def test_loglog_fit_exact_power():
    x = np.array([0.4, 0.2, 0.1, 0.05])
    slope, icpt, r2 = mk.loglog_fit(x, 3 * x ** 2)
    assert slope == pytest.approx(2.0) and icpt == pytest.approx(math.log(3)) and r2 == pytest.approx(1.0)


def test_generator_residual_scaling(line):
    atlas, _, flows = line
    res, pts = mk.generator_residual(atlas, flows, ex.parse("sin(2*pi*x1)"), [0.2, 0.1, 0.05])
    ratios = res[:-1] / res[1:]
    assert len(pts) > 0
    assert np.all((ratios > 3) & (ratios < 5))


def test_generator_constant_and_linear(line):
    atlas, _, flows = line
    res, _ = mk.generator_residual(atlas, flows, ex.parse("1"), [0.2, 0.1])
    assert np.all(res == 0)
    pts = mk.interior_points(flows, 0.1, 256)
    pts = pts[(pts[:, 0] > 0.3) & (pts[:, 0] < 0.7)]
    res, _ = mk.generator_residual(atlas, flows, ex.parse("2*x1 - 1"), [0.1, 0.05], points=pts)
    assert np.all(res < 1e-9)


def test_dirichlet_form_properties(chain):
    M = chain[0.05]
    x = M.points()
    u = np.sin(2 * np.pi * x[:, 0])
    v = np.cos(2 * np.pi * x[:, 0]) ** 2
    assert mk.dirichlet_form(M, np.ones(M.size), v) == pytest.approx(0.0, abs=1e-12)
    assert mk.dirichlet_form(M, u, v) == pytest.approx(mk.dirichlet_form(M, v, u), abs=1e-10)
    assert mk.dirichlet_form(M, u, u) > 0


def test_dirichlet_converges(line):
    atlas, _, flows = line
    f = ex.parse("sin(2*pi*x1)")
    lim = mk.dirichlet_limit(atlas, flows, f, f)
    # the limit form of sin(2 pi x) against a = v^2 m / (6N); m integrates to 1.6
    assert lim == pytest.approx(0.04 / 24 * 4 * np.pi ** 2 * 0.8, rel=1e-3)
    res = [abs(mk.dirichlet_exact(atlas, flows, h, f, f) - lim) for h in (0.4, 0.2, 0.1, 0.05)]
    assert all(b < a for a, b in zip(res, res[1:]))


@pytest.mark.parametrize("dim", [1, 2])
def test_frequency_split_fourier_mode(dim):
    G, k, width = 64, 3, 0.02
    x = (np.arange(G) / G)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    u = np.cos(2 * np.pi * k * grids[0]).ravel()
    uL, uH, h1, l2 = mk.frequency_split(u, G, dim, width)
    a = math.exp(-2 * math.pi ** 2 * width ** 2 * k ** 2)
    assert np.allclose(uL, a * u, atol=1e-12)
    assert h1 == pytest.approx(a * math.sqrt((1 + 4 * math.pi ** 2 * k ** 2) / 2))
    assert l2 == pytest.approx((1 - a) / math.sqrt(2))


def test_frequency_split_constant():
    _, uH, _, l2 = mk.frequency_split(np.full(32 * 32, 2.5), 32, 2, 0.05)
    assert np.abs(uH).max() < 1e-14 and l2 < 1e-14


def test_tv_decay(line):
    atlas, dens, flows = line
    M = mk.assemble(atlas, dens, flows, 0.2, 128)
    ks, D = mk.tv_decay(M, k_max=2 ** 16)
    assert ks[0] == 0 and D[0] == pytest.approx(1 - M.weights.min())
    assert np.all(np.diff(D) <= 1e-12)
    g = mk.spectral_gap(mk.spectrum(M, vectors=False))
    assert mk.fit_rate(ks, D) == pytest.approx(g, rel=0.2)


def test_step_length(line):
    _, _, flows = line
    assert mk.step_length(flows) == pytest.approx(0.2 / math.sqrt(3))
