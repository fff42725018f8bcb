import numpy as np
import pytest

from subwalk.manifold import Density, build_atlas
from subwalk.operator import make_spec
from subwalk.walk import (cell_masses, chart_flows, check_divfree, divergence_residual, flow, h0, simulate, step,
                          uniform_draws)


@pytest.fixture(scope="module")
def flat():
    atlas = build_atlas(make_spec([["1"]]), 0.2, [4])
    return chart_flows(atlas, Density(atlas))


@pytest.fixture(scope="module")
def curved():
    atlas = build_atlas(make_spec([["1 + 0.5*sin(2*pi*x1)^2"]]), 0.2, [4])
    return chart_flows(atlas, Density(atlas))


@pytest.fixture(scope="module")
def flat2():
    atlas = build_atlas(make_spec([["1", "0"], ["0", "1"]]), 0.3, [3, 3])
    return chart_flows(atlas, Density(atlas))


def test_h0(flat):
    assert h0(flat) == pytest.approx(0.5)


def test_flow_zero_time(flat, curved):
    x = np.array([[0.1], [0.3]])
    assert np.allclose(flow(flat, 0, 0, x, 0.0), x)
    assert np.allclose(flow(curved, 1, 0, np.array([[0.27]]), 0.0), [[0.27]])


def test_constant_density_flow_is_translation(flat):
    fl = flat[2]
    w = np.array([[0.01], [-0.05]])
    assert np.allclose(fl.flow(w, 0, 0.3) - w, 0.3 * fl.v[0] / fl.gamma_const)


def test_curved_flow_is_reversible(curved):
    fl = curved[1]
    assert fl.gamma_const is None
    w = np.array([[0.05], [-0.1]])
    back = fl.flow(fl.flow(w, 0, 0.1), 0, -0.1)
    assert np.allclose(back, w, atol=1e-8)


def test_point_outside_chosen_cube_stays(flat):
    # chart 0 sits at 0; 0.5 is outside its inner cube
    x = np.array([[0.5]])
    u = np.array([[0.0, 0.0, 0.9, 0.0]])
    new, status = step(flat, x, u, 0.1)
    assert new[0, 0] == 0.5 and status[0] == 0


def test_interior_small_move_is_accepted(flat):
    x = np.array([[0.01]])
    u = np.array([[0.0, 0.0, 0.6, 0.0]])
    new, status = step(flat, x, u, 0.05)
    assert status[0] == 1
    assert new[0, 0] == pytest.approx(0.01 + 0.05 * 0.2 * 0.2)


def test_acceptance_lower_near_cube_boundary(flat):
    rng = np.random.default_rng(0)
    m = 100_000
    u = rng.random((m, 4))
    u[:, 0] = 0.0  # always chart 0, inner cube (-0.2, 0.2)
    h = 0.4
    rates = []
    for x0 in (0.0, 0.17):
        _, status = step(flat, np.full((m, 1), x0), u, h)
        rates.append((status == 1).mean())
    # exact acceptance probabilities: move h*t*0.2 must stay in (-0.2, 0.2)
    assert rates[1] < rates[0]
    assert rates[0] == pytest.approx(1.0, abs=1e-12)
    assert rates[1] == pytest.approx(0.5 + 0.03 / (2 * 0.08), abs=0.005)


def test_draws_do_not_depend_on_chunking():
    full = uniform_draws(7, 3, 40)
    assert np.array_equal(full[25:], uniform_draws(7, 3, 15, start=25))
    assert not np.array_equal(full, uniform_draws(7, 4, 40))


def test_simulation_is_deterministic(flat2):
    a = simulate(flat2, 0.2, 11, 4, 200, bins=4)
    b = simulate(flat2, 0.2, 11, 4, 200, bins=4)
    assert np.array_equal(a.final, b.final) and np.array_equal(a.histogram, b.histogram)
    c = simulate(flat2, 0.2, 12, 4, 200, bins=4)
    assert not np.array_equal(a.final, c.final)


def test_histogram_support_and_mass(flat2):
    stats = simulate(flat2, 0.3, 5, 16, 2000, bins=4, thin=100)
    assert np.all(stats.histogram > 0)
    assert stats.histogram.sum() == pytest.approx(1.0)
    assert stats.samples == 16 * 1500
    assert stats.paths.shape == (16, 20, 2)
    assert stats.per_chart.sum() == 16 * 2000
    assert stats.escaped == 0


def test_empirical_distance_to_mu_decreases(flat):
    mu = cell_masses(Density(flat[0].atlas), 8).ravel()
    tv = []
    for steps in (64, 256, 1024, 4096):
        st = simulate(flat, 0.4, 2, 64, steps, bins=8, x0=[0.05])
        tv.append(0.5 * np.abs(st.histogram.ravel() - mu).sum())
    assert all(b < a for a, b in zip(tv, tv[1:]))


def test_divergence_free(flat2, curved):
    assert check_divfree(flat2) == 0.0
    assert check_divfree(curved) <= 1e-12


def test_divergence_residual_controls():
    gamma = lambda w: 1.0 + 0.5 * np.sin(2 * np.pi * w[:, 0])
    pts = np.linspace(-0.4, 0.4, 9)[:, None]
    assert divergence_residual(gamma, lambda w: 0.3 / gamma(w), pts, 0) <= 1e-12
    # the un-normalized field is not divergence free for a nonconstant density
    assert divergence_residual(gamma, lambda w: np.full(len(w), 0.3), pts, 0) > 0.1


def test_cell_masses_sum_to_one(flat2):
    m = cell_masses(flat2[0].density, 5)
    assert m.shape == (5, 5)
    assert m.sum() == pytest.approx(1.0, abs=1e-9)
