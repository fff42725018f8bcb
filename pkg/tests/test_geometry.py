import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subwalk import geometry as geo
from subwalk.operator import make_spec
from subwalk.reduction import UniversalBlock, build_block

LAPLACE = make_spec([["1", "0"], ["0", "1"]])
GRUSHIN = make_spec([["1", "0"], ["0", "x1^2"]], epsilon=0.5)


def test_local_cost_examples():
    assert geo.local_cost(LAPLACE, [0.1, 0.2], [0.3, 0.4], 1e-14) == pytest.approx(0.5)
    assert geo.local_cost(GRUSHIN, [0.0, 0.7], [0.0, 0.1], 1e-4) == pytest.approx(0.1 / np.sqrt(1e-4))
    assert geo.local_cost(GRUSHIN, [0.3, 0.1], [0.0, 0.0], 1e-3) == 0.0


def test_stencil_size():
    for n in (1, 2, 3):
        assert len(geo.stencil_offsets(n)) == 5 ** n - 1


def test_grid_validation():
    with pytest.raises(ValueError):
        geo.MetricGrid([0, 0], [1, 1], (8, 32))
    with pytest.raises(ValueError):
        geo.MetricGrid([0, 0], [1, 1], (32, 32), eps_reg=0.0)
    with pytest.raises(ValueError):
        geo.MetricGrid([0, 0], [1, 1], (32, 32), stencil=np.array([[1, 1], [-1, -1]]))


@pytest.fixture(scope="module")
def flat_field():
    grid = geo.box_grid([0.0, 0.0], [0.5, 0.5], 128)
    return geo.distance_map(LAPLACE, [0.0, 0.0], grid)


def test_laplace_distance_is_euclidean(flat_field):
    pts = flat_field.grid.points()
    r = np.linalg.norm(pts, axis=-1)
    far = r >= 10 * flat_field.grid.spacing[0]
    err = np.abs(flat_field.values[far] / r[far] - 1.0)
    assert err.max() < 0.05
    assert flat_field.at((64, 64)) == 0.0


def test_laplace_ball_is_a_disc(flat_field):
    mask = geo.ball(flat_field, 0.2)
    r = np.linalg.norm(flat_field.grid.points(), axis=-1)
    disc = r < 0.2
    assert np.sum(mask ^ disc) <= 0.05 * np.sum(disc)
    tiny = geo.ball(flat_field, 1e-9)
    assert tiny.sum() == 1


def test_grushin_vertical_distance_scales_like_sqrt():
    grid = geo.box_grid([0.0, 0.0], [0.6, 0.2], 128)
    f = geo.extrapolated_distance(GRUSHIN, [0.0, 0.0], grid)
    ys = grid.axes()[1]
    col = f.values[64]
    pick = [70, 80, 96, 128]
    ratio = col[pick] / np.sqrt(ys[pick])
    assert ratio.max() / ratio.min() < 1.5


def test_ballbox_laplace_is_isotropic():
    res = build_block(LAPLACE, [0.0, 0.0], 0.1)
    rep = geo.ballbox_check(LAPLACE, [0.0, 0.0], 0.1, res.block, res.phi, per_axis=128)
    assert 0.5 <= rep.c_in <= 2 and 0.5 <= rep.C_out <= 2


def test_ballbox_grushin_constants_stable():
    reps = []
    for rho in (0.05, 0.1):
        res = build_block(GRUSHIN, [0.0, 0.0], rho)
        reps.append(geo.ballbox_check(GRUSHIN, [0.0, 0.0], rho, res.block, res.phi, per_axis=128))
    c_out = [r.C_out for r in reps]
    assert max(c_out) / min(c_out) < 2


def test_wrong_exponent_collapses_inner_constant():
    rho = 0.1
    res = build_block(GRUSHIN, [0.0, 0.0], rho)
    good = geo.ballbox_check(GRUSHIN, [0.0, 0.0], rho, res.block, res.phi, per_axis=128)
    bad_block = UniversalBlock((1.0, 4.0), res.block.c, rho)
    bad = geo.ballbox_check(GRUSHIN, [0.0, 0.0], rho, bad_block, res.phi, per_axis=128,
                            eps_scale=min(res.block.sides / rho) ** 2)
    assert bad.c_in < 0.25 * good.c_in


@settings(max_examples=6, deadline=None)
@given(st.sampled_from([2.0, 10.0]), st.integers(0, 1000))
def test_distance_scales_with_operator(r, seed):
    rng = np.random.default_rng(seed)
    a, b = (float(v) for v in rng.uniform(0.5, 2.0, 2))
    spec = make_spec([[repr(a), "0"], ["0", f"{b!r}*x1^2 + 0.1"]])
    big = make_spec([[repr(r * r * a), "0"], ["0", f"{r * r * b!r}*x1^2 + {0.1 * r * r!r}"]])
    grid = geo.box_grid([0.0, 0.0], [0.3, 0.3], 32, eps_reg=1e-3)
    d1 = geo.distance_map(spec, [0.0, 0.0], grid).values
    d2 = geo.distance_map(big, [0.0, 0.0], grid.with_eps(1e-3 * r * r)).values
    assert np.allclose(d2, d1 / r, rtol=1e-12, atol=1e-15)


def test_distance_grows_as_regularization_shrinks():
    grid = geo.box_grid([0.0, 0.0], [0.3, 0.1], 48)
    maps = [geo.distance_map(GRUSHIN, [0.0, 0.0], grid.with_eps(e)).values for e in geo.EPS_SCHEDULE]
    assert np.all(maps[1] >= maps[0] - 1e-15) and np.all(maps[2] >= maps[1] - 1e-15)


def test_even_coefficients_give_symmetric_distance():
    grid = geo.box_grid([0.0, 0.0], [0.3, 0.3], 64)
    d = geo.distance_map(GRUSHIN, [0.0, 0.0], grid).values
    assert np.allclose(d, d[::-1, ::-1], atol=1e-12)


def test_source_outside_grid():
    grid = geo.box_grid([0.0, 0.0], [0.1, 0.1], 32)
    with pytest.raises(ValueError):
        geo.distance_map(LAPLACE, [0.5, 0.5], grid)
