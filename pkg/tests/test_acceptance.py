"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

import time

import numpy as np
import pytest

from subwalk import config as cfg
from subwalk import experiments as xp
from subwalk import geometry as geo
from subwalk.operator import make_spec
from subwalk.reduction import build_block

CONSTANT = ("laplace1d", "laplace2d")


@pytest.fixture(scope="session")
def reports():
    """Per config: spectrum, converge, generator and walk reports plus timings."""
    out = {}
    for name in cfg.BUNDLED:
        p = xp.Pipeline(cfg.load_bundled(name))
        entry = {}
        for cmd in ("spectrum", "converge", "generator", "walk"):
            t0 = time.perf_counter()
            entry[cmd] = xp.COMMANDS[cmd](p)
            entry[f"{cmd}_seconds"] = time.perf_counter() - t0
        entry["properties"] = xp.run_properties(p)
        out[name] = entry
        del p
    return out


def checks(reports, cmd, name_prefix, configs=cfg.BUNDLED):
    found = []
    for c in configs:
        for chk in reports[c][cmd].checks:
            if chk.name.startswith(name_prefix):
                found.append((c, chk))
    return found


def summarize(found):
    ok = all(chk.passed for _, chk in found) and bool(found)
    bad = [f"{c}: {chk.detail or chk.name}" for c, chk in found if not chk.passed]
    return ok, bad


def test_criterion_01_grushin_ballbox(record):
    spec = make_spec([["1", "0"], ["0", "x1^2"]], epsilon=0.5)
    rhos = (0.05, 0.1, 0.2)
    reps, times = [], []
    for rho in rhos:
        t0 = time.perf_counter()
        res = build_block(spec, [0.0, 0.0], rho)
        reps.append(geo.ballbox_check(spec, [0.0, 0.0], rho, res.block, res.phi, per_axis=256))
        times.append(time.perf_counter() - t0)
    c_in = np.array([r.c_in for r in reps])
    c_out = np.array([r.C_out for r in reps])
    hw2 = np.array([r.ball_halfwidths[1] for r in reps])
    slope = np.polyfit(np.log(rhos), np.log(hw2), 1)[0]
    ok = (c_in.max() / c_in.min() < 2 and c_out.max() / c_out.min() < 2 and abs(slope - 2.0) <= 0.25
          and max(times) < 60)
    record(1, "Grushin ball-box", ok,
           f"c_in {np.round(c_in, 4).tolist()}, C_out {np.round(c_out, 4).tolist()}, "
           f"x2 half-width exponent {slope:.3f}, max {max(times):.1f}s per rho")
    assert ok


def test_criterion_02_block_exponents(record):
    got = {}
    for k in (1, 2):
        spec = make_spec([["1", "0"], ["0", f"x1^{2 * k}"]], epsilon=1.0 / (k + 1))
        got[f"grushin k={k}"] = build_block(spec, [0.0, 0.0], 0.2).block.kappa
    for n in (1, 2, 3):
        a2 = [["1" if i == j else "0" for j in range(n)] for i in range(n)]
        got[f"laplace n={n}"] = build_block(make_spec(a2), [0.0] * n, 0.2).block.kappa
    expected = {"grushin k=1": (1.0, 2.0), "grushin k=2": (1.0, 3.0), "laplace n=1": (1.0,),
                "laplace n=2": (1.0, 1.0), "laplace n=3": (1.0, 1.0, 1.0)}
    ok = got == expected
    record(2, "block exponents", ok, ", ".join(f"{k}: {v}" for k, v in got.items()))
    assert ok


def test_criterion_03_markov_sanity(reports, record):
    names = ("row_sums", "spectrum_in_unit_interval", "dirichlet_psd", "nonnegative_entries", "top_simple",
             "top_constant")
    found = [f for n in names for f in checks(reports, "spectrum", n)]
    ok, bad = summarize(found)
    seconds = sum(reports[c]["spectrum_seconds"] for c in cfg.BUNDLED)
    ok = ok and seconds < 300
    record(3, "Markov operator sanity", ok,
           f"{len(found)} checks over {len(cfg.BUNDLED)} configs x 4 h, {seconds:.0f}s total" + (f"; {bad}" if bad else ""))
    assert ok


def test_criterion_04_lower_edge(reports, record):
    found = checks(reports, "spectrum", "lower_edge")
    ok, bad = summarize(found)
    record(4, "uniform lower spectral edge", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_05_gap_scaling(reports, record):
    found = checks(reports, "spectrum", "gap_slope")
    ok, _ = summarize(found)
    ok = ok and len(found) == len(cfg.BUNDLED)
    record(5, "gap scaling", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_06_weyl(reports, record):
    found = checks(reports, "spectrum", "weyl_exponent", CONSTANT)
    ok, _ = summarize(found)
    ok = ok and len(found) == len(CONSTANT)
    record(6, "counting estimate", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_07_kernel(reports, record):
    found = checks(reports, "converge", "kernel_")
    ok, bad = summarize(found)
    record(7, "kernel lower bound", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_08_eigenfunctions(reports, record):
    found = checks(reports, "converge", "eigenfunction_bound")
    ok, _ = summarize(found)
    record(8, "eigenfunction bound", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_09_generator(reports, record):
    found = checks(reports, "generator", "generator_limit")
    ok, bad = summarize(found)
    record(9, "generator limit", ok, f"ratios within [3, 5] for 3 functions x {len(found)} configs"
           + (f"; {bad}" if bad else ""))
    assert ok


def test_criterion_10_dirichlet(reports, record):
    found = checks(reports, "generator", "dirichlet_limit")
    ok, bad = summarize(found)
    record(10, "Dirichlet-form limit", ok, f"monotone residuals for 3 pairs x {len(found)} configs"
           + (f"; {bad}" if bad else ""))
    assert ok


def test_criterion_11_tv(reports, record):
    found = checks(reports, "converge", "tv_")
    ok, _ = summarize(found)
    rates = [f"{c} {chk.detail}" for c, chk in found if chk.name == "tv_rate"]
    record(11, "TV convergence", ok, "; ".join(rates))
    assert ok


def test_criterion_12_frequency_split(reports, record):
    found = checks(reports, "converge", "frequency_")
    ok, _ = summarize(found)
    record(12, "frequency split", ok, "; ".join(f"{c} {chk.detail}" for c, chk in found))
    assert ok


def test_criterion_13_properties(reports, record):
    found = checks(reports, "properties", "")
    found += checks(reports, "walk", "divfree") + checks(reports, "walk", "deterministic")
    found += checks(reports, "walk", "mc_stationary")
    ok, bad = summarize(found)
    record(13, "property suites", ok, f"{len(found)} checks (matrix subunit, OR fields, divergence, determinism, "
           f"Monte Carlo vs stationary)" + (f"; {bad}" if bad else ""))
    assert ok
