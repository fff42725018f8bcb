"""Pipelines behind the CLI subcommands: each returns tables and pass/fail checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import expr as ex
from . import geometry as geo
from . import markov as mk
from .config import Experiment
from .manifold import Atlas, Density, build_atlas
from .operator import bracket_depth, is_subunit, matrix_subunit_violation, or_fields
from .reduction import build_block
from .walk import ChartFlow, cell_masses, chart_flows, check_divfree, h0, simulate

__all__ = ["Check", "Table", "Report", "Pipeline", "COMMANDS", "run"]

DOMAIN_HALF = 1.0


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[tuple]


@dataclass
class Report:
    command: str
    tables: list[Table] = field(default_factory=list)
    checks: list[Check] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str, passed, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)

    def extend(self, other: "Report") -> None:
        self.tables += other.tables
        self.checks += other.checks
        self.notes += other.notes


def _axis_cols(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{j + 1}" for j in range(n)]


def halving_stable(values, factor: float) -> bool:
    """No value grows by ``factor`` or more when ``h`` halves (values ordered by decreasing ``h``)."""
    v = np.asarray(values, dtype=float)
    return bool(np.all(np.isfinite(v)) and np.all(v[1:] < factor * v[:-1]))


class Pipeline:
    """Lazily built atlas, matrices and spectra for one experiment."""

    def __init__(self, exp: Experiment, seed: int | None = None):
        self.exp = exp
        self.seed = exp.walk["seed"] if seed is None else int(seed)
        self._matrices: dict = {}
        self._spectra: dict = {}

    @property
    def tol(self) -> dict:
        return self.exp.tolerances

    @property
    def hs(self) -> list[float]:
        return sorted(self.exp.walk["h"], reverse=True)

    @property
    def G(self) -> int:
        return int(self.exp.geometry["grid"])

    @cached_property
    def atlas(self) -> Atlas:
        g = self.exp.geometry
        return build_atlas(self.exp.spec, g["rho"], g["lattice"], cstar=g["cstar"])

    @cached_property
    def density(self) -> Density:
        return Density(self.atlas)

    @cached_property
    def flows(self) -> list[ChartFlow]:
        return chart_flows(self.atlas, self.density)

    @cached_property
    def h0(self) -> float:
        return h0(self.flows)

    def matrix(self, h: float, G: int | None = None) -> mk.MarkovMatrix:
        G = self.G if G is None else G
        key = (h, G)
        if key not in self._matrices:
            if h > self.h0 + 1e-12:
                raise ValueError(f"h = {h} exceeds h0 = {self.h0:.4g}")
            self._matrices[key] = mk.assemble(self.atlas, self.density, self.flows, h, G,
                                              nodes=self.exp.analysis["t_nodes"])
        return self._matrices[key]

    def spectrum(self, h: float, G: int | None = None) -> mk.Spectrum:
        G = self.G if G is None else G
        key = (h, G)
        if key not in self._spectra:
            self._spectra[key] = mk.spectrum(self.matrix(h, G), vectors=True)
        return self._spectra[key]

    def kernel_delta(self) -> float:
        d = self.exp.analysis.get("kernel_delta")
        if d:
            return float(d)
        return 0.25 * min(float(np.min(f.v / f.gamma_min)) for f in self.flows)


# ---------------------------------------------------------------- reduce

def run_reduce(p: Pipeline, grid_per_axis: int = 9) -> Report:
    exp = p.exp
    n = exp.dim
    rep = Report("reduce")
    g = exp.geometry
    base = build_block(exp.spec, g["base_point"], g["rho"], domain_half=DOMAIN_HALF)
    blk = base.block
    rep.notes.append(f"base point {tuple(g['base_point'])}: estimated kappa = "
                     f"({', '.join(f'{k:g}' for k in blk.kappa)}), c = ({', '.join(f'{c:.4g}' for c in blk.c)})")
    depth = bracket_depth(or_fields(exp.spec), np.asarray(g["base_point"], float))
    rep.notes.append(f"bracket depth of the normalized fields at the base point: {depth}; "
                     f"declared epsilon {exp.spec.epsilon:.4g}")
    rep.tables.append(Table("stages", ["stage", "pivot", "delta", "level", "r1", "residual", "scale", "side",
                                       "side_half", "affine"],
                            [(k + 1, s.selection.pivot, s.selection.delta, s.selection.level, s.r1, s.residual,
                              s.scale, s.side, base.sides_half[k], int(s.affine)) for k, s in enumerate(base.stages)]))
    axes = [np.linspace(-s, s, grid_per_axis) for s in blk.sides]
    w = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    x = base.phi.forward(w)
    rep.tables.append(Table("phi", [*_axis_cols("w", n), *_axis_cols("x", n)], [(*a, *b) for a, b in zip(w, x)]))
    rows = []
    for i, ch in enumerate(p.atlas.charts):
        resid = max(s.residual for s in ch.stages)
        rows.append((i, *ch.center, *ch.block.kappa, *ch.block.c, *ch.sides, int(ch.phi.is_affine), resid))
    rep.tables.append(Table("charts", ["chart", *_axis_cols("center", n), *_axis_cols("kappa", n),
                                       *_axis_cols("c", n), *_axis_cols("side", n), "affine", "residual"], rows))
    kmax = max(max(ch.block.kappa) for ch in p.atlas.charts)
    rep.check("kappa_bound", kmax <= 1.0 / exp.spec.epsilon + 0.25,
              f"max kappa {kmax:g}, 1/epsilon {1.0 / exp.spec.epsilon:.4g}")
    rep.check("coverage", True, f"{len(p.atlas)} charts cover the torus")
    rep.check("phi_origin", np.allclose(base.phi.forward(np.zeros(n)), g["base_point"], atol=1e-9))
    rep.notes.append(f"h0 = {p.h0:.6g}")
    return rep


# ---------------------------------------------------------------- ballbox

def run_ballbox(p: Pipeline) -> Report:
    exp = p.exp
    n = exp.dim
    rep = Report("ballbox")
    g = exp.geometry
    rows, fields = [], []
    rhos = sorted(g["ballbox_rhos"])
    kappas = []
    for rho in rhos:
        res = build_block(exp.spec, g["base_point"], rho, domain_half=DOMAIN_HALF)
        r = geo.ballbox_check(exp.spec, g["base_point"], rho, res.block, res.phi, per_axis=g["ballbox_grid"])
        rows.append((rho, r.c_in, r.C_out, *r.ball_halfwidths, *r.block_sides, *res.block.kappa))
        kappas.append(res.block.kappa)
        fields.append(r)
    rep.tables.append(Table("ballbox", ["rho", "c_in", "C_out", *_axis_cols("halfwidth", n),
                                        *_axis_cols("side", n), *_axis_cols("kappa", n)], rows))
    c_in = np.array([r[1] for r in rows])
    c_out = np.array([r[2] for r in rows])
    rep.check("ballbox_finite", all(f.passed for f in fields), f"c_in {c_in.round(4)}, C_out {c_out.round(4)}")
    fac = p.tol["stability"]
    rep.check("ballbox_stable", c_in.max() / c_in.min() < fac and c_out.max() / c_out.min() < fac,
              f"ratios {c_in.max() / c_in.min():.3f}, {c_out.max() / c_out.min():.3f}")
    hw = np.array([r[3:3 + n] for r in rows])
    for j in range(n):
        slope, _, _ = mk.loglog_fit(rhos, hw[:, j])
        target = kappas[0][j]
        rep.check(f"halfwidth_exponent_{j + 1}", abs(slope - target) <= 0.25,
                  f"slope {slope:.3f} vs kappa {target:g}")
    # distance field of the smallest ball, for plotting
    res = build_block(exp.spec, g["base_point"], rhos[0], domain_half=DOMAIN_HALF)
    span = np.abs(res.phi.jacobian(np.zeros(n))) @ res.block.sides
    grid = geo.box_grid(g["base_point"], 2.5 * span, g["ballbox_grid"])
    scale = float(np.min(res.block.sides / rhos[0]) ** 2)
    df = geo.extrapolated_distance(exp.spec, g["base_point"], grid, [e * scale for e in geo.EPS_SCHEDULE])
    pts = grid.points().reshape(-1, n)
    rep.tables.append(Table("distance", [*_axis_cols("x", n), "distance"],
                            [(*x, d) for x, d in zip(pts, df.values.ravel())]))
    return rep


# ---------------------------------------------------------------- walk

def run_walk(p: Pipeline) -> Report:
    exp = p.exp
    n = exp.dim
    w = exp.walk
    rep = Report("walk")
    h = max(w["h"])
    bins = w["bins"]
    stats = simulate(p.flows, h, p.seed, w["ensemble"], w["steps"], bins, w["start"], w["thin"])
    mu = cell_masses(p.density, bins)
    T = w["ensemble"]
    centers = (np.stack(np.meshgrid(*([np.arange(bins)] * n), indexing="ij"), -1).reshape(-1, n) + 0.5) / bins
    se = stats.per_trajectory.std(axis=0, ddof=1) / math.sqrt(T)
    rep.tables.append(Table("histogram", [*_axis_cols("center", n), "frequency", "mu_mass", "std_error"],
                            [(*c, f, m, s) for c, f, m, s in zip(centers, stats.histogram.ravel(), mu.ravel(), se)]))
    rep.tables.append(Table("chart_counts", ["chart", "accepted", "rejected", "escaped"],
                            [(i, *row) for i, row in enumerate(stats.per_chart.tolist())]))
    if stats.paths is not None:
        thin = w["thin"]
        rows = [(t, (k + 1) * thin, *stats.paths[t, k]) for t in range(T) for k in range(stats.paths.shape[1])]
        rep.tables.append(Table("trajectories", ["trajectory", "step", *_axis_cols("x", n)], rows))
    recorded = T * (w["steps"] - w["steps"] // 4)
    rep.check("histogram_mass", stats.samples == recorded, f"{stats.samples} samples, expected {recorded}")
    rep.check("no_escape", stats.escaped == 0, f"{stats.escaped} flow escapes (h = {h:g}, h0 = {p.h0:.4g})")
    tv = 0.5 * float(np.abs(stats.histogram.ravel() - mu.ravel()).sum())
    bound = p.tol["mc_sigma"] * 0.5 * float(se.sum())
    rep.check("mc_stationary", tv <= bound, f"TV {tv:.4g} <= {bound:.4g}")
    again = simulate(p.flows, h, p.seed, min(T, 2), min(w["steps"], 64), bins, w["start"])
    first = simulate(p.flows, h, p.seed, min(T, 2), min(w["steps"], 64), bins, w["start"])
    rep.check("deterministic", np.array_equal(again.final, first.final), "identical trajectories for equal seeds")
    div = check_divfree(p.flows)
    rep.check("divfree", div <= p.tol["divfree"], f"residual {div:.3g}")
    rep.notes.append(f"h = {h:g}, accepted {stats.accepted}, rejected {stats.rejected}, escaped {stats.escaped}")
    return rep


# ---------------------------------------------------------------- spectrum

def _constant_coefficients(exp: Experiment) -> bool:
    return all(isinstance(e, ex.Num) for row in exp.spec.a2 for e in row)


def run_spectrum(p: Pipeline) -> Report:
    exp = p.exp
    tol = p.tol
    rep = Report("spectrum")
    ev_rows, gap_rows, weyl_rows, fit_rows = [], [], [], []
    gaps, lows = [], []
    ok = {"rows": True, "edge": True, "psd": True, "nonneg": True, "simple": True, "const": True}
    for h in p.hs:
        M = p.matrix(h)
        S = p.spectrum(h)
        row_err = float(np.abs(np.asarray(M.S.sum(axis=1)).ravel() - 1.0).max())
        vals = S.values
        psd = float(1.0 - vals.max())
        try:
            g = mk.spectral_gap(S)
        except mk.DegenerateTop:
            g = float("nan")
            ok["simple"] = False
        top = S.vectors[:, 0]
        spread = float(np.ptp(top) / max(np.abs(top).max(), 1e-300))
        ok["rows"] &= row_err <= tol["row_sum"]
        ok["edge"] &= bool(vals.min() >= -1 - tol["spectrum_edge"] and vals.max() <= 1 + tol["spectrum_edge"])
        ok["psd"] &= psd >= -tol["psd"]
        ok["nonneg"] &= float(M.S.min()) >= -tol["nonneg"]
        ok["const"] &= spread <= 1e-6
        gaps.append(g)
        lows.append(float(vals.min()))
        ev_rows += [(h, k, v) for k, v in enumerate(vals)]
        gap_rows.append((h, g, g / h ** 2, float(vals.min()), M.asymmetry, row_err, float(M.S.min())))
        counts = mk.weyl_count(S, exp.analysis["zeta"])
        weyl_rows += [(h, z, int(c)) for z, c in zip(exp.analysis["zeta"], counts)]
        m, cprime, npts = mk.weyl_fit(S)
        fit_rows.append((h, m, cprime, npts))
    rep.tables += [
        Table("eigenvalues", ["h", "index", "eigenvalue"], ev_rows),
        Table("gaps", ["h", "gap", "gap_over_h2", "lambda_min", "asymmetry", "row_sum_error", "min_entry"], gap_rows),
        Table("weyl_counts", ["h", "zeta", "count"], weyl_rows),
        Table("weyl_fit", ["h", "exponent", "c_prime", "points"], fit_rows),
    ]
    rep.check("row_sums", ok["rows"])
    rep.check("spectrum_in_unit_interval", ok["edge"])
    rep.check("dirichlet_psd", ok["psd"])
    rep.check("nonnegative_entries", ok["nonneg"])
    rep.check("top_simple", ok["simple"])
    rep.check("top_constant", ok["const"])
    delta1 = 1.0 + min(lows)
    rep.check("lower_edge", delta1 >= tol["delta1"], f"delta1 = {delta1:.4f}")
    if len(p.hs) >= 2 and np.all(np.isfinite(gaps)):
        slope, _, r2 = mk.loglog_fit(p.hs, gaps)
        rep.check("gap_slope", abs(slope - 2.0) <= tol["gap_slope"] and r2 >= tol["gap_r2"],
                  f"slope {slope:.3f}, R^2 {r2:.5f}")
    fine = fit_rows[-1]
    if _constant_coefficients(exp):
        bound = exp.dim / 2 + tol["weyl_slack"]
        rep.check("weyl_exponent", np.isfinite(fine[1]) and fine[1] <= bound,
                  f"exponent {fine[1]:.3f} at h = {fine[0]:g} (bound {bound:g}), C' = {fine[2]:.4g}")
    else:
        rep.notes.append(f"Weyl exponent {fine[1]:.3f} at h = {fine[0]:g}, C' = {fine[2]:.4g}")
    return rep


# ---------------------------------------------------------------- converge

def run_converge(p: Pipeline) -> Report:
    exp = p.exp
    tol = p.tol
    rep = Report("converge")
    delta = p.kernel_delta()
    width = mk.step_length(p.flows)
    krows, erows, frows = [], [], []
    cs, taus, linf, uh, ul = [], [], [], [], []
    for h in p.hs:
        M = p.matrix(h)
        S = p.spectrum(h)
        c, tau = mk.kernel_lower_bound(M, delta)
        cs.append(c)
        taus.append(tau)
        krows.append((h, delta, c, tau))
        r = mk.eigenfunction_linf(S)
        linf.append(r)
        erows.append((h, r))
        hi, lo = _frequency_family(M, S, width)
        uh.append(hi)
        ul.append(lo)
        frows.append((h, hi, lo))
    rep.tables += [Table("kernel", ["h", "delta", "c_est", "tau"], krows),
                   Table("eigenfunction_linf", ["h", "max_ratio"], erows),
                   Table("frequency_split", ["h", "uH_over_h", "uL_H1"], frows)]
    rep.check("kernel_lower_bound", min(cs) > 0, f"min c_est {min(cs):.4g} over h")
    rep.check("kernel_remainder", max(taus) < 1, f"max tau {max(taus):.4f}")
    fac = tol["stability"]
    rep.check("eigenfunction_bound", halving_stable(linf, fac), f"ratios {np.round(linf, 4).tolist()}")
    rep.check("frequency_high", halving_stable(uh, fac), f"|uH|/h {np.round(uh, 4).tolist()}")
    rep.check("frequency_low", halving_stable(ul, fac), f"|uL|_H1 {np.round(ul, 4).tolist()}")
    h = exp.analysis["tv_h"]
    Mt = p.matrix(h, exp.analysis["tv_grid"])
    g = mk.spectral_gap(mk.spectrum(Mt, vectors=False))
    ks, D = mk.tv_decay(Mt, k_max=exp.analysis["k_max"])
    rate = mk.fit_rate(ks, D)
    rep.tables.append(Table("tv", ["k", "D"], list(zip(ks.tolist(), D.tolist()))))
    rep.check("tv_monotone", bool(np.all(np.diff(D) <= 1e-12)))
    rep.check("tv_rate", abs(rate / g - 1.0) <= tol["tv_rate"], f"rate {rate:.5g}, gap {g:.5g} (h = {h:g})")
    return rep


def _frequency_family(M: mk.MarkovMatrix, S: mk.Spectrum, width: float):
    """Largest ``|uH|/h`` and ``|uL|_H1`` over eigenvectors with ``lambda >= 1 - h^2``."""
    h = M.h
    hi = lo = 0.0
    for k in np.flatnonzero(S.values >= 1.0 - h ** 2):
        u = S.vectors[:, k]
        norm2 = float(np.sum(M.weights * u * u))
        energy = (1.0 - S.values[k]) / h ** 2 * norm2
        u = u / math.sqrt(norm2 + energy)
        _, _, h1, l2 = mk.frequency_split(u, M.grid, M.dim, h * width)
        hi = max(hi, l2 / h)
        lo = max(lo, h1)
    return hi, lo


# ---------------------------------------------------------------- generator

def run_generator(p: Pipeline) -> Report:
    exp = p.exp
    tol = p.tol
    rep = Report("generator")
    funcs = exp.test_functions()
    n = exp.dim
    rows, drows = [], []
    gen_ok, dir_ok = True, True
    details = []
    for f in funcs:
        e = ex.parse(f, n)
        res, pts = mk.generator_residual(p.atlas, p.flows, e, p.hs)
        rows += [(f, h, r, len(pts)) for h, r in zip(p.hs, res)]
        ratios = res[:-1] / res[1:]
        good = bool(np.all((ratios >= tol["generator_ratio_lo"]) & (ratios <= tol["generator_ratio_hi"])))
        gen_ok &= good
        details.append(f"{f}: {np.round(ratios, 3).tolist()}")
    rep.tables.append(Table("generator", ["function", "h", "residual", "points"], rows))
    rep.check("generator_limit", gen_ok, "; ".join(details))
    details = []
    for f in funcs:
        e = ex.parse(f, n)
        lim = mk.dirichlet_limit(p.atlas, p.flows, e, e)
        vals = [mk.dirichlet_exact(p.atlas, p.flows, h, e, e) for h in p.hs]
        res = np.abs(np.array(vals) - lim)
        drows += [(f, f, h, v, lim, r) for h, v, r in zip(p.hs, vals, res)]
        dir_ok &= bool(np.all(np.diff(res) < 0))
        details.append(f"{f}: {np.array2string(res, precision=3)}")
    rep.tables.append(Table("dirichlet", ["f", "g", "h", "B", "limit", "residual"], drows))
    rep.check("dirichlet_limit", dir_ok, "; ".join(details))
    # symmetry and B(1, phi) = 0 on the assembled matrix
    M = p.matrix(p.hs[-1])
    pts = M.points()
    u = ex.evaluate(ex.parse(funcs[0], n), pts)
    v = ex.evaluate(ex.parse(funcs[-1], n), pts)
    b_uv, b_vu = mk.dirichlet_form(M, u, v), mk.dirichlet_form(M, v, u)
    rep.check("dirichlet_symmetric", abs(b_uv - b_vu) <= tol["symmetry"] * max(1.0, abs(b_uv)),
              f"{b_uv:.12g} vs {b_vu:.12g}")
    one = mk.dirichlet_form(M, np.ones(len(pts)), v)
    rep.check("dirichlet_constant", abs(one) <= 1e-8, f"B(1, phi) = {one:.3g}")
    return rep


# ---------------------------------------------------------------- properties

def run_properties(p: Pipeline, samples: int = 1000) -> Report:
    exp = p.exp
    n = exp.dim
    rep = Report("properties")
    rng = np.random.default_rng(p.seed)
    worst = -np.inf
    for _ in range(samples):
        B = rng.standard_normal((n + 1, n + 1))
        a = B @ B.T * rng.uniform(0.1, 10.0)
        xi = rng.standard_normal((8, n + 1))
        worst = max(worst, matrix_subunit_violation(a, xi) / max(1.0, np.abs(a).max() * np.abs(xi).max() ** 2))
    rep.check("matrix_subunit", worst <= 1e-9, f"max scaled violation {worst:.3g} over {samples} matrices")
    pts = np.random.default_rng(1).random((512, n))
    rep.check("or_fields_subunit", is_subunit(exp.spec, or_fields(exp.spec), pts))
    return rep


COMMANDS = {
    "reduce": run_reduce,
    "ballbox": run_ballbox,
    "walk": run_walk,
    "spectrum": run_spectrum,
    "converge": run_converge,
    "generator": run_generator,
}


def run(command: str, p: Pipeline) -> Report:
    if command == "verify-all":
        rep = Report("verify-all")
        for name in ("reduce", "ballbox", "walk", "spectrum", "converge", "generator"):
            rep.extend(COMMANDS[name](p))
        rep.extend(run_properties(p))
        return rep
    return COMMANDS[command](p)
