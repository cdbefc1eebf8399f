"""Bound checks against series tables and Monte Carlo, collected in a report.

Every check records the inequality it tests, the tested domain, the worst
signed margin (relative to the right-hand side unless stated) and the witness
point where it occurs.  A check passes iff its worst margin is at least
``-tolerance``; Monte Carlo cells without ball hits are inconclusive and never
fail a check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import pathsim
from .kernel import envelope
from .model import HardCutoff, ModelSpec, PerturbationF
from .series import (
    ConstantLedger,
    Grid,
    SeriesEngine,
    SeriesTable,
    apply_truncated,
    build_ledger,
    build_series_table,
    semigroup_residual,
    symmetry_defect,
    tail_bound,
    truncated_columns,
)


@dataclass
class Check:
    name: str
    anchor: str
    domain: str
    margin: float
    tolerance: float = 0.0
    witness: Optional[tuple] = None
    detail: str = ""
    inconclusive: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -self.tolerance)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        extra = f" inconclusive={self.inconclusive}" if self.inconclusive else ""
        return (f"[{flag}] {self.name}: margin={self.margin:.4e} tol={self.tolerance:.1e} "
                f"witness={self.witness}{extra}\n    bound: {self.anchor}\n    domain: {self.domain}"
                + (f"\n    {self.detail}" if self.detail else ""))


@dataclass
class BoundReport:
    checks: list = field(default_factory=list)
    preamble: list = field(default_factory=list)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def extend(self, checks: Sequence[Check]):
        self.checks.extend(checks)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def text(self) -> str:
        lines = list(self.preamble)
        lines += [c.line() for c in self.checks]
        n_fail = sum(not c.passed for c in self.checks)
        lines.append(f"summary: {len(self.checks) - n_fail} passed, {n_fail} failed")
        lines.append("scope: results certify the tested grids only; the inequalities are claimed for all (t, x, z)")
        return "\n".join(lines) + "\n"


def _rel_margin(lhs: np.ndarray, rhs: np.ndarray):
    """Worst ``(rhs - lhs)/rhs`` and its index; zero-vs-zero entries count as satisfied."""
    lhs = np.asarray(lhs, float)
    rhs = np.asarray(rhs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(rhs > 0, (rhs - lhs) / rhs, np.where(lhs <= 0, np.inf, -np.inf))
    if m.size == 0:
        return math.inf, None
    idx = np.unravel_index(int(np.argmin(m)), m.shape)
    return float(m[idx]), idx


def _fmt_t(t):
    return "none found" if t is None else f"{t:.6g}"


def _table_witness(table: SeriesTable, n, idx):
    if idx is None:
        return None
    k, i, l = idx
    return (n, float(table.times[k]), float(table.x[i]), float(table.z[l]))


# ---------------------------------------------------------------------------
# table checks


def check_domination(table: SeriesTable, n_max: Optional[int] = None) -> Check:
    n_max = table.n_max if n_max is None else n_max
    worst, wit = math.inf, None
    for n in range(n_max + 1):
        gap = table.qbar[n] - np.abs(table.q[n])
        idx = np.unravel_index(int(np.argmin(gap)), gap.shape)
        if gap[idx] < worst:
            worst, wit = float(gap[idx]), _table_witness(table, n, idx)
    return Check("domination", "|q_n| <= qbar_n", f"full grid, n <= {n_max}", worst, 0.0, wit,
                 "margin is qbar_n - |q_n| (absolute)")


def check_symmetry(table: SeriesTable, n_max: Optional[int] = None) -> Check:
    n_max = table.n_max if n_max is None else n_max
    tol = 10.0 * table.quad_tol
    defects = [symmetry_defect(table, n) for n in range(n_max + 1)]
    worst = max(defects)
    return Check("symmetry", "qbar_n(t,x,z) = qbar_n(t,z,x)", f"target pairs, n <= {n_max}",
                 tol - worst, 0.0, (int(np.argmax(defects)),),
                 f"max defect {worst:.3e} against 10 x self-convergence {tol:.3e}")


def check_growth_bounds(table: SeriesTable, ledger: ConstantLedger, n_max: Optional[int] = None,
                        tolerance: float = 1e-9) -> list[Check]:
    """One entry per bound and order."""
    n_max = table.n_max if n_max is None else n_max
    K, d, alpha = ledger.K, ledger.d, ledger.alpha
    times = table.times
    out = []

    def upto(t):
        return times <= (t if t is not None else -1.0) + 1e-12

    def missing(name, anchor, tname):
        return Check(name, anchor, f"{tname} not found at this resolution", -math.inf, tolerance)

    # pointwise bound with a time blow-up
    sel = upto(ledger.t0)
    for n in range(n_max + 1):
        name, anchor = f"growth_pointwise[n={n}]", "qbar_n <= n! M K^n t^(-d/alpha)"
        if not sel.any():
            out.append(missing(name, anchor, "t0"))
            continue
        rhs = math.factorial(n) * ledger.M * K ** n * times[sel, None, None] ** (-d / alpha)
        m, idx = _rel_margin(table.qbar[n][sel], np.broadcast_to(rhs, table.qbar[n][sel].shape))
        out.append(Check(name, anchor, f"t <= t0 = {_fmt_t(ledger.t0)}", m, tolerance,
                         _table_witness(table, n, idx)))
    # Kato-weighted time integral
    for n in range(n_max + 1):
        name, anchor = f"growth_kato[n={n}]", "int_0^t int qbar_n(s,x,z) mu(dz) ds <= C_t n! K^n"
        if not sel.any():
            out.append(missing(name, anchor, "t0"))
            continue
        lhs = table.qbar_mu_time[n][sel]
        rhs = table.kato[sel, None] * math.factorial(n) * K ** n
        m, idx = _rel_margin(lhs, np.broadcast_to(rhs, lhs.shape))
        wit = None if idx is None else (n, float(times[sel][idx[0]]), float(table.x[idx[1]]))
        out.append(Check(name, anchor, f"t <= t0 = {_fmt_t(ledger.t0)}, report rows", m, tolerance, wit))
    # bounded test function
    sel2 = upto(ledger.t2)
    g = min(1.0 / ledger.D2, 1.0)
    for n in range(1, n_max + 1):
        name, anchor = f"growth_test_function[n={n}]", "int qbar_n g m <= C_tilde C_g C_t n! K^n, g = min(1/D2, 1)"
        if not sel2.any():
            out.append(missing(name, anchor, "t2"))
            continue
        lhs = g * table.qbar_mass[n][sel2]
        rhs = ledger.C_tilde * table.kato[sel2, None] * math.factorial(n) * K ** n
        m, idx = _rel_margin(lhs, np.broadcast_to(rhs, lhs.shape))
        wit = None if idx is None else (n, float(times[sel2][idx[0]]), float(table.x[idx[1]]))
        out.append(Check(name, anchor, f"t <= t2 = {_fmt_t(ledger.t2)}, C_g = 1", m, tolerance, wit))
    # envelope-shaped bound
    sel3 = upto(ledger.t3)
    for n in range(n_max + 1):
        name, anchor = f"growth_envelope[n={n}]", "qbar_n <= C_tilde1 n! K^n envelope(t, |x-z|)"
        if not sel3.any():
            out.append(missing(name, anchor, "t3"))
            continue
        rhs = ledger.C_tilde1 * math.factorial(n) * K ** n * table.envelope[sel3]
        m, idx = _rel_margin(table.qbar[n][sel3], rhs)
        out.append(Check(name, anchor, f"t <= t3 = {_fmt_t(ledger.t3)}", m, tolerance, _table_witness(table, n, idx)))
    return out


def half_domination_threshold(table: SeriesTable, k: int) -> tuple[Optional[float], float, Optional[tuple]]:
    """Largest grid time ``t1`` with ``qbar_1/k <= p/2`` up to it, worst margin there, witness."""
    ratio_ok = np.all(table.qbar[1] / k <= 0.5 * table.p + 1e-15, axis=(1, 2))
    bad = np.flatnonzero(~ratio_ok)
    last = table.times.size - 1 if bad.size == 0 else bad[0] - 1
    t1 = None if last < 0 else float(table.times[last])
    # worst point over the whole grid locates the first violation
    m, idx = _rel_margin(table.qbar[1] / k, 0.5 * table.p)
    return t1, m, _table_witness(table, 1, idx)


def check_half_domination(table: SeriesTable, ledger: ConstantLedger, k: Optional[int] = None) -> Check:
    """``qbar_1/k <= p/2`` for ``t <= t1``; ``t1`` must exist."""
    k = ledger.k if k is None else k
    t1, worst_all, wit_all = half_domination_threshold(table, k)
    if t1 is None:
        return Check("half_domination", "qbar_1/k <= p/2", f"k = {k}: no grid time satisfies the bound",
                     worst_all, 0.0, wit_all, "t1 not found at this resolution")
    sel = table.times <= t1 + 1e-12
    m, idx = _rel_margin(table.qbar[1][sel] / k, 0.5 * table.p[sel])
    detail = f"t1 = {t1:.6g}"
    if worst_all < 0:
        detail += f"; first violation beyond t1 at {wit_all} (margin {worst_all:.3e})"
    return Check("half_domination", "qbar_1/k <= p/2", f"k = {k}, t <= t1 = {t1:.6g}", m, 0.0,
                 _table_witness(table, 1, idx), detail)


# ---------------------------------------------------------------------------
# sandwich


@dataclass
class SandwichFit:
    C3: float
    C4: float
    C5: float
    C6: float
    t_star: float
    certified_until: float
    lower_min: float
    witness_lower: Optional[tuple]


def fit_sandwich(table: SeriesTable, ledger: ConstantLedger, engine: Optional[SeriesEngine] = None,
                 N: Optional[int] = None, compositions: int = 4) -> SandwichFit:
    """Fit ``C3..C6`` on ``t <= t*`` and extend to ``compositions * t*`` by composing tables.

    The upper constant uses ``sum |q_n|/n!`` plus the certified tail, which
    bounds ``q`` and does not shrink as ``|F|`` grows; the lower constant uses
    the signed partial sum minus the tail.
    """
    N = table.n_max if N is None else N
    if ledger.t3 is None:
        raise ValueError("t3 was not found; the tail is not certified anywhere on the grid")
    t_star = min(ledger.t3, table.grid.t_max / compositions)
    k_star = table.grid.time_index(t_star) if t_star >= table.grid.dt else 1
    t_star = k_star * table.grid.dt
    sel = slice(0, k_star)
    env = table.envelope[sel]
    tail = ledger.C_tilde1 * ledger.K ** (N + 1) / (1.0 - ledger.K) * env
    upper = (table.abs_sum(N)[sel] + tail) / env
    lower = (table.partial_sum(N)[sel] - tail) / env
    C5 = float(upper.max())
    idx = np.unravel_index(int(np.argmin(lower)), lower.shape)
    C3 = float(lower[idx])
    wit = _table_witness(table, N, idx)
    C4 = C6 = 0.0
    lower_min = C3
    if engine is not None and compositions > 1:
        eng = engine
        rows = table.rows
        vals = np.stack([truncated_columns(eng, N, k_star, z) for z in table.z], axis=1)
        xs = eng.y[rows][:, None]
        for m in range(2, compositions + 1):
            vals = apply_truncated(eng, vals, N, k_star)
            t = m * t_star
            env_m = np.asarray(envelope(t, np.abs(xs - table.z[None, :]), ledger.d, ledger.alpha))
            ratio = vals[rows] / env_m
            rmin, rmax = float(ratio.min()), float(ratio.max())
            lower_min = min(lower_min, rmin)
            if C3 > 0 and rmin > 0:
                C4 = max(C4, -math.log(rmin / C3) / t)
            if rmax > 0:
                C6 = max(C6, math.log(rmax / C5) / t)
    return SandwichFit(C3, C4, C5, C6, t_star, compositions * t_star, lower_min, wit)


def check_sandwich(table: SeriesTable, ledger: ConstantLedger, engine: Optional[SeriesEngine] = None,
                   N: Optional[int] = None, compositions: int = 4) -> tuple[Check, Optional[SandwichFit]]:
    anchor = "C3 e^(-C4 t) envelope <= q <= C5 e^(C6 t) envelope"
    try:
        fit = fit_sandwich(table, ledger, engine, N, compositions)
    except ValueError as exc:
        return Check("sandwich", anchor, "no certified range", -math.inf, 0.0, None, str(exc)), None
    margin = min(fit.C3, fit.lower_min)
    detail = (f"C3 = {fit.C3:.6g}, C4 = {fit.C4:.6g}, C5 = {fit.C5:.6g}, C6 = {fit.C6:.6g}; fitted on t <= {fit.t_star:.6g}, "
              f"extended by composition to t <= {fit.certified_until:.6g} (certified there only)")
    if not math.isfinite(fit.C5):
        margin = -math.inf
    return Check("sandwich", anchor, f"t <= {fit.certified_until:.6g}, report rows x targets", margin, 0.0,
                 fit.witness_lower, detail), fit


# ---------------------------------------------------------------------------
# Monte Carlo checks


def poisson_precheck(model: ModelSpec, pert: PerturbationF, k: int, t: float) -> float:
    """``P(N_t > k ln 2 / c)`` for the count of jumps that can charge ``A``."""
    if pert.is_zero:
        return 0.0
    delta = pert.certificate.delta if isinstance(pert.certificate, HardCutoff) else None
    if delta is None or pert.half_bound == 0:
        return 1.0
    lam = pathsim.large_jump_rate(model, delta, dominating=not model.is_constant_kernel)
    return float(stats.poisson.sf(math.floor(k * math.log(2.0) / pert.half_bound), lam * t))


def check_lower_holder(model: ModelSpec, pert: PerturbationF, ledger: ConstantLedger, mc_budget: int = 20000,
                       times: Sequence[float] = (0.05,), targets: Sequence[float] = (0.0, 0.5, 1.0),
                       radii: Sequence[float] = (0.01, 0.1, 1.0), x0: float = 0.0, seed: int = 1,
                       epsilon: float = 0.05, threads: int = 1) -> Check:
    """Monte Carlo panel for ``2^-k E[1_B(X_t)] <= E[e^(-A_t) 1_B(X_t)]``.

    Both sides come from the same paths; the check uses the per-path
    difference so its standard error accounts for the correlation.
    """
    anchor = "2^-k E_x[1_B] <= E_x[e^(-A_t) 1_B]"
    if not model.is_constant_kernel:
        return Check("lower_holder", anchor, "needs a constant-kernel baseline", -math.inf)
    t1 = ledger.t1
    if t1 is None:
        return Check("lower_holder", anchor, "t1 not found", -math.inf)
    eps = min(epsilon, pert.cutoff) if pert.cutoff > 0 else epsilon
    cfg = pathsim.PathConfig(epsilon=eps, t_horizon=max(times),
                             small_jump_mode=pathsim.SmallJumpMode.STABLE_REMAINDER)
    scale = 2.0 ** (-ledger.k)
    worst, wit, inconclusive = math.inf, None, 0
    trend = []
    for t in times:
        if t > t1 + 1e-12:
            continue
        pre = poisson_precheck(model, pert, ledger.k, t)
        blocks = pathsim.simulate(model, pert, cfg, [x0], t, mc_budget, seed, threads)
        A = np.concatenate([b.A[lo:hi] for b, lo, hi in blocks])
        X = np.concatenate([b.X[lo:hi] for b, lo, hi in blocks])[:, 0]
        for z in targets:
            for r in radii:
                inside = np.abs(X - z) <= r
                hits = int(inside.sum())
                if hits == 0:
                    inconclusive += 1
                    continue
                vol = pathsim.ball_measure(model, [z], r)
                diff = np.where(inside, np.exp(-A) - scale, 0.0) / vol
                mean = float(diff.mean())
                se = float(diff.std(ddof=1) / math.sqrt(diff.size))
                trend.append((t, z, r, float(np.where(inside, np.exp(-A), 0.0).mean() / vol)))
                margin = mean + 3.0 * se
                if margin < worst:
                    worst, wit = margin, (t, x0, z, r)
        trend.append(("precheck", t, pre))
    if worst is math.inf:
        worst = 0.0
    detail = "small-ball estimates (t, z, r, value): " + "; ".join(
        f"({a[0]:.3g},{a[1]:.3g},{a[2]:.3g},{a[3]:.4g})" for a in trend if a[0] != "precheck")
    detail += "; Poisson precheck P(N_t > k ln2/c): " + ", ".join(
        f"t={a[1]:.3g}: {a[2]:.2e}" for a in trend if a[0] == "precheck")
    return Check("lower_holder", anchor, f"x0 = {x0}, z in {list(targets)}, r in {list(radii)}, t in {list(times)}",
                 worst, 0.0, wit, detail, inconclusive)


def check_semigroup(model: ModelSpec, pert: PerturbationF, ledger: ConstantLedger, table: SeriesTable,
                    N: int = 6, t: float = 0.25, s: float = 0.25, points: Sequence[tuple] = ((0.0, 0.0), (0.5, 0.0), (1.0, -0.5))) -> Check:
    """``|int q^(N)(t) q^(N)(s) m - q^(N)(t+s)| <= 2 tail + 10 tol``."""
    worst, wit, details = math.inf, None, []
    for x, z in points:
        res = semigroup_residual(model, pert, N, t, s, x, z, table.grid)
        tails = tail_bound(ledger, N, t + s, abs(x - z)) + tail_bound(ledger, N, max(t, s), 0.0)
        budget = tails + 10.0 * table.quad_tol
        margin = budget - res
        details.append(f"({x},{z}): residual {res:.3e}, budget {budget:.3e}")
        if margin < worst:
            worst, wit = margin, (t, s, x, z)
    certified = ledger.t3 is not None and t + s <= ledger.t3 + 1e-12
    details.append("tails certified" if certified else "tails used outside t <= t3 (not certified)")
    return Check("semigroup", "int q(t,x,y) q(s,y,z) m(dy) = q(t+s,x,z)", f"N = {N}, t = {t}, s = {s}",
                 worst, 0.0, wit, "; ".join(details))


def check_series_moments(model: ModelSpec, pert: PerturbationF, table: SeriesTable, n_max: int = 3,
                         times: Sequence[float] = (0.25, 0.5), n_paths: int = 100000, seed: int = 11,
                         x0: float = 0.0, threads: int = 1) -> Check:
    """``int q_n(t,x,z) m(dz)`` against Monte Carlo moments of ``A_t``."""
    anchor = "int q_n(t,x,z) m(dz) = E_x[A_t^n]"
    if not pert.is_zero and not isinstance(pert.certificate, HardCutoff):
        return Check("series_vs_mc", anchor, "needs a hard cutoff so that A_t has finitely many terms",
                     0.0, 0.0, None, "skipped", 1)
    eps = pert.cutoff if 0 < pert.cutoff < math.inf else 0.5
    worst, wit, rows = math.inf, None, []
    i = table.row_index(x0)
    for t in times:
        cfg = pathsim.PathConfig(epsilon=eps, t_horizon=t)
        k = table.grid.time_index(t) - 1
        for n in range(1, n_max + 1):
            est = pathsim.moment_mc(model, pert, cfg, [x0], None, t, n, n_paths, pathsim.RngStream(seed), threads)
            quad = float(table.mass[n, k, i])
            tol = table.mass_tol * max(1.0, abs(quad))
            margin = tol + 3.0 * est.std_error - abs(quad - est.estimate)
            rows.append(f"n={n} t={t}: quad {quad:.6g} mc {est.estimate:.6g} +- {est.std_error:.2e}")
            if margin < worst:
                worst, wit = margin, (n, t, x0)
    return Check("series_vs_mc", anchor, f"n <= {n_max}, t in {list(times)}",
                 worst, 0.0, wit, "; ".join(rows))


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class VerifyOptions:
    K: float = 0.5
    n_max: int = 10
    growth_n_max: int = 6
    semigroup_N: int = 6
    compositions: int = 4
    mc_paths: int = 100000
    holder_paths: int = 20000
    seed: int = 1
    threads: int = 1
    include_mc: bool = True


def bounds_report(model: ModelSpec, pert: PerturbationF, grid: Grid = Grid(),
                  options: VerifyOptions = VerifyOptions()) -> tuple[BoundReport, SeriesTable, ConstantLedger]:
    """Build the table and ledger, then run every check."""
    from .series import engine_for

    table = build_series_table(model, pert, grid, options.n_max)
    ledger = build_ledger(model, pert, grid, options.K, table=table)
    report = BoundReport()
    report.preamble.append(f"# model {model.name}, perturbation {pert.name}")
    report.preamble.append(f"# grid: K = {grid.time_nodes}, space intervals = {grid.space_nodes}, R = {grid.radius}, "
                           f"t_max = {grid.t_max}; quadrature self-convergence {table.quad_tol:.3e}")
    report.preamble += [f"# diagnostic: {d}" for d in table.diagnostics]
    report.preamble.append(ledger.report().rstrip("\n"))
    report.add(check_domination(table, options.growth_n_max))
    report.add(check_symmetry(table, options.growth_n_max))
    report.extend(check_growth_bounds(table, ledger, options.growth_n_max))
    report.add(check_half_domination(table, ledger))
    eng = engine_for(model, pert, grid, options.n_max)
    report.add(check_sandwich(table, ledger, eng, options.n_max, options.compositions)[0])
    if options.semigroup_N <= options.n_max:
        report.add(check_semigroup(model, pert, ledger, table, options.semigroup_N))
    if options.include_mc and model.is_constant_kernel and model.dimension == 1:
        report.add(check_series_moments(model, pert, table, n_paths=options.mc_paths, seed=options.seed,
                                        threads=options.threads))
        if ledger.t1 is not None:
            report.add(check_lower_holder(model, pert, ledger, options.holder_paths,
                                          times=(min(0.05, ledger.t1),), seed=options.seed, threads=options.threads))
    return report, table, ledger
