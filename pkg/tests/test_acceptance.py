"""Acceptance criteria at the stated tolerances; each test prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``.  The series tables are built
once per session on the default grid (64 time steps, 512 space intervals).
"""
import math
import time

import numpy as np
import pytest

from fkstable import cli
from fkstable.cli import identity_rows
from fkstable.kernel import CauchyDensity, Envelope, FourierStableDensity, sandwich_ratio
from fkstable.model import cauchy_model, threshold_perturbation, zero_perturbation
from fkstable.pathsim import PathConfig, RngStream, feynman_kac_mc, large_jump_rate, moment_mc
from fkstable.series import Grid, build_ledger, build_series_table, engine_for, semigroup_residual, symmetry_defect
from fkstable.verify import (
    check_domination,
    check_growth_bounds,
    check_half_domination,
    check_lower_holder,
    check_semigroup,
    check_series_moments,
    check_symmetry,
    fit_sandwich,
)

pytestmark = pytest.mark.slow

GRID = Grid()
C, DELTA = 0.1, 0.5


@pytest.fixture
def announce(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return emit


@pytest.fixture(scope="session")
def model():
    return cauchy_model()


@pytest.fixture(scope="session")
def pert():
    return threshold_perturbation(C, DELTA)


@pytest.fixture(scope="session")
def threshold_run(model, pert):
    start = time.perf_counter()
    table = build_series_table(model, pert, GRID, n_max=10)
    ledger = build_ledger(model, pert, GRID, table=table)
    return table, ledger, time.perf_counter() - start


@pytest.fixture(scope="session")
def zero_run(model):
    pert = zero_perturbation()
    table = build_series_table(model, pert, GRID, n_max=10, self_convergence=False)
    return table, build_ledger(model, pert, GRID, table=table)


def poisson_moment(n, lam_t):
    return {1: C * lam_t, 2: C ** 2 * (lam_t + lam_t ** 2), 3: C ** 3 * (lam_t + 3 * lam_t ** 2 + lam_t ** 3)}[n]


def jump_rate():
    """Rate of jumps with ``|h| >= delta``: ``int 2C |h|^-2 dh = 2C * 2 delta^-1``."""
    return (1.0 / math.pi) * 2.0 * DELTA ** -1.0


def test_c01_exact_identities(announce):
    start = time.perf_counter()
    rows = list(identity_rows(8, 1000, seed=2024))
    elapsed = time.perf_counter() - start
    exact = all(r[5] for r in rows)
    worst = max(r[4] for r in rows)
    ok = exact and worst <= 1e-10 and elapsed <= 10.0
    announce(1, ok, f"{len(rows)} expansions, exact={exact}, max float residual {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_c02_fourier_matches_cauchy(announce):
    start = time.perf_counter()
    ev = FourierStableDensity(1.0)
    t = np.linspace(0.1, 4.0, 40)[:, None]
    r = np.linspace(0.0, 10.0, 201)[None, :]
    err = float(np.max(np.abs(ev.density(t, 0.0, r) - CauchyDensity().density(t, 0.0, r))))
    elapsed = time.perf_counter() - start
    ok = err <= 1e-6 and elapsed <= 5.0
    announce(2, ok, f"max |p_fourier - p_cauchy| = {err:.2e} over 40 x 201 (t, r), {elapsed:.2f} s")
    assert ok


def test_c03_envelope_sandwich(announce):
    start = time.perf_counter()
    lo, hi = sandwich_ratio(CauchyDensity().density, Envelope(1, 1.0), np.geomspace(0.01, 100.0, 50),
                            np.linspace(0.0, 100.0, 50))
    elapsed = time.perf_counter() - start
    ok = lo >= 1 / (2 * math.pi) - 1e-9 and hi <= 1 / math.pi + 1e-9 and elapsed <= 1.0
    announce(3, ok, f"ratio in [{lo:.10f}, {hi:.10f}] vs [1/(2 pi), 1/pi], {elapsed:.3f} s")
    assert ok


def test_c04_compound_poisson(announce, model, pert):
    start = time.perf_counter()
    lam = jump_rate()
    assert lam == pytest.approx(large_jump_rate(model, DELTA), rel=1e-14)
    cfg = PathConfig(epsilon=DELTA, t_horizon=1.0)
    fk = feynman_kac_mc(model, pert, cfg, [0.0], None, 1.0, 100000, RngStream(1))
    exact = math.exp(-lam * (1 - math.exp(-C)))
    parts = [(abs(fk.estimate - exact), 3 * fk.std_error)]
    for n in (1, 2):
        est = moment_mc(model, pert, cfg, [0.0], None, 1.0, n, 100000, RngStream(1))
        parts.append((abs(est.estimate - poisson_moment(n, lam)), 3 * est.std_error))
    elapsed = time.perf_counter() - start
    ok = all(d <= s for d, s in parts) and elapsed <= 60.0
    announce(4, ok, f"lambda = {lam:.6f}; FK {fk.estimate:.5f} vs {exact:.5f}; "
                    + ", ".join(f"|diff|/3sigma = {d / s:.2f}" for d, s in parts) + f"; {elapsed:.1f} s")
    assert ok


def test_c05_series_vs_monte_carlo(announce, model, pert, threshold_run):
    table, _, build_time = threshold_run
    start = time.perf_counter()
    chk = check_series_moments(model, pert, table, n_max=3, times=(0.25, 0.5), n_paths=100000, seed=11)
    elapsed = build_time + time.perf_counter() - start
    ok = chk.passed and elapsed <= 600.0
    announce(5, ok, f"worst margin {chk.margin:.2e} (quad tol + 3 sigma - |diff|), mass tol {table.mass_tol:.1e}, "
                    f"{elapsed:.0f} s incl. table")
    assert ok, chk.detail


def test_c06_domination_and_symmetry(announce, threshold_run):
    table, _, _ = threshold_run
    dom = check_domination(table, 6)
    sym = check_symmetry(table, 6)
    worst_sym = max(symmetry_defect(table, n) for n in range(1, 7))
    ok = dom.passed and sym.passed
    announce(6, ok, f"domination margin {dom.margin:.2e}; symmetry defect {worst_sym:.2e} "
                    f"<= 10 x {table.quad_tol:.2e}")
    assert ok


def test_c07_growth_bounds(announce, threshold_run, tmp_path):
    table, ledger, _ = threshold_run
    checks = check_growth_bounds(table, ledger, 6)
    failed = [c.name for c in checks if not c.passed]
    rc = cli.main(["bounds-report", "--out", str(tmp_path / "report.txt")])
    ok = not failed and rc == 0
    announce(7, ok, f"{len(checks)} growth checks, failed {failed or 'none'}; "
                    f"t0={ledger.t0}, t2={ledger.t2}, t3={ledger.t3}; bounds-report exit {rc}")
    assert ok, (tmp_path / "report.txt").read_text() if rc else failed


def test_c08_half_domination(announce, threshold_run):
    table, ledger, _ = threshold_run
    chk = check_half_domination(table, ledger)
    ok = chk.passed and ledger.t1 is not None and ledger.t1 > 0
    announce(8, ok, f"k = {ledger.k}, t1 = {ledger.t1}, margin {chk.margin:.3f}")
    assert ok


def test_c09_lower_holder_chain(announce, model, pert, threshold_run):
    _, ledger, _ = threshold_run
    times = tuple(t for t in (0.01, 0.05) if t <= ledger.t1)
    chk = check_lower_holder(model, pert, ledger, mc_budget=20000, times=times)
    ok = chk.passed and bool(times)
    announce(9, ok, f"t in {times}, worst margin {chk.margin:.3e}, inconclusive cells {chk.inconclusive}")
    assert ok, chk.detail


def test_c10_semigroup(announce, model, pert, threshold_run):
    table, ledger, _ = threshold_run
    chk = check_semigroup(model, pert, ledger, table, N=6, t=0.25, s=0.25)
    ck = max(semigroup_residual(model, zero_perturbation(), 6, 0.25, 0.25, x, z, GRID)
             for x, z in ((0.0, 0.0), (0.5, 0.0), (1.0, -0.5)))
    ok = chk.passed and ck <= 1e-3
    announce(10, ok, f"threshold margin {chk.margin:.3e}; zero-F Chapman-Kolmogorov defect {ck:.2e}")
    assert ok, chk.detail


def test_c11_final_sandwich(announce, model, pert, threshold_run, zero_run):
    table, ledger, _ = threshold_run
    fit = fit_sandwich(table, ledger, engine_for(model, pert, GRID, 10), 10)
    ztable, zledger = zero_run
    zfit = fit_sandwich(ztable, zledger, engine_for(model, zero_perturbation(), GRID, 10), 10)
    e3 = abs(zfit.C3 * 2 * math.pi - 1)
    e5 = abs(zfit.C5 * math.pi - 1)
    ok = fit.C3 > 0 and math.isfinite(fit.C5) and e3 <= 0.01 and e5 <= 0.01
    announce(11, ok, f"threshold C3={fit.C3:.5f} C5={fit.C5:.5f} (t <= {fit.certified_until}); "
                     f"zero F: C3 rel err {e3:.2e}, C5 rel err {e5:.2e}")
    assert ok
