import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import levy_stable

from fkstable.kernel import (
    CauchyDensity,
    Envelope,
    FourierStableDensity,
    TableDensity,
    density_bar,
    envelope,
    make_evaluator,
    mass_bar,
    sandwich_ratio,
)
from fkstable.model import cauchy_model


def test_envelope_values():
    assert envelope(1.0, 0.5) == 1.0
    assert envelope(1.0, 2.0) == 0.25
    assert envelope(4.0, 0.0) == 0.25
    assert envelope(1.0, 2.0, d=3, alpha=0.5) == pytest.approx(0.5 ** 3.5)


def test_envelope_domain():
    with pytest.raises(ValueError):
        envelope(0.0, 1.0)
    with pytest.raises(ValueError):
        envelope(-1.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 10), st.floats(0, 50), st.floats(0, 50), st.floats(0.2, 1.9), st.integers(1, 3))
def test_envelope_monotone_positive(t, r1, r2, alpha, d):
    lo, hi = sorted((r1, r2))
    assert envelope(t, hi, d, alpha) <= envelope(t, lo, d, alpha)
    assert envelope(t, hi, d, alpha) > 0


def test_cauchy_values():
    c = CauchyDensity()
    assert c.density(1.0, 0.0, 0.0) == pytest.approx(1 / math.pi, rel=1e-15)
    assert c.density(1.0, 0.0, 1.0) == pytest.approx(1 / (2 * math.pi), rel=1e-15)
    assert density_bar(c, 1.0, 0.0, 1.0) == pytest.approx(1 / math.pi, rel=1e-15)
    assert density_bar(c, 1.0, 0.0, 0.0) == pytest.approx(2 / math.pi, rel=1e-15)
    with pytest.raises(ValueError):
        c.density(0.0, 0.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 20), st.floats(-30, 30), st.floats(-30, 30))
def test_density_bar_symmetric(t, x, y):
    c = CauchyDensity()
    assert density_bar(c, t, x, y) - density_bar(c, t, y, x) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-3, 20), st.floats(0, 1e3))
def test_cauchy_ratio_in_band(t, r):
    ratio = CauchyDensity().density(t, 0.0, r) / envelope(t, r)
    assert 1 / (2 * math.pi) - 1e-12 <= ratio <= 1 / math.pi + 1e-12


def test_sandwich_examples():
    c = CauchyDensity()
    env = Envelope(1, 1.0)
    lo, hi = sandwich_ratio(c.density, env, [1.0], [0.0])
    assert lo == hi == pytest.approx(1 / math.pi, rel=1e-15)
    fake = lambda t, x, y: env(t, np.abs(np.asarray(y) - np.asarray(x)))
    assert sandwich_ratio(fake, env, np.linspace(0.1, 3, 7), np.linspace(0, 9, 9)) == (1.0, 1.0)


def test_fourier_matches_cauchy():
    f = FourierStableDensity(1.0)
    c = CauchyDensity()
    t, r = np.meshgrid(np.linspace(0.1, 4, 60), np.linspace(0, 10, 201), indexing="ij")
    assert np.max(np.abs(f.density(t, 0.0, r) - c.density(t, 0.0, r))) < 1e-6
    assert f.density(1.0, 0.0, 0.0) == pytest.approx(1 / math.pi, abs=1e-6)


def test_fourier_antiderivatives_match_cauchy():
    f = FourierStableDensity(1.0)
    c = CauchyDensity()
    u = np.concatenate([np.linspace(-80, 80, 4001), [1e4, -1e5, np.inf, -np.inf]])
    for t in (0.01, 0.3, 2.0):
        assert np.max(np.abs(f.mass_between(t, 0.0, u) - c.mass_between(t, 0.0, u))) < 1e-9
        fin = u[np.isfinite(u)]
        assert np.max(np.abs(f.moment_between(t, 0.0, fin) - c.moment_between(t, 0.0, fin))) < 1e-9 * max(t, 1)


@pytest.mark.parametrize("alpha", [0.7, 1.5])
def test_fourier_against_reference_stable(alpha):
    f = FourierStableDensity(alpha)
    u = np.array([0.0, 0.3, 1.0, 2.5, 7.0, 30.0, 150.0])
    ref = levy_stable.pdf(u, alpha, 0.0)
    assert np.allclose(f.rho1(u), ref, rtol=1e-5, atol=1e-9)
    cdf = levy_stable.cdf(u[1:5], alpha, 0.0)
    assert np.allclose(f.cdf(1.0, u[1:5]), cdf, atol=1e-7)
    assert f.mass_between(2.0, -np.inf, np.inf) == pytest.approx(1.0, abs=1e-12)


def test_mass_conservation_cauchy():
    model = cauchy_model()
    ev = make_evaluator(model)
    for t in (0.01, 0.5, 3.0):
        assert mass_bar(model, ev, t, 0.7) == pytest.approx(2.0, abs=2e-3)


def _write_table(path, values_fn, ts, xs, ys):
    with open(path, "w") as fh:
        fh.write("t,x,y,p\n")
        for t in ts:
            for x in xs:
                for y in ys:
                    fh.write(f"{float(t)!r},{float(x)!r},{float(y)!r},{float(values_fn(t, x, y))!r}\n")


def test_user_table_roundtrip(tmp_path):
    c = CauchyDensity()
    ts, xs, ys = [0.5, 1.0, 2.0], np.linspace(-2, 2, 9), np.linspace(-3, 3, 13)
    path = tmp_path / "p.csv"
    _write_table(path, lambda t, x, y: float(c.density(t, x, y)), ts, xs, ys)
    tab = TableDensity.from_csv(path)
    assert tab.density(1.0, 0.5, -1.0) == pytest.approx(c.density(1.0, 0.5, -1.0), rel=1e-12)
    # linear in y between nodes
    mid = tab.density(1.0, 0.0, 0.25)
    assert mid == pytest.approx(0.5 * (c.density(1.0, 0, 0.0) + c.density(1.0, 0, 0.5)), rel=1e-12)
    with pytest.raises(ValueError, match="outside"):
        tab.density(3.0, 0.0, 0.0)


def test_user_table_clamps_negatives(tmp_path):
    path = tmp_path / "neg.csv"
    _write_table(path, lambda t, x, y: -0.1 if y > 0 else 0.2, [1.0, 2.0], [0.0, 1.0], [-1.0, 1.0])
    tab = TableDensity.from_csv(path)
    assert tab.density(1.5, 0.5, 1.0) == 0.0
    assert tab.negative_clamps == 1


def test_user_table_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,x,z,p\n1,0,0,1\n")
    with pytest.raises(ValueError, match="header"):
        TableDensity.from_csv(path)
