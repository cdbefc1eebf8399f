import io
import math

import numpy as np
import pytest

from fkstable.kernel import CauchyDensity
from fkstable.model import (
    cauchy_model,
    holder_perturbation,
    symmetrize,
    threshold_perturbation,
    zero_perturbation,
)
from fkstable.series import (
    Grid,
    build_ledger,
    build_series_table,
    c0_closed_form,
    graded_edges,
    kato_Ct,
    c0_partial_sum,
    mu_density,
    pointwise_table,
    qbar_n,
    qn,
    semigroup_residual,
    symmetry_defect,
    truncated_density,
)

SMALL = Grid(time_nodes=16, space_nodes=128)
LAM = 4.0 / math.pi  # rate of jumps of size >= 1/2 for the Cauchy kernel


def poisson_moment(n, c, t):
    m = LAM * t
    return {1: c * m, 2: c ** 2 * (m + m ** 2), 3: c ** 3 * (m + 3 * m ** 2 + m ** 3)}[n]


@pytest.fixture(scope="module")
def model():
    return cauchy_model()


@pytest.fixture(scope="module")
def table(model):
    return build_series_table(model, threshold_perturbation(0.1, 0.5), SMALL, n_max=4)


@pytest.fixture(scope="module")
def zero_table(model):
    return build_series_table(model, zero_perturbation(), SMALL, n_max=3, self_convergence=False)


def test_grid_layout():
    g = Grid()
    assert g.dt == 0.5 / 64
    assert g.times[0] == g.dt and g.times[-1] == 0.5
    assert g.nodes.size == 513 and g.h == 1 / 32
    assert np.allclose(g.nodes[g.targets], np.arange(-3, 3.01, 0.25))
    assert g.time_index(0.25) == 32
    c = g.coarsened()
    assert (c.time_nodes, c.space_nodes) == (32, 256)


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        Grid().time_index(0.001)
    with pytest.raises(ValueError):
        Grid().time_index(0.75)
    with pytest.raises(ValueError):
        Grid(target_spacing=0.3).targets
    with pytest.raises(ValueError):
        Grid(radius=2.0).check(1.0)
    with pytest.raises(ValueError):
        Grid(time_nodes=3).coarsened()


def test_graded_edges():
    e = graded_edges(0.0, 1.0, True, 0.5, 10)
    assert e[0] == 0.0 and e[-1] == 1.0
    assert np.all(np.diff(e) > 0)
    assert e[1] == pytest.approx(0.5 ** 10)
    r = graded_edges(0.0, 1.0, False, 0.5, 10)
    assert np.allclose(r, 1.0 - e[::-1])


def test_c0_closed_form():
    assert c0_closed_form(0.5, 1.0) == pytest.approx(math.e ** 2 - 1)
    assert c0_closed_form(0.5, 1e-9) == pytest.approx(2.0)
    assert c0_closed_form(0.5, 0.0) == 2.0
    partial = [c0_partial_sum(n, 0.5, 0.2) for n in range(1, 40)]
    assert np.all(np.diff(partial) >= 0)
    assert partial[-1] == pytest.approx(c0_closed_form(0.5, 0.2), rel=1e-14)


def test_order_zero_is_exact(table):
    cd = CauchyDensity()
    t = table.times[:, None, None]
    expect = cd.density(t, table.x[None, :, None], table.z[None, None, :])
    assert np.array_equal(table.q[0], expect)
    assert np.allclose(table.qbar[0], 2 * expect)


def test_masses_match_poisson_moments(table):
    i = table.row_index(0.0)
    for n in (1, 2, 3):
        for t in (0.25, 0.5):
            k = SMALL.time_index(t) - 1
            assert table.mass[n, k, i] == pytest.approx(poisson_moment(n, 0.1, t), rel=1e-3)


def test_domination(table):
    for n in range(1, 5):
        assert np.all(np.abs(table.q[n]) <= table.qbar[n] + 1e-15)


def test_zero_perturbation_collapses(zero_table):
    assert np.all(zero_table.q[1:] == 0)
    assert np.all(zero_table.qbar[1:] == 0)
    assert np.array_equal(zero_table.partial_sum(3), zero_table.p)


def test_amplitude_scaling(model):
    # a constant-valued F scales q_n by c^n exactly
    a = build_series_table(model, threshold_perturbation(0.1, 0.5), SMALL, n_max=3, self_convergence=False)
    b = build_series_table(model, threshold_perturbation(0.3, 0.5), SMALL, n_max=3, self_convergence=False)
    for n in (1, 2, 3):
        assert np.allclose(b.q[n], 3.0 ** n * a.q[n], rtol=1e-10, atol=1e-16)


def test_pointwise_matches_table(model, table):
    pert = threshold_perturbation(0.1, 0.5)
    i, l, k = table.row_index(0.5), table.target_index(1.0), SMALL.time_index(0.25) - 1
    assert qn(model, pert, 2, 0.25, 0.5, 1.0, SMALL) == pytest.approx(table.q[2, k, i, l], rel=1e-10)
    assert qbar_n(model, pert, 1, 0.25, 0.5, 1.0, SMALL) == pytest.approx(table.qbar[1, k, i, l], rel=1e-10)
    rows = pointwise_table(model, pert, [0, 1], [0.25], [0.5], [1.0], SMALL)
    assert rows[1][4] == pytest.approx(table.q[1, k, i, l], rel=1e-10)
    assert rows[0][4] == CauchyDensity().density(0.25, 0.5, 1.0)


def test_self_convergence_reported(table):
    sc = table.self_convergence
    assert set(sc) >= {"pointwise", "mass", "per_order"}
    assert len(sc["per_order"]) == table.n_max
    assert table.quad_tol == sc["pointwise"] < 1e-2


def test_symmetry_of_dominating_terms(table):
    for n in range(1, 5):
        assert symmetry_defect(table, n) <= 10 * table.quad_tol


def test_mu_density_closed_forms(model):
    sym = symmetrize(threshold_perturbation(0.1, 0.5))
    # Fbar = 0.2 on |w-y| >= 1/2: 2 * 0.2 * 2 = 0.8
    assert mu_density(model, sym, 0.0) == pytest.approx(0.8, rel=1e-9)
    # Fbar = 2 min(r,1)^1.5: 4 (int_0^1 r^-1/2 dr + int_1^inf r^-2 dr) = 12
    assert mu_density(model, symmetrize(holder_perturbation(1.0, 1.5)), 0.3) == pytest.approx(12.0, rel=1e-5)
    assert mu_density(model, symmetrize(zero_perturbation()), 0.0) == 0.0


def test_kato_Ct_linear_for_constant_mu(model):
    pert = threshold_perturbation(0.1, 0.5)
    for t in (0.25, 0.5):
        assert kato_Ct(model, pert, t, [0.0, 1.0], SMALL) == pytest.approx(1.6 * t, rel=1e-6)
    assert kato_Ct(model, zero_perturbation(), 0.25, [0.0]) == 0.0
    with pytest.raises(ValueError):
        kato_Ct(model, pert, 0.0, [0.0])


def test_ledger_constants(model, table):
    led = build_ledger(model, threshold_perturbation(0.1, 0.5), SMALL, table=table)
    assert led.L == pytest.approx(0.2)
    assert led.C0 == pytest.approx(2.459123, abs=1e-6)
    assert led.quad_const == pytest.approx(4 / math.pi)
    assert (led.D1, led.D2) == pytest.approx((1.998, 2.002))
    assert led.k == 173
    assert led.C_tilde == pytest.approx(4 / math.pi)
    assert led.C_tilde1 >= 1.0
    assert led.t0 is not None and led.t1 is not None and led.t3 is not None
    text = led.report()
    for name in ("C0 =", "t0 =", "k = 173", "C_tilde2 =", "t3 ="):
        assert name in text


def test_ledger_rejects_bad_K(model, table):
    with pytest.raises(ValueError):
        build_ledger(model, threshold_perturbation(0.1, 0.5), SMALL, K=1.0, table=table)


def test_truncated_density_zero_perturbation(model):
    v = truncated_density(model, zero_perturbation(), 6, 0.25, 0.3, -0.4, SMALL)
    assert abs(v.value - CauchyDensity().density(0.25, 0.3, -0.4)) <= 1e-12
    assert v.certified


def test_chapman_kolmogorov_defect(model):
    res = semigroup_residual(model, zero_perturbation(), 6, 0.25, 0.25, 0.0, 0.0, Grid())
    assert res <= 1e-3


def test_to_csv(table):
    buf = io.StringIO()
    table.to_csv(buf, orders=[1], header="# test\n", times=[0.25])
    lines = buf.getvalue().splitlines()
    assert lines[0] == "# test"
    assert lines[1] == "n,t,x,z,q,qbar"
    assert len(lines) == 2 + table.x.size * table.z.size
    assert all(line.startswith("1,0.25,") for line in lines[2:])
