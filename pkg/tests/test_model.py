import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkstable.model import (
    Baseline,
    HolderDecay,
    ModelSpec,
    NonFiniteValueError,
    ProbeConfig,
    cauchy_model,
    holder_perturbation,
    one_sided_perturbation,
    probe_pairs,
    symmetrize,
    threshold_perturbation,
    validate_model,
    with_half_bound,
    zero_perturbation,
)


def pt(*xs):
    return np.array(xs, dtype=float)[:, None]


def test_valid_models_have_empty_reports():
    assert validate_model(cauchy_model(), zero_perturbation()) == []
    assert validate_model(cauchy_model(), threshold_perturbation(0.1, 0.5)) == []
    assert validate_model(cauchy_model(), holder_perturbation(1.0, 1.5)) == []


def test_half_bound_violation_is_reported():
    pert = with_half_bound(threshold_perturbation(0.1, 0.5), 0.05)
    report = validate_model(cauchy_model(), pert)
    assert any(v.invariant == "half_bound violated" for v in report)
    bad = next(v for v in report if v.invariant == "half_bound violated")
    x, y = bad.witness
    assert abs(x[0] - y[0]) >= 0.5


def test_validation_is_deterministic():
    pert = with_half_bound(threshold_perturbation(0.1, 0.5), 0.05)
    assert validate_model(cauchy_model(), pert) == validate_model(cauchy_model(), pert)


def test_invariant_violations():
    base = cauchy_model()
    bad_alpha = ModelSpec(**{**base.__dict__, "alpha": 2.5})
    names = [v.invariant for v in validate_model(bad_alpha, zero_perturbation())]
    assert "alpha must lie in (0, 2)" in names
    assert "cauchy baseline requires d = 1 and alpha = 1" in names
    low_bar = ModelSpec(**{**base.__dict__, "c_bar": 0.1})
    assert any(v.invariant == "kernel outside [0, c_bar]" for v in validate_model(low_bar, zero_perturbation()))
    nondiag = threshold_perturbation(0.1, 0.5)
    leaky = type(nondiag)(lambda x, y: np.full(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]), 0.1),
                          0.1, nondiag.certificate)
    names = [v.invariant for v in validate_model(base, leaky)]
    assert "F does not vanish on the diagonal" in names
    assert "hard cutoff certificate violated" in names


def test_non_finite_value_names_point():
    base = cauchy_model()
    broken = ModelSpec(**{**base.__dict__, "reference_density": lambda x: np.where(x[..., 0] > 9.0, np.nan, 1.0)})
    with pytest.raises(NonFiniteValueError, match="probe point"):
        validate_model(broken, zero_perturbation())


def test_probe_grid_shape():
    x, y = probe_pairs(2, ProbeConfig(radius=5.0, n_pairs=1000))
    assert x.shape == y.shape and x.shape[1] == 2
    assert x.shape[0] >= 1000
    assert np.all(np.abs(x[:1000]) <= 5.0)


def test_symmetrize_examples():
    xs = pt(0.0, 0.0, 0.0, 1.0)
    ys = pt(0.7, -0.7, 0.3, 0.2)
    sym = symmetrize(threshold_perturbation(0.1, 0.5))
    assert np.allclose(sym.f_bar(xs, ys), [0.2, 0.2, 0.0, 0.2])
    assert sym.bound == pytest.approx(0.2)
    one = symmetrize(one_sided_perturbation(0.1, 0.5))
    assert np.allclose(one.f_bar(xs, ys), [0.1, 0.1, 0.0, 0.1])
    assert np.all(symmetrize(zero_perturbation()).f_bar(xs, ys) == 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.floats(0.05, 3))
def test_symmetrized_properties(c, delta):
    for pert in (threshold_perturbation(c, delta), one_sided_perturbation(c, delta), holder_perturbation(abs(c), 1.5)):
        sym = symmetrize(pert)
        x, y = probe_pairs(1)
        fb = sym.f_bar(x, y)
        assert np.array_equal(fb, sym.f_bar(y, x))
        assert np.all(np.abs(pert.f(x, y)) <= fb)
        assert np.all(fb <= sym.bound + 1e-15)


def test_holder_order_rule():
    pert = holder_perturbation(1.0, 0.8)
    assert isinstance(pert.certificate, HolderDecay)
    names = [v.invariant for v in validate_model(cauchy_model(), pert)]
    assert "holder exponent must exceed alpha" in names
