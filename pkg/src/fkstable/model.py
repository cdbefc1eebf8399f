"""Process model, perturbation functional and their validation.

Callables follow one convention: points are arrays whose last axis has
length ``d``.  ``c2(x, y)`` and ``f(x, y)`` broadcast over leading axes and
return arrays of the broadcast leading shape; ``reference_density(x)``
likewise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import qmc


class Baseline(str, Enum):
    CAUCHY = "cauchy_closed_form"
    FOURIER = "fourier_1d"
    TABLE = "user_table"


@dataclass(frozen=True)
class ModelSpec:
    """Stable-like process with jump kernel ``2C(x,y)|x-y|^-(d+alpha) m(dy)``.

    ``kernel_constant`` and ``density_constant`` are set when ``2C`` and ``M``
    are constant; path simulation and the closed-form baselines rely on them.
    """

    dimension: int
    alpha: float
    c2: Callable
    c_bar: float
    reference_density: Callable
    m_lo: float
    m_hi: float
    baseline: Baseline
    envelope_lo: float
    envelope_hi: float
    kernel_constant: Optional[float] = None
    density_constant: Optional[float] = None
    table_path: Optional[str] = None
    omega_cutoff: float = 40.0
    fourier_nodes: int = 2 ** 14
    name: str = "custom"

    @property
    def is_constant_kernel(self) -> bool:
        return self.kernel_constant is not None and self.density_constant is not None


@dataclass(frozen=True)
class HardCutoff:
    """``F`` vanishes when ``|x - y| < delta``."""

    delta: float


@dataclass(frozen=True)
class HolderDecay:
    """``|F(x,y)| <= lam |x-y|^beta`` for ``|x-y| <= 1`` with ``beta > alpha``."""

    beta: float
    lam: float


Certificate = Union[HardCutoff, HolderDecay]


@dataclass(frozen=True)
class PerturbationF:
    """Two-point function ``F`` with ``|F| <= half_bound`` and a diagonal certificate.

    ``increment_only`` marks functions of ``y - x`` alone; ``amplitude`` is the
    scale parameter of the built-in families (informational).
    """

    f: Callable
    half_bound: float
    certificate: Optional[Certificate]
    is_zero: bool = False
    increment_only: bool = False
    amplitude: float = 0.0
    name: str = "custom"

    @property
    def cutoff(self) -> float:
        """Distance below which ``F`` vanishes (0 without a hard cutoff)."""
        if self.is_zero:
            return math.inf
        if isinstance(self.certificate, HardCutoff):
            return self.certificate.delta
        return 0.0


@dataclass(frozen=True)
class SymmetrizedModel:
    """``Fbar(w,y) = |F(w,y)| + |F(y,w)|`` with bound ``L``."""

    f_bar: Callable
    bound: float
    certificate: Optional[Certificate]
    is_zero: bool = False
    p_bar: bool = True


@dataclass(frozen=True)
class Violation:
    invariant: str
    witness: tuple
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.invariant} at {self.witness}: {self.detail}"


class NonFiniteValueError(ValueError):
    """A model callable returned a non-finite value at a probe point."""

    def __init__(self, what: str, point):
        self.point = point
        super().__init__(f"{what} is not finite at probe point {point}")


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(v, dtype=float) ** 2, axis=-1))


# ---------------------------------------------------------------------------
# built-ins


def stable_levy_constant(alpha: float) -> float:
    """``2C`` making ``2C|h|^-(1+alpha)`` the Levy density of ``exp(-t|w|^alpha)``."""
    return math.gamma(1.0 + alpha) * math.sin(math.pi * alpha / 2.0) / math.pi


def _const(value: float):
    def fn(x, y=None):
        x = np.asarray(x, dtype=float)
        if y is not None:
            shape = np.broadcast_shapes(x.shape[:-1], np.asarray(y).shape[:-1])
        else:
            shape = x.shape[:-1]
        return np.full(shape, value)

    return fn


def cauchy_model() -> ModelSpec:
    """Symmetric Cauchy process on the line with its closed-form density."""
    c = 1.0 / math.pi
    return ModelSpec(
        dimension=1, alpha=1.0, c2=_const(c), c_bar=c, reference_density=_const(1.0),
        m_lo=1.0, m_hi=1.0, baseline=Baseline.CAUCHY,
        envelope_lo=1.0 / (2.0 * math.pi), envelope_hi=1.0 / math.pi,
        kernel_constant=c, density_constant=1.0, name="cauchy",
    )


def stable_model(alpha: float, envelope_lo: float | None = None, envelope_hi: float | None = None,
                 omega_cutoff: float = 40.0, fourier_nodes: int = 2 ** 14) -> ModelSpec:
    """Symmetric ``alpha``-stable process on the line, density by Fourier inversion.

    Envelope constants default to a measured sandwich over a fixed grid.
    """
    c = stable_levy_constant(alpha)
    if envelope_lo is None or envelope_hi is None:
        from .kernel import FourierStableDensity, sandwich_ratio, Envelope

        ev = FourierStableDensity(alpha, omega_cutoff, fourier_nodes)
        lo, hi = sandwich_ratio(ev.density, Envelope(1, alpha), np.geomspace(0.05, 4, 12), np.concatenate(([0.0], np.geomspace(1e-2, 200, 30))))
        envelope_lo = lo if envelope_lo is None else envelope_lo
        envelope_hi = hi if envelope_hi is None else envelope_hi
    return ModelSpec(
        dimension=1, alpha=float(alpha), c2=_const(c), c_bar=c, reference_density=_const(1.0),
        m_lo=1.0, m_hi=1.0, baseline=Baseline.FOURIER, envelope_lo=envelope_lo,
        envelope_hi=envelope_hi, kernel_constant=c, density_constant=1.0,
        omega_cutoff=omega_cutoff, fourier_nodes=fourier_nodes, name=f"stable({alpha:g})",
    )


def isotropic_model(dimension: int, alpha: float, c2: float = 1.0) -> ModelSpec:
    """Constant-kernel model in ``d <= 3`` for path simulation (no density evaluator)."""
    return ModelSpec(
        dimension=dimension, alpha=float(alpha), c2=_const(c2), c_bar=c2,
        reference_density=_const(1.0), m_lo=1.0, m_hi=1.0, baseline=Baseline.FOURIER,
        envelope_lo=1.0, envelope_hi=1.0, kernel_constant=c2, density_constant=1.0,
        name=f"isotropic(d={dimension},alpha={alpha:g})",
    )


def table_model(path: str, alpha: float = 1.0, c2: float | None = None,
                envelope_lo: float | None = None, envelope_hi: float | None = None) -> ModelSpec:
    """Constant-kernel model on the line whose baseline density is a user CSV table.

    Envelope constants default to the sandwich measured on the table's own grid
    (all points with ``t > 0``).
    """
    c = stable_levy_constant(alpha) if c2 is None else c2
    if envelope_lo is None or envelope_hi is None:
        from .kernel import Envelope, TableDensity

        tab = TableDensity.from_csv(path)
        ts = tab.ts[tab.ts > 0]
        t, x, y = np.meshgrid(ts, tab.xs, tab.ys, indexing="ij")
        ratio = tab.density(t, x, y) / Envelope(1, alpha)(t, np.abs(x - y))
        envelope_lo = float(ratio.min()) if envelope_lo is None else envelope_lo
        envelope_hi = float(ratio.max()) if envelope_hi is None else envelope_hi
    return ModelSpec(
        dimension=1, alpha=float(alpha), c2=_const(c), c_bar=c, reference_density=_const(1.0),
        m_lo=1.0, m_hi=1.0, baseline=Baseline.TABLE, envelope_lo=envelope_lo, envelope_hi=envelope_hi,
        kernel_constant=c, density_constant=1.0, table_path=str(path), name=f"table({path})",
    )


def zero_perturbation() -> PerturbationF:
    return PerturbationF(_const(0.0), 0.0, HardCutoff(1.0), is_zero=True, increment_only=True, name="zero")


def threshold_perturbation(c: float, delta: float) -> PerturbationF:
    """``F(x,y) = c 1{|x-y| >= delta}``."""
    if c == 0:
        return zero_perturbation()

    def f(x, y):
        return np.where(_norm(np.asarray(y, float) - np.asarray(x, float)) >= delta, c, 0.0)

    return PerturbationF(f, abs(c), HardCutoff(delta), increment_only=True, amplitude=c,
                         name=f"threshold(c={c:g},delta={delta:g})")


def one_sided_perturbation(c: float, delta: float) -> PerturbationF:
    """``F(x,y) = c 1{y_1 - x_1 >= delta}``: only rightward jumps are charged."""

    def f(x, y):
        diff = np.asarray(y, float) - np.asarray(x, float)
        return np.where(diff[..., 0] >= delta, c, 0.0)

    return PerturbationF(f, abs(c), HardCutoff(delta), increment_only=True, amplitude=c,
                         name=f"onesided(c={c:g},delta={delta:g})")


def holder_perturbation(lam: float, beta: float) -> PerturbationF:
    """``F(x,y) = lam min(|x-y|, 1)^beta``, vanishing on the diagonal at order ``beta``."""

    def f(x, y):
        r = _norm(np.asarray(y, float) - np.asarray(x, float))
        return lam * np.minimum(r, 1.0) ** beta

    return PerturbationF(f, abs(lam), HolderDecay(beta, abs(lam)), increment_only=True,
                         amplitude=lam, name=f"holder(lam={lam:g},beta={beta:g})")


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ProbeConfig:
    radius: float = 10.0
    n_pairs: int = 1000


def probe_pairs(d: int, cfg: ProbeConfig = ProbeConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic probe pairs: an unscrambled Halton set plus near-diagonal pairs.

    Returns ``(x, y)`` arrays of shape ``(n, d)``.  The Halton part holds
    ``cfg.n_pairs`` pairs in ``[-R, R]^(2d)``; the structured part puts pairs at
    geometric distances ``1e-3 .. 2`` from 40 Halton base points so that cutoffs
    and diagonal decay are exercised.
    """
    pts = qmc.Halton(d=2 * d, scramble=False).random(cfg.n_pairs + 1)[1:]
    pts = (2.0 * pts - 1.0) * cfg.radius
    x, y = pts[:, :d], pts[:, d:]
    base = x[:40]
    dists = np.geomspace(1e-3, 2.0, 24)
    e = np.zeros(d)
    e[0] = 1.0
    near_x = np.repeat(base, 2 * dists.size, axis=0)
    offs = np.concatenate([dists, -dists])[:, None] * e
    near_y = near_x + np.tile(offs, (base.shape[0], 1))
    return np.vstack([x, near_x]), np.vstack([y, near_y])


def _finite(values, what, xs, ys=None):
    bad = ~np.isfinite(values)
    if np.any(bad):
        i = int(np.argmax(bad))
        point = (tuple(xs[i]),) if ys is None else (tuple(xs[i]), tuple(ys[i]))
        raise NonFiniteValueError(what, point)


def validate_model(model: ModelSpec, pert: PerturbationF, probes: ProbeConfig = ProbeConfig()) -> list[Violation]:
    """Check the sampled invariants of ``model`` and ``pert``; empty list when all hold.

    :raises NonFiniteValueError: when a callable is not finite at a probe point
    """
    report: list[Violation] = []
    d = model.dimension
    if not (isinstance(d, (int, np.integer)) and d >= 1):
        report.append(Violation("dimension must be a positive integer", (), f"d={d}"))
        return report
    if not (0.0 < model.alpha < 2.0):
        report.append(Violation("alpha must lie in (0, 2)", (), f"alpha={model.alpha}"))
    if not (0.0 < model.envelope_lo <= model.envelope_hi):
        report.append(Violation("envelope constants need 0 < M1 <= M2", (),
                                f"M1={model.envelope_lo}, M2={model.envelope_hi}"))
    if not (0.0 < model.m_lo <= model.m_hi):
        report.append(Violation("reference density bounds need 0 < m_lo <= m_hi", (),
                                f"m_lo={model.m_lo}, m_hi={model.m_hi}"))
    if model.baseline == Baseline.CAUCHY and (d != 1 or model.alpha != 1.0):
        report.append(Violation("cauchy baseline requires d = 1 and alpha = 1", (), f"d={d}, alpha={model.alpha}"))
    if model.baseline == Baseline.CAUCHY and not (model.kernel_constant is not None and model.density_constant == 1.0):
        report.append(Violation("cauchy baseline requires constant kernel and M = 1", (), ""))

    x, y = probe_pairs(d, probes)
    k = np.asarray(model.c2(x, y), dtype=float)
    _finite(k, "kernel c2", x, y)
    bad = (k < 0) | (k > model.c_bar * (1 + 1e-12))
    if np.any(bad):
        i = int(np.argmax(bad))
        report.append(Violation("kernel outside [0, c_bar]", (tuple(x[i]), tuple(y[i])), f"2C={k[i]:.6g}"))
    m = np.asarray(model.reference_density(x), dtype=float)
    _finite(m, "reference density", x)
    bad = (m < model.m_lo * (1 - 1e-12)) | (m > model.m_hi * (1 + 1e-12))
    if np.any(bad):
        i = int(np.argmax(bad))
        report.append(Violation("reference density outside [m_lo, m_hi]", (tuple(x[i]),), f"M={m[i]:.6g}"))

    report.extend(_validate_perturbation(pert, x, y))
    report.extend(certificate_order_violations(model, pert))
    return report


def _validate_perturbation(pert: PerturbationF, x: np.ndarray, y: np.ndarray) -> list[Violation]:
    report = []
    fx = np.asarray(pert.f(x, y), dtype=float)
    _finite(fx, "perturbation F", x, y)
    diag = np.asarray(pert.f(x, x), dtype=float)
    _finite(diag, "perturbation F", x, x)
    if np.any(diag != 0.0):
        i = int(np.argmax(diag != 0.0))
        report.append(Violation("F does not vanish on the diagonal", (tuple(x[i]), tuple(x[i])), f"F={diag[i]:.6g}"))
    tol = 1e-12 * max(pert.half_bound, 1e-300)
    bad = np.abs(fx) > pert.half_bound + tol
    if np.any(bad):
        i = int(np.argmax(np.abs(fx) - pert.half_bound))
        report.append(Violation("half_bound violated", (tuple(x[i]), tuple(y[i])),
                                f"|F|={abs(fx[i]):.6g} > {pert.half_bound:.6g}"))
    cert = pert.certificate
    r = _norm(y - x)
    if cert is None:
        report.append(Violation("missing diagonal certificate", (), "need HardCutoff or HolderDecay"))
    elif isinstance(cert, HardCutoff):
        if not cert.delta > 0:
            report.append(Violation("cutoff delta must be positive", (), f"delta={cert.delta}"))
        bad = (r < cert.delta) & (fx != 0.0)
        if np.any(bad):
            i = int(np.argmax(bad))
            report.append(Violation("hard cutoff certificate violated", (tuple(x[i]), tuple(y[i])),
                                    f"|x-y|={r[i]:.6g}, F={fx[i]:.6g}"))
    elif isinstance(cert, HolderDecay):
        bad = (r <= 1.0) & (np.abs(fx) > cert.lam * r ** cert.beta * (1 + 1e-12))
        if np.any(bad):
            i = int(np.argmax(bad))
            report.append(Violation("holder certificate violated", (tuple(x[i]), tuple(y[i])),
                                    f"|F|={abs(fx[i]):.6g} > {cert.lam * r[i] ** cert.beta:.6g}"))
    return report


def certificate_order_violations(model: ModelSpec, pert: PerturbationF) -> list[Violation]:
    """Holder certificates need ``beta > alpha`` for the diagonal integral to converge."""
    cert = pert.certificate
    if isinstance(cert, HolderDecay) and not cert.beta > model.alpha:
        return [Violation("holder exponent must exceed alpha", (), f"beta={cert.beta}, alpha={model.alpha}")]
    return []


def symmetrize(pert: PerturbationF) -> SymmetrizedModel:
    """Return ``Fbar(w,y) = |F(w,y)| + |F(y,w)|`` with ``L = 2 half_bound``."""
    f = pert.f

    def f_bar(w, y):
        return np.abs(f(w, y)) + np.abs(f(y, w))

    cert = pert.certificate
    if isinstance(cert, HolderDecay):
        cert = HolderDecay(cert.beta, 2.0 * cert.lam)
    return SymmetrizedModel(f_bar, 2.0 * pert.half_bound, cert, is_zero=pert.is_zero)


def with_half_bound(pert: PerturbationF, half_bound: float) -> PerturbationF:
    """Copy of ``pert`` declaring a different ``half_bound``."""
    return PerturbationF(pert.f, half_bound, pert.certificate, pert.is_zero,
                         pert.increment_only, pert.amplitude, pert.name)
