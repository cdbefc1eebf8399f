"""Baseline transition densities and the two-sided envelope.

One-dimensional evaluators take positions as plain float arrays.  Translation
invariant evaluators also expose ``mass_between`` and ``moment_between``,
the integrals of ``rho_t(u)`` and ``u rho_t(u)`` over ``[a, b]`` where
``rho_t(u) = p(t, x, x + u)``; product integration in :mod:`fkstable.series`
is built on them.
"""
from __future__ import annotations

import csv
import math
from functools import lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator
from scipy.special import gammaln

from .model import Baseline, ModelSpec


def envelope(t, r, d: int = 1, alpha: float = 1.0):
    """``t^(-d/alpha) min(1, t^(1/alpha)/r)^(d+alpha)``; equals ``t^(-d/alpha)`` at ``r = 0``.

    :raises ValueError: if any ``t <= 0``
    """
    t = np.asarray(t, dtype=float)
    r = np.abs(np.asarray(r, dtype=float))
    if np.any(t <= 0):
        raise ValueError("envelope needs t > 0")
    scale = t ** (1.0 / alpha)
    with np.errstate(over="ignore"):
        ratio = np.where(r > scale, scale / np.where(r > 0, r, 1.0), 1.0)
    out = t ** (-d / alpha) * ratio ** (d + alpha)
    return out if out.ndim else float(out)


class Envelope:
    """Callable envelope for fixed ``(d, alpha)``."""

    def __init__(self, d: int = 1, alpha: float = 1.0):
        self.d = d
        self.alpha = alpha

    def __call__(self, t, r):
        return envelope(t, r, self.d, self.alpha)

    def __repr__(self):
        return f"Envelope(d={self.d}, alpha={self.alpha})"


class CauchyDensity:
    """``p(t,x,y) = t / (pi (t^2 + (x-y)^2))``."""

    mode = Baseline.CAUCHY
    translation_invariant = True
    symmetric = True
    alpha = 1.0

    def rho(self, t, u):
        t = np.asarray(t, dtype=float)
        u = np.asarray(u, dtype=float)
        return t / (math.pi * (t * t + u * u))

    def density(self, t, x, y):
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ValueError("density needs t > 0")
        return self.rho(t, np.asarray(y, float) - np.asarray(x, float))

    def cdf(self, t, u):
        return 0.5 + np.arctan(np.asarray(u, float) / t) / math.pi

    def mass_between(self, t, a, b):
        a = np.asarray(a, float) / t
        b = np.asarray(b, float) / t
        # arctan(b) - arctan(a) without cancellation for large same-sign arguments
        with np.errstate(invalid="ignore"):
            ab = np.nan_to_num(a * b, nan=0.0)
            direct = np.arctan2(b - a, 1.0 + ab)
        out = np.where(1.0 + ab > 0, direct, np.arctan(b) - np.arctan(a)) / math.pi
        # half-lines: complement form keeps the far tail accurate
        with np.errstate(invalid="ignore"):
            out = np.where(np.isneginf(a), np.arctan2(1.0, -b) / math.pi, out)
            out = np.where(np.isposinf(b), np.arctan2(1.0, a) / math.pi, out)
        return out

    def moment_between(self, t, a, b):
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        return t / (2.0 * math.pi) * np.log1p((b - a) * (b + a) / (t * t + a * a))


class FourierStableDensity:
    """Symmetric stable density with characteristic function ``exp(-t|w|^alpha)``.

    Inversion runs at unit time, ``p(t,x,y) = s^-1 rho_1((y-x)/s)`` with
    ``s = t^(1/alpha)``.  The frequency range ``[0, W]`` uses
    ``W = omega_cutoff^(1/alpha)`` so the truncated integrand is below
    ``exp(-omega_cutoff)``; the trapezoid rule runs in ``v`` with ``w = W v^3``,
    which flattens the non-smooth origin of ``|w|^alpha``.  Beyond the
    resolved range the classical tail expansion takes over.
    """

    mode = Baseline.FOURIER
    translation_invariant = True
    symmetric = True

    def __init__(self, alpha: float, omega_cutoff: float = 40.0, nodes: int = 2 ** 14):
        if not 0.0 < alpha < 2.0:
            raise ValueError("alpha must lie in (0, 2)")
        self.alpha = float(alpha)
        self.omega_cutoff = float(omega_cutoff)
        self.nodes = int(nodes)
        self.w_max = self.omega_cutoff ** (1.0 / self.alpha)
        v = np.linspace(0.0, 1.0, self.nodes)
        omega = self.w_max * v ** 3
        weight = np.full(self.nodes, 1.0 / (self.nodes - 1))
        weight[0] = weight[-1] = 0.5 / (self.nodes - 1)
        self._omega = omega
        self._weight = weight * 3.0 * self.w_max * v ** 2 * np.exp(-omega ** self.alpha) / math.pi
        # one radian of phase per trapezoid step at most
        self.u_switch = float(min(60.0, 0.8 * (self.nodes - 1) / (3.0 * self.w_max)))
        self._n_series = 10 if self.alpha >= 1.0 else 90
        self._table = None

    # -- unit-time quantities -------------------------------------------------
    def _transform(self, u, kernel, chunk=256):
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty(u.shape)
        flat_u, flat_out = u.ravel(), out.reshape(-1)
        for lo in range(0, flat_u.size, chunk):
            uu = flat_u[lo:lo + chunk, None]
            flat_out[lo:lo + chunk] = kernel(uu, self._omega[None, :]) @ self._weight
        return out

    def rho1_direct(self, u):
        return self._transform(np.abs(u), lambda uu, w: np.cos(w * uu))

    def _g0_direct(self, u):
        with np.errstate(invalid="ignore", divide="ignore"):
            return self._transform(u, lambda uu, w: np.where(w > 0, np.sin(w * uu) / w, uu))

    def _g1_direct(self, u):
        def kern(uu, w):
            with np.errstate(invalid="ignore", divide="ignore"):
                half = np.sin(0.5 * w * uu)
                val = uu * np.sin(w * uu) / w - 2.0 * half * half / (w * w)
            return np.where(w > 0, val, 0.5 * uu * uu)

        return self._transform(u, kern)

    def _series_terms(self):
        k = np.arange(1, self._n_series + 1, dtype=float)
        ak = self.alpha * k
        sign = np.where(k % 2 == 1, 1.0, -1.0) * np.sin(math.pi * ak / 2.0)
        return k, ak, sign

    def _tail_density(self, u):
        k, ak, sign = self._series_terms()
        u = np.asarray(u, dtype=float)[..., None]
        logc = gammaln(ak + 1.0) - gammaln(k + 1.0)
        return np.sum(sign * np.exp(logc - (ak + 1.0) * np.log(u)), axis=-1) / math.pi

    def _tail_mass(self, u):
        """``P(X_1 > u)`` for ``u`` beyond the resolved range."""
        k, ak, sign = self._series_terms()
        u = np.asarray(u, dtype=float)[..., None]
        logc = gammaln(ak) - gammaln(k + 1.0)
        return np.sum(sign * np.exp(logc - ak * np.log(u)), axis=-1) / math.pi

    def _tail_moment(self, u):
        """``int_{u_switch}^u v rho_1(v) dv``."""
        k, ak, sign = self._series_terms()
        u = np.asarray(u, dtype=float)[..., None]
        u0 = self.u_switch
        coef = np.exp(gammaln(ak + 1.0) - gammaln(k + 1.0))
        expo = 1.0 - ak
        with np.errstate(divide="ignore", invalid="ignore"):
            power = np.where(np.abs(expo) > 1e-12,
                             (u ** expo - u0 ** expo) / np.where(np.abs(expo) > 1e-12, expo, 1.0),
                             np.log(u / u0))
        return np.sum(sign * coef * power, axis=-1) / math.pi

    def _build_table(self):
        # spacing 0.01 (1 + u/2): fine where rho bends, coarse in the tail
        v_end = 200.0 * math.log1p(self.u_switch / 2.0)
        v = np.linspace(0.0, v_end, int(math.ceil(v_end)) + 1)
        grid = 2.0 * np.expm1(v / 200.0)
        grid[-1] = self.u_switch
        rho = self.rho1_direct(grid)
        g0 = self._g0_direct(grid)
        g1 = self._g1_direct(grid)
        self._table = (
            CubicHermiteSpline(grid, g0, rho),
            CubicHermiteSpline(grid, g1, grid * rho),
            float(0.5 - g0[-1]),
            float(g1[-1]),
        )

    @property
    def table(self):
        if self._table is None:
            self._build_table()
        return self._table

    def rho1(self, u):
        u = np.abs(np.atleast_1d(np.asarray(u, dtype=float)))
        out = np.empty(u.shape)
        inner = u <= self.u_switch
        out[inner] = self.rho1_direct(u[inner])
        out[~inner] = self._tail_density(u[~inner])
        return out

    def g0(self, u):
        """``int_0^u rho_1``, odd in ``u``; ``+-1/2`` at ``+-inf``."""
        u = np.asarray(u, dtype=float)
        spline0, _, tail_at_switch, _ = self.table
        au = np.abs(u)
        inner = au <= self.u_switch
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            outer = 0.5 - self._tail_mass(np.where(inner | ~np.isfinite(au), self.u_switch * 2, au))
        outer = np.where(np.isinf(au), 0.5, outer)
        val = np.where(inner, spline0(np.where(inner, au, 0.0)), outer)
        return np.sign(u) * val

    def g1(self, u):
        """``int_0^u v rho_1(v) dv``, even in ``u``."""
        u = np.asarray(u, dtype=float)
        _, spline1, _, g1_switch = self.table
        au = np.abs(u)
        inner = au <= self.u_switch
        outer = g1_switch + self._tail_moment(np.where(inner, self.u_switch * 2, au))
        return np.where(inner, spline1(np.where(inner, au, 0.0)), outer)

    # -- public interface -----------------------------------------------------
    def rho(self, t, u):
        s = np.asarray(t, dtype=float) ** (1.0 / self.alpha)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(s.shape, u.shape)
        s_b = np.broadcast_to(s, shape)
        return self.rho1(np.broadcast_to(u, shape) / s_b).reshape(shape) / s_b

    def density(self, t, x, y):
        """Trapezoidal Fourier inversion (tail expansion far outside the bulk)."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise ValueError("density needs t > 0")
        out = self.rho(t, np.asarray(y, float) - np.asarray(x, float))
        return out if out.ndim else float(out)

    def cdf(self, t, u):
        return 0.5 + self.g0(np.asarray(u, float) / t ** (1.0 / self.alpha))

    def mass_between(self, t, a, b):
        s = t ** (1.0 / self.alpha)
        return self.g0(np.asarray(b, float) / s) - self.g0(np.asarray(a, float) / s)

    def moment_between(self, t, a, b):
        s = t ** (1.0 / self.alpha)
        return s * (self.g1(np.asarray(b, float) / s) - self.g1(np.asarray(a, float) / s))


@lru_cache(maxsize=8)
def fourier_evaluator(alpha: float, omega_cutoff: float = 40.0, nodes: int = 2 ** 14) -> FourierStableDensity:
    return FourierStableDensity(alpha, omega_cutoff, nodes)


class TableDensity:
    """Density interpolated from a rectangular ``(t, x, y)`` table.

    Interpolation is linear in each coordinate.  Negative interpolated values
    are clamped to zero and counted in ``negative_clamps``.
    """

    mode = Baseline.TABLE
    translation_invariant = False
    symmetric = False

    def __init__(self, ts, xs, ys, values):
        self.ts = np.asarray(ts, float)
        self.xs = np.asarray(xs, float)
        self.ys = np.asarray(ys, float)
        values = np.asarray(values, float)
        if values.shape != (self.ts.size, self.xs.size, self.ys.size):
            raise ValueError("table values must have shape (len(t), len(x), len(y))")
        if not np.all(np.isfinite(values)):
            raise ValueError("table contains non-finite densities")
        self._interp = RegularGridInterpolator((self.ts, self.xs, self.ys), values, method="linear", bounds_error=True)
        self.negative_clamps = 0

    @classmethod
    def from_csv(cls, path) -> "TableDensity":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(line for line in fh if not line.startswith("#"))
            header = [h.strip() for h in next(reader)]
            if header != ["t", "x", "y", "p"]:
                raise ValueError(f"table header must be t,x,y,p, got {','.join(header)}")
            for row in reader:
                if row:
                    rows.append([float(v) for v in row])
        data = np.asarray(rows)
        ts, xs, ys = (np.unique(data[:, i]) for i in range(3))
        if data.shape[0] != ts.size * xs.size * ys.size:
            raise ValueError("table is not a complete rectangular grid")
        order = np.lexsort((data[:, 2], data[:, 1], data[:, 0]))
        values = data[order, 3].reshape(ts.size, xs.size, ys.size)
        return cls(ts, xs, ys, values)

    def density(self, t, x, y):
        t, x, y = np.broadcast_arrays(np.asarray(t, float), np.asarray(x, float), np.asarray(y, float))
        pts = np.stack([t.ravel(), x.ravel(), y.ravel()], axis=-1)
        try:
            vals = self._interp(pts)
        except ValueError as exc:
            raise ValueError(f"query outside the density table range: {exc}") from None
        neg = vals < 0
        self.negative_clamps += int(np.count_nonzero(neg))
        vals = np.where(neg, 0.0, vals).reshape(t.shape)
        return vals if vals.ndim else float(vals)


def make_evaluator(model: ModelSpec):
    """Density evaluator for the model's baseline."""
    if model.dimension != 1:
        raise ValueError("density evaluation is one-dimensional")
    if model.baseline == Baseline.CAUCHY:
        return CauchyDensity()
    if model.baseline == Baseline.FOURIER:
        return fourier_evaluator(model.alpha, model.omega_cutoff, model.fourier_nodes)
    if model.baseline == Baseline.TABLE:
        if model.table_path is None:
            raise ValueError("user table baseline needs a table path")
        return TableDensity.from_csv(model.table_path)
    raise ValueError(f"unknown baseline {model.baseline}")


def density(model_or_evaluator, t, x, y):
    ev = _as_evaluator(model_or_evaluator)
    return ev.density(t, x, y)


def density_bar(model_or_evaluator, t, x, y):
    """``p(t,x,y) + p(t,y,x)``, symmetric in ``(x, y)`` by construction."""
    ev = _as_evaluator(model_or_evaluator)
    a = ev.density(t, x, y)
    b = ev.density(t, y, x)
    # order the sum so swapping x and y gives identical rounding
    return np.maximum(a, b) + np.minimum(a, b)


def _as_evaluator(obj):
    return make_evaluator(obj) if isinstance(obj, ModelSpec) else obj


def sandwich_ratio(density_fn, env, t_grid, r_grid) -> tuple[float, float]:
    """Min and max of ``density(t, 0, r) / envelope(t, r)`` over the grid."""
    tt, rr = np.meshgrid(np.asarray(t_grid, float), np.asarray(r_grid, float), indexing="ij")
    vals = np.asarray(density_fn(tt, np.zeros_like(rr), rr), float)
    ratio = vals / env(tt, rr)
    return float(ratio.min()), float(ratio.max())


def mass_bar(model: ModelSpec, ev, t: float, x: float) -> float:
    """``int pbar(t,x,y) M(y) dy`` by adaptive quadrature on the line."""
    scale = t ** (1.0 / model.alpha)

    def integrand(y):
        yy = np.atleast_1d(y)
        val = np.asarray(density_bar(ev, t, x, yy)) * model.reference_density(yy[:, None])
        return float(val[0])

    if isinstance(ev, TableDensity):
        ys = ev.ys
        vals = np.asarray(density_bar(ev, t, x, ys)) * model.reference_density(ys[:, None])
        return float(np.trapezoid(vals, ys))
    total = 0.0
    edges = [-math.inf, x - 50 * scale, x - scale, x, x + scale, x + 50 * scale, math.inf]
    for a, b in zip(edges[:-1], edges[1:]):
        total += quad(integrand, a, b, limit=200, epsabs=1e-12, epsrel=1e-10)[0]
    return total


def measured_mass_range(model: ModelSpec, ev, times, xs) -> tuple[float, float]:
    """Min and max of :func:`mass_bar` over ``times x xs``."""
    vals = [mass_bar(model, ev, float(t), float(x)) for t in times for x in xs]
    return float(min(vals)), float(max(vals))
