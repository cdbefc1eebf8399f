"""Perturbation series for the Feynman-Kac density by product quadrature.

Space is discretised with piecewise-linear hats ``psi_k`` on a uniform mesh of
``[-R, R]``; the two boundary hats are continued as constants to infinity so
the hats form an exact partition of unity on the line.  Operators act on
nodal vectors:

* ``P(s)[j, k] = M_k int p(s, y_j, w) psi_k(w) dw`` by exact product
  integration of the baseline density (``P(0) = I``),
* ``J_i[j, k] = int kappa_i(y_j, y) M(y) psi_k(y) dy`` with
  ``kappa_i = 2C F^i |w-y|^-(1+alpha)``, by Gauss panels split at the cutoff
  and graded geometrically toward the diagonal.

The recursion ``Q_n(t) = sum_i C(n,i) int_0^t P(s) J_i Q_{n-i}(t-s) ds``
runs on a uniform time grid with the trapezoid rule; the dominating family
uses ``Pbar = P + P^dual`` and ``Jbar_i`` built from ``c_bar Fbar^i``.  Applied
to the hat ``e_l`` the operator gives the kernel integrated against
``psi_l m``, so ``q_n(t, x_j, z_l) ~ (Q_n(t) e_l)_j / (M_l h)``.  Order zero is
reported with the exact density.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .jumpalgebra import binomial
from .kernel import Envelope, make_evaluator, measured_mass_range
from .model import HardCutoff, HolderDecay, ModelSpec, PerturbationF, SymmetrizedModel, symmetrize

MASS_EPS = 1e-3


@dataclass(frozen=True)
class Grid:
    """Uniform time and space grids plus reporting subsets.

    ``space_nodes`` counts mesh intervals, so halving both counts gives a
    nested coarse grid.  Targets ``z`` sit every ``target_spacing`` inside
    ``|z| <= target_radius``; rows are reported for ``|x| <= report_radius``.
    """

    t_max: float = 0.5
    time_nodes: int = 64
    radius: float = 8.0
    space_nodes: int = 512
    gamma: float = 0.7
    grading_levels: int = 60
    gauss_order: int = 6
    target_radius: float = 3.0
    target_spacing: float = 0.25
    report_radius: Optional[float] = None

    @property
    def dt(self) -> float:
        return self.t_max / self.time_nodes

    @property
    def h(self) -> float:
        return 2.0 * self.radius / self.space_nodes

    @property
    def times(self) -> np.ndarray:
        """``t_1 < ... < t_K``; the implicit ``t_0 = 0`` is not reported."""
        return self.dt * np.arange(1, self.time_nodes + 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(-self.radius, self.radius, self.space_nodes + 1)

    @property
    def window(self) -> np.ndarray:
        rr = self.radius / 2.0 if self.report_radius is None else self.report_radius
        return np.flatnonzero(np.abs(self.nodes) <= rr + 1e-12)

    @property
    def targets(self) -> np.ndarray:
        """Node indices of the target points ``z``."""
        stride = self.target_spacing / self.h
        if abs(stride - round(stride)) > 1e-9 or round(stride) < 1:
            raise ValueError("target spacing must be a positive multiple of the mesh width")
        stride = int(round(stride))
        mid = self.space_nodes // 2
        span = int(math.floor(self.target_radius / self.h + 1e-9)) // stride * stride
        return np.arange(mid - span, mid + span + 1, stride)

    def coarsened(self) -> "Grid":
        if self.time_nodes % 2 or self.space_nodes % 2:
            raise ValueError("coarsening needs even node counts")
        return replace(self, time_nodes=self.time_nodes // 2, space_nodes=self.space_nodes // 2)

    def check(self, alpha: float):
        if self.t_max <= 0 or self.time_nodes < 2 or self.space_nodes < 4:
            raise ValueError("grid needs t_max > 0, at least 2 time nodes and 4 space intervals")
        if self.radius < 5.0 * self.t_max ** (1.0 / alpha):
            raise ValueError(f"grid radius {self.radius} is below 5 t_max^(1/alpha)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("grading ratio must lie in (0, 1)")
        self.targets  # validates spacing

    def time_index(self, t: float) -> int:
        """Index ``k`` with ``t_k = t`` (1-based as in :attr:`times`)."""
        k = t / self.dt
        if abs(k - round(k)) > 1e-9 * max(1.0, k) or not 1 <= round(k) <= self.time_nodes:
            raise ValueError(f"time {t} is not on the grid (step {self.dt})")
        return int(round(k))

    def node_index(self, x: float) -> int:
        k = (x + self.radius) / self.h
        if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or not 0 <= round(k) <= self.space_nodes:
            raise ValueError(f"point {x} is not a mesh node (width {self.h})")
        return int(round(k))


# ---------------------------------------------------------------------------
# quadrature building blocks


def graded_edges(a: float, b: float, toward_a: bool, gamma: float, levels: int) -> np.ndarray:
    """Edges of ``[a, b]`` shrinking geometrically (ratio ``gamma``) toward one end."""
    frac = np.concatenate(([0.0], gamma ** np.arange(levels, 0, -1), [1.0]))
    if toward_a:
        return a + (b - a) * frac
    return b - (b - a) * frac[::-1]


def _gauss_on(edges: np.ndarray, xg: np.ndarray, wg: np.ndarray):
    a, b = edges[:-1], edges[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    pts = mid[:, None] + half[:, None] * xg[None, :]
    wts = half[:, None] * wg[None, :]
    return pts.ravel(), wts.ravel()


class JumpQuadrature:
    """Gauss points for ``int g(y) dy`` over the line, one set per mesh node ``w``.

    Each set is returned as finite-cell points (with their cell index) and two
    ray parts whose points carry the boundary hats.
    """

    def __init__(self, grid: Grid, cutoff: float, singular: bool, alpha: float):
        self.grid = grid
        self.cutoff = cutoff
        self.singular = singular
        self.alpha = alpha
        self.xg, self.wg = np.polynomial.legendre.leggauss(grid.gauss_order)

    def row(self, j: int):
        g = self.grid
        y = g.nodes
        w = y[j]
        edges = y
        extra = [e for e in (w - self.cutoff, w + self.cutoff) if np.isfinite(e) and y[0] < e < y[-1]]
        if extra:
            edges = np.union1d(edges, extra)
        idx = int(np.searchsorted(edges, w))
        parts = [edges[:idx]]
        if idx > 0:
            parts.append(graded_edges(edges[idx - 1], w, False, g.gamma, g.grading_levels)[1:])
        else:
            parts.append(np.array([w]))
        if idx < edges.size - 1:
            parts.append(graded_edges(w, edges[idx + 1], True, g.gamma, g.grading_levels)[1:])
            parts.append(edges[idx + 2:])
        all_edges = np.concatenate(parts)
        pts, wts = _gauss_on(all_edges, self.xg, self.wg)
        cell = np.clip(np.floor((pts - y[0]) / g.h).astype(np.int64), 0, g.space_nodes - 1)
        right = (pts - y[cell]) / g.h
        rays = [self._ray(w, y[0], -1.0), self._ray(w, y[-1], 1.0)]
        return pts, wts, cell, right, rays

    def _ray(self, w: float, end: float, direction: float):
        """Points ``y = w + direction * u`` for ``y`` beyond the mesh end ``end``."""
        g = self.grid
        u0 = abs(end - w)
        stops = [u0]
        if np.isfinite(self.cutoff) and self.cutoff > u0:
            stops.append(self.cutoff)
        u1 = stops[-1] + 1.0
        stops.append(u1)
        edges = np.asarray(stops, dtype=float)
        if u0 == 0.0 and self.singular:
            edges = np.concatenate((graded_edges(edges[0], edges[1], True, g.gamma, g.grading_levels), edges[2:]))
        pu, wu = _gauss_on(edges, self.xg, self.wg)
        # u = u1 / v on (0, 1], graded toward v = 0
        vedges = graded_edges(0.0, 1.0, True, 0.5, 40)
        pv, wv = _gauss_on(vedges, self.xg, self.wg)
        pu = np.concatenate((pu, u1 / pv))
        wu = np.concatenate((wu, wv * u1 / pv ** 2))
        return w + direction * pu, wu


def _evaluate_kernel_rows(model: ModelSpec, pert: PerturbationF, sym: SymmetrizedModel, grid: Grid, n_max: int):
    """Assemble ``J_i`` and ``Jbar_i`` for ``i = 1..n_max`` and the nodal Kato density ``h``."""
    y = grid.nodes
    n1 = y.size
    J = np.zeros((n_max, n1, n1))
    Jb = np.zeros((n_max, n1, n1))
    hmu = np.zeros(n1)
    if pert.is_zero:
        return J, Jb, hmu
    cert = pert.certificate
    cutoff = cert.delta if isinstance(cert, HardCutoff) else math.inf
    quad = JumpQuadrature(grid, cutoff, isinstance(cert, HolderDecay), model.alpha)
    d_alpha = 1.0 + model.alpha
    for j in range(n1):
        pts, wts, cell, right, rays = quad.row(j)
        ray_pts = [r[0] for r in rays]
        ray_wts = [r[1] for r in rays]
        allp = np.concatenate([pts, *ray_pts])
        allw = np.concatenate([wts, *ray_wts])
        wj = np.full((allp.size, 1), y[j])
        yp = allp[:, None]
        r = np.abs(allp - y[j])
        with np.errstate(divide="ignore"):
            base = np.where(r > 0, r ** (-d_alpha), 0.0)
        fvals = np.asarray(pert.f(wj, yp), dtype=float)
        fbar = np.asarray(sym.f_bar(wj, yp), dtype=float)
        c2 = np.asarray(model.c2(wj, yp), dtype=float)
        mref = np.asarray(model.reference_density(yp), dtype=float)
        hmu[j] = np.dot(allw, fbar * base)
        wk = allw * base * mref
        n_in = pts.size
        n_left = ray_pts[0].size
        hats_left = np.concatenate([1.0 - right, np.ones(n_left), np.zeros(allp.size - n_in - n_left)])
        hats_right = np.concatenate([right, np.zeros(n_left), np.ones(allp.size - n_in - n_left)])
        idx_left = np.concatenate([cell, np.zeros(n_left, np.int64), np.full(allp.size - n_in - n_left, n1 - 1)])
        idx_right = np.concatenate([cell + 1, np.zeros(n_left, np.int64), np.full(allp.size - n_in - n_left, n1 - 1)])
        fp = np.ones_like(fvals)
        fbp = np.ones_like(fbar)
        for i in range(n_max):
            fp = fp * fvals
            fbp = fbp * fbar
            val = wk * c2 * fp
            valb = wk * model.c_bar * fbp
            J[i, j] = np.bincount(idx_left, val * hats_left, n1) + np.bincount(idx_right, val * hats_right, n1)
            Jb[i, j] = np.bincount(idx_left, valb * hats_left, n1) + np.bincount(idx_right, valb * hats_right, n1)
    return J, Jb, hmu


def _hat_integrals(ev, s: float, y: np.ndarray, h: float, dual: bool) -> np.ndarray:
    """``A[j, k] = int rho(w - y_j) psi_k(w) dw`` for a translation invariant density."""
    n1 = y.size
    n = n1 - 1
    offs = h * np.arange(-n, n + 1)

    def i0(a, b):
        if dual:
            return ev.mass_between(s, -b, -a)
        return ev.mass_between(s, a, b)

    def i1(a, b):
        if dual:
            return -ev.moment_between(s, -b, -a)
        return ev.moment_between(s, a, b)

    d = offs
    interior = (i1(d - h, d) - (d - h) * i0(d - h, d)) / h + ((d + h) * i0(d, d + h) - i1(d, d + h)) / h
    jj, kk = np.meshgrid(np.arange(n1), np.arange(n1), indexing="ij")
    A = interior[kk - jj + n]
    b0 = y[0] - y  # left boundary hat relative offsets per row
    A[:, 0] = i0(np.full(n1, -np.inf), b0) + ((b0 + h) * i0(b0, b0 + h) - i1(b0, b0 + h)) / h
    bn = y[-1] - y
    A[:, -1] = (i1(bn - h, bn) - (bn - h) * i0(bn - h, bn)) / h + i0(bn, np.full(n1, np.inf))
    return A


class SeriesEngine:
    """Discrete operators for one (model, perturbation, grid) and the recursion driver."""

    def __init__(self, model: ModelSpec, pert: PerturbationF, grid: Grid, n_max: int, evaluator=None):
        if model.dimension != 1:
            raise ValueError("quadrature is one-dimensional")
        grid.check(model.alpha)
        self.model = model
        self.pert = pert
        self.sym = symmetrize(pert)
        self.grid = grid
        self.n_max = n_max
        self.ev = make_evaluator(model) if evaluator is None else evaluator
        y = grid.nodes
        self.y = y
        self.n1 = y.size
        self.m_nodes = np.asarray(model.reference_density(y[:, None]), dtype=float)
        self.weights = np.full(self.n1, grid.h)
        self.weights[[0, -1]] = 0.5 * grid.h
        self._build_transition()
        self.J, self.Jbar, self.hmu = _evaluate_kernel_rows(model, pert, self.sym, grid, n_max)

    def _transition_pair(self, s: float):
        ev = self.ev
        if s == 0.0:
            eye = np.eye(self.n1)
            return eye, eye
        if getattr(ev, "translation_invariant", False):
            A = _hat_integrals(ev, s, self.y, self.grid.h, dual=False)
            Ad = A if ev.symmetric else _hat_integrals(ev, s, self.y, self.grid.h, dual=True)
            return A * self.m_nodes[None, :], Ad * self.m_nodes[None, :]
        # sampled product rule for tabulated densities
        yy = self.y
        w = self.m_nodes * self.weights
        pt = np.asarray(ev.density(s, yy[:, None], yy[None, :]))
        pd = np.asarray(ev.density(s, yy[None, :], yy[:, None]))
        return pt * w[None, :], pd * w[None, :]

    def _build_transition(self):
        k1 = self.grid.time_nodes + 1
        n1 = self.n1
        self.symmetric = bool(getattr(self.ev, "symmetric", False))
        self.Pcat = np.empty((n1, k1 * n1))
        self.Pdual_cat = None if self.symmetric else np.empty((n1, k1 * n1))
        for k in range(k1):
            P, Pd = self._transition_pair(k * self.grid.dt)
            self.Pcat[:, k * n1:(k + 1) * n1] = P
            if self.Pdual_cat is not None:
                self.Pdual_cat[:, k * n1:(k + 1) * n1] = Pd
        if self.Pdual_cat is not None:
            self.Pbar_cat = self.Pcat + self.Pdual_cat
        else:
            self.Pbar_cat = None

    def transition(self, k: int, bar: bool = False) -> np.ndarray:
        n1 = self.n1
        if bar:
            if self.Pbar_cat is None:
                return 2.0 * self.Pcat[:, k * n1:(k + 1) * n1]
            return self.Pbar_cat[:, k * n1:(k + 1) * n1]
        return self.Pcat[:, k * n1:(k + 1) * n1]

    def propagate(self, V: np.ndarray, n_max: int, k_max: Optional[int] = None, bar: bool = False) -> np.ndarray:
        """Return ``Q[n, k] = Q_n(t_k) V`` for ``n <= n_max`` and ``k <= k_max``.

        ``Q[:, 0]`` is the ``t = 0`` limit: ``V`` (or ``2V`` for the dominating
        family) at order zero and zero above.
        """
        if n_max > self.n_max:
            raise ValueError(f"operators were built for n <= {self.n_max}")
        k_max = self.grid.time_nodes if k_max is None else k_max
        n1 = self.n1
        V = np.asarray(V, dtype=float).reshape(n1, -1)
        cols = V.shape[1]
        k1 = k_max + 1
        if bar and self.Pbar_cat is not None:
            Pcat, scale = self.Pbar_cat, 1.0
        else:
            Pcat, scale = self.Pcat, (2.0 if bar else 1.0)
        Js = self.Jbar if bar else self.J
        dt = self.grid.dt
        Q = np.zeros((n_max + 1, k1, n1, cols))
        for k in range(k1):
            Q[0, k] = scale * (Pcat[:, k * n1:(k + 1) * n1] @ V)
        if self.pert.is_zero:
            return Q
        for n in range(1, n_max + 1):
            R = np.zeros((k1, n1, cols))
            for i in range(1, n + 1):
                R += binomial(n, i) * np.matmul(Js[i - 1], Q[n - i])
            Rflip = R[::-1]
            for k in range(1, k1):
                blk = Rflip[k_max - k:].reshape((k + 1) * n1, cols)
                full = Pcat[:, :(k + 1) * n1] @ blk
                ends = R[k] + Pcat[:, k * n1:(k + 1) * n1] @ R[0]
                Q[n, k] = dt * scale * (full - 0.5 * ends)
        return Q


# ---------------------------------------------------------------------------
# tables


@dataclass
class SeriesTable:
    """Grid samples of ``q_n`` and ``qbar_n`` with integrated columns.

    Arrays are indexed ``[n, k, i, l]``: order ``n``, time ``t_k`` (``k = 0..K-1``
    for ``t_1..t_K``), report row ``x_i`` and target ``z_l``.
    """

    grid: Grid
    n_max: int
    times: np.ndarray
    x: np.ndarray
    z: np.ndarray
    rows: np.ndarray
    target_nodes: np.ndarray
    q: np.ndarray
    qbar: np.ndarray
    mass: np.ndarray  # int q_n(t, x, z) m(dz), [n, k, i]
    qbar_mass: np.ndarray  # int qbar_n m(dz)
    qbar_mu: np.ndarray  # int qbar_n(t, x, z) mu(dz)
    qbar_mu_time: np.ndarray  # int_0^t int qbar_n(s, x, z) mu(dz) ds
    kato: np.ndarray  # C_t at each grid time (max over report rows)
    p: np.ndarray  # exact p(t, x, z), [k, i, l]
    pbar: np.ndarray
    envelope: np.ndarray  # envelope(t, |x - z|), [k, i, l]
    self_convergence: Optional[dict] = None
    declared_tol: float = 1e-2
    mass_range: tuple = (math.nan, math.nan)
    diagnostics: list = field(default_factory=list)
    model_name: str = ""
    pert_name: str = ""
    alpha: float = 1.0
    d: int = 1

    @property
    def quad_tol(self) -> float:
        """Measured pointwise self-convergence tolerance (declared value if absent)."""
        if self.self_convergence is None:
            return self.declared_tol
        return self.self_convergence["pointwise"]

    @property
    def mass_tol(self) -> float:
        if self.self_convergence is None:
            return self.declared_tol
        return self.self_convergence["mass"]

    def partial_sum(self, N: int) -> np.ndarray:
        """``sum_{n<=N} (-1)^n q_n / n!`` on the table, ``[k, i, l]``."""
        if N > self.n_max:
            raise ValueError(f"table holds orders up to {self.n_max}")
        out = np.zeros_like(self.q[0])
        for n in range(N + 1):
            out += (-1) ** n * self.q[n] / math.factorial(n)
        return out

    def abs_sum(self, N: int) -> np.ndarray:
        """``sum_{n<=N} |q_n| / n!``, an upper bound for ``|q^(N)|``."""
        out = np.zeros_like(self.q[0])
        for n in range(N + 1):
            out += np.abs(self.q[n]) / math.factorial(n)
        return out

    def majorant(self, N: int) -> np.ndarray:
        """``p + sum_{1<=n<=N} qbar_n / n!``, an upper bound for ``q`` up to the tail."""
        out = self.q[0].copy()
        for n in range(1, N + 1):
            out += self.qbar[n] / math.factorial(n)
        return out

    def row_index(self, x: float) -> int:
        hits = np.flatnonzero(np.abs(self.x - x) <= 1e-9 * max(1.0, abs(x)))
        if hits.size == 0:
            raise ValueError(f"x = {x} is not a reported row")
        return int(hits[0])

    def target_index(self, z: float) -> int:
        hits = np.flatnonzero(np.abs(self.z - z) <= 1e-9 * max(1.0, abs(z)))
        if hits.size == 0:
            raise ValueError(f"z = {z} is not a target point")
        return int(hits[0])

    def to_csv(self, fh, orders=None, header: str = "", times=None):
        """Write rows ``n,t,x,z,q,qbar`` for the selected orders and grid times (all by default)."""
        orders = range(self.n_max + 1) if orders is None else orders
        ks = range(self.times.size) if times is None else [self.grid.time_index(t) - 1 for t in times]
        if header:
            fh.write(header)
        fh.write("n,t,x,z,q,qbar\n")
        for n in orders:
            for k in ks:
                t = self.times[k]
                for i, x in enumerate(self.x):
                    qrow, brow = self.q[n, k, i], self.qbar[n, k, i]
                    for l, z in enumerate(self.z):
                        fh.write(f"{n},{t:.10g},{x:.10g},{z:.10g},{qrow[l]:.12e},{brow[l]:.12e}\n")


def build_series_table(model: ModelSpec, pert: PerturbationF, grid: Grid = Grid(), n_max: int = 10,
                       engine: Optional[SeriesEngine] = None, self_convergence: bool = True,
                       declared_tol: float = 1e-2) -> SeriesTable:
    """Tabulate ``q_n`` and ``qbar_n`` for ``n <= n_max`` on ``grid``.

    With ``self_convergence`` the same table is built on the half-resolution
    grid and the largest change over common points becomes the reported
    quadrature tolerance.
    """
    eng = SeriesEngine(model, pert, grid, n_max) if engine is None else engine
    table = _tabulate(eng, declared_tol)
    if self_convergence:
        coarse_grid = grid.coarsened()
        coarse = _tabulate(SeriesEngine(model, pert, coarse_grid, n_max, evaluator=eng.ev), declared_tol)
        table.self_convergence = _compare(table, coarse)
        if table.self_convergence["pointwise"] > declared_tol:
            table.diagnostics.append(
                f"quadrature self-convergence {table.self_convergence['pointwise']:.3e} exceeds the declared "
                f"tolerance {declared_tol:.3e}; refine the grid")
    return table


def _tabulate(eng: SeriesEngine, declared_tol: float) -> SeriesTable:
    grid, model = eng.grid, eng.model
    n_max = eng.n_max
    n1 = eng.n1
    tg = grid.targets
    rows = grid.window
    ones = np.ones(n1)
    mu_vec = eng.hmu / eng.m_nodes
    cols_q = np.zeros((n1, tg.size + 1))
    cols_q[tg, np.arange(tg.size)] = 1.0
    cols_q[:, -1] = ones
    cols_b = np.concatenate([cols_q, mu_vec[:, None]], axis=1)
    Q = eng.propagate(cols_q, n_max)
    Qb = eng.propagate(cols_b, n_max, bar=True)
    scale = 1.0 / (eng.m_nodes[tg] * grid.h)
    times = grid.times
    x = eng.y[rows]
    z = eng.y[tg]
    q = Q[:, 1:, :, :-1][:, :, rows, :] * scale
    qb = Qb[:, 1:, :, :-2][:, :, rows, :] * scale
    tt = times[:, None, None]
    p = np.asarray(eng.ev.density(tt, x[None, :, None], z[None, None, :]), dtype=float)
    pd = np.asarray(eng.ev.density(tt, z[None, None, :], x[None, :, None]), dtype=float)
    q[0] = p
    qb[0] = np.maximum(p, pd) + np.minimum(p, pd)
    env = Envelope(1, model.alpha)(tt, np.abs(x[None, :, None] - z[None, None, :]))
    mass = Q[:, 1:, rows, -1]
    qbar_mass = Qb[:, 1:, rows, -2]
    qbar_mu_full = Qb[:, :, rows, -1]
    # cumulative trapezoid from s = 0
    cum = np.zeros_like(qbar_mu_full)
    cum[:, 1:] = np.cumsum(0.5 * grid.dt * (qbar_mu_full[:, 1:] + qbar_mu_full[:, :-1]), axis=1)
    kato = cum[0, 1:].max(axis=1)
    kato = np.maximum.accumulate(kato)
    try:
        mass_range = measured_mass_range(model, eng.ev, [times[0], times[-1]], [0.0, z[-1]])
    except ValueError:
        mass_range = (math.nan, math.nan)
    return SeriesTable(
        grid=grid, n_max=n_max, times=times, x=x, z=z, rows=rows, target_nodes=tg,
        q=q, qbar=qb, mass=mass, qbar_mass=qbar_mass, qbar_mu=qbar_mu_full[:, 1:],
        qbar_mu_time=cum[:, 1:], kato=kato, p=p, pbar=qb[0].copy(), envelope=env,
        declared_tol=declared_tol, mass_range=mass_range, model_name=model.name,
        pert_name=eng.pert.name, alpha=model.alpha, d=1,
    )


def _compare(fine: SeriesTable, coarse: SeriesTable) -> dict:
    """Largest change of reported values between nested grids."""
    ratio_t = fine.grid.time_nodes // coarse.grid.time_nodes
    kf = np.arange(ratio_t - 1, fine.times.size, ratio_t)  # fine indices of coarse times
    common_x = np.intersect1d(np.round(fine.x, 12), np.round(coarse.x, 12))
    fi = np.searchsorted(np.round(fine.x, 12), common_x)
    ci = np.searchsorted(np.round(coarse.x, 12), common_x)
    common_z = np.intersect1d(np.round(fine.z, 12), np.round(coarse.z, 12))
    fz = np.searchsorted(np.round(fine.z, 12), common_z)
    cz = np.searchsorted(np.round(coarse.z, 12), common_z)
    pointwise = 0.0
    mass = 0.0
    per_order = []
    for n in range(1, fine.n_max + 1):
        a = fine.q[n][kf][:, fi][:, :, fz]
        b = coarse.q[n][:, ci][:, :, cz]
        ab = fine.qbar[n][kf][:, fi][:, :, fz]
        bb = coarse.qbar[n][:, ci][:, :, cz]
        dn = max(float(np.max(np.abs(a - b))), float(np.max(np.abs(ab - bb))))
        per_order.append(dn)
        pointwise = max(pointwise, dn)
        m = np.abs(fine.mass[n][kf][:, fi] - coarse.mass[n][:, ci])
        mass = max(mass, float(np.max(m / np.maximum(1.0, np.abs(coarse.mass[n][:, ci])))))
    return {"pointwise": pointwise, "mass": mass, "per_order": per_order}



# ---------------------------------------------------------------------------
# pointwise interface


def _engine_cache():
    cache = {}

    def get(model, pert, grid, n_max):
        key = (model, pert, grid)
        hit = cache.get(key)
        if hit is not None and hit.n_max >= n_max:
            return hit
        cache.clear()  # operators are large; keep one
        eng = SeriesEngine(model, pert, grid, n_max)
        cache[key] = eng
        return eng

    return get


engine_for = _engine_cache()


def _bracket(grid: Grid, z: float):
    """Node indices and linear weights locating ``z`` on the mesh."""
    u = (z + grid.radius) / grid.h
    if not 0.0 <= u <= grid.space_nodes:
        raise ValueError(f"point {z} lies outside the mesh [-{grid.radius}, {grid.radius}]")
    lo = min(int(math.floor(u)), grid.space_nodes - 1)
    frac = u - lo
    return lo, frac


def _interp_rows(vec: np.ndarray, grid: Grid, x: float):
    lo, frac = _bracket(grid, x)
    return (1.0 - frac) * vec[lo] + frac * vec[lo + 1]


def _kernel_columns(eng: SeriesEngine, n_max: int, k: int, z: float, bar: bool):
    """``q_n(t_k, ., z)`` (or ``qbar_n``) at every node, ``[n, j]``, for ``n >= 1``."""
    lo, frac = _bracket(eng.grid, z)
    V = np.zeros((eng.n1, 2))
    V[lo, 0] = 1.0 / (eng.m_nodes[lo] * eng.grid.h)
    V[lo + 1, 1] = 1.0 / (eng.m_nodes[lo + 1] * eng.grid.h)
    Q = eng.propagate(V, n_max, k_max=k, bar=bar)[:, k]
    return (1.0 - frac) * Q[:, :, 0] + frac * Q[:, :, 1]


def q0(model: ModelSpec, t: float, x: float, z: float, evaluator=None) -> float:
    """Order zero: the baseline density ``p(t, x, z)``."""
    ev = make_evaluator(model) if evaluator is None else evaluator
    return float(ev.density(t, x, z))


def qn(model: ModelSpec, pert: PerturbationF, n: int, t: float, x: float, z: float,
       grid: Grid = Grid()) -> float:
    """``q_n(t, x, z)`` on ``grid`` (``t`` must be a grid time)."""
    if n < 0:
        raise ValueError("order must be nonnegative")
    if n == 0:
        return q0(model, t, x, z)
    eng = engine_for(model, pert, grid, n)
    k = grid.time_index(t)
    return float(_interp_rows(_kernel_columns(eng, n, k, z, bar=False)[n], grid, x))


def qbar_n(model: ModelSpec, pert: PerturbationF, n: int, t: float, x: float, z: float,
           grid: Grid = Grid()) -> float:
    """Dominating term ``qbar_n(t, x, z)``; order zero is ``pbar``."""
    if n == 0:
        ev = make_evaluator(model)
        return float(ev.density(t, x, z) + ev.density(t, z, x))
    eng = engine_for(model, pert, grid, n)
    k = grid.time_index(t)
    return float(_interp_rows(_kernel_columns(eng, n, k, z, bar=True)[n], grid, x))


def pointwise_table(model: ModelSpec, pert: PerturbationF, orders, times, xs, zs,
                    grid: Grid = Grid()) -> list[tuple]:
    """Rows ``(n, t, x, z, q_n, qbar_n)`` for every combination of the arguments.

    One propagation per ``(t, z)`` serves all orders and start points.
    """
    orders = sorted(set(int(n) for n in orders))
    if orders and orders[0] < 0:
        raise ValueError("orders must be nonnegative")
    top = orders[-1] if orders else 0
    ev = make_evaluator(model)
    eng = engine_for(model, pert, grid, top) if top >= 1 else None
    rows = []
    for t in times:
        k = grid.time_index(t)
        for z in zs:
            cols = bars = None
            if eng is not None:
                cols = _kernel_columns(eng, top, k, z, bar=False)
                bars = _kernel_columns(eng, top, k, z, bar=True)
            for n in orders:
                for x in xs:
                    if n == 0:
                        p = float(ev.density(t, x, z))
                        rows.append((0, t, x, z, p, p + float(ev.density(t, z, x))))
                    else:
                        rows.append((n, t, x, z, float(_interp_rows(cols[n], grid, x)),
                                     float(_interp_rows(bars[n], grid, x))))
    rows.sort(key=lambda r: r[0])
    return rows


def truncated_columns(eng: SeriesEngine, N: int, k: int, z: float, order_zero: bool = True) -> np.ndarray:
    """``q^(N)(t_k, y_j, z)`` at every node; order zero uses the exact density.

    ``order_zero=False`` returns only the corrections of orders ``1..N``.
    """
    if order_zero:
        out = np.asarray(eng.ev.density(k * eng.grid.dt, eng.y, z), dtype=float).copy()
    else:
        out = np.zeros(eng.n1)
    if N >= 1 and not eng.pert.is_zero:
        cols = _kernel_columns(eng, N, k, z, bar=False)
        for n in range(1, N + 1):
            out += (-1) ** n * cols[n] / math.factorial(n)
    return out


@dataclass(frozen=True)
class TruncatedValue:
    value: float
    tail: float
    certified: bool


def tail_bound(ledger: "ConstantLedger", N: int, t: float, r: float) -> float:
    """``C1~ K^(N+1)/(1-K) * envelope(t, r)``: geometric remainder after order ``N``."""
    K = ledger.K
    return ledger.C_tilde1 * K ** (N + 1) / (1.0 - K) * float(Envelope(ledger.d, ledger.alpha)(t, r))


def truncated_density(model: ModelSpec, pert: PerturbationF, N: int, t: float, x: float, z: float,
                      grid: Grid = Grid(), ledger: Optional["ConstantLedger"] = None) -> TruncatedValue:
    """Partial sum ``sum_{n<=N} (-1)^n q_n / n!`` with its certified tail.

    The tail is certified only for ``t <= t3`` of the ledger; outside it is still
    reported but flagged.
    """
    if ledger is None:
        ledger = build_ledger(model, pert, grid, n_max=max(N, 2))
    eng = engine_for(model, pert, grid, N)
    k = grid.time_index(t)
    # exact order zero, interpolated corrections
    value = float(eng.ev.density(t, x, z)) + float(_interp_rows(truncated_columns(eng, N, k, z, False), grid, x))
    tail = tail_bound(ledger, N, t, abs(x - z))
    certified = ledger.t3 is not None and t <= ledger.t3 + 1e-12
    return TruncatedValue(value, tail, certified)


def semigroup_residual(model: ModelSpec, pert: PerturbationF, N: int, t: float, s: float, x: float,
                       z: float, grid: Grid = Grid()) -> float:
    """``|int q^(N)(t,x,y) q^(N)(s,y,z) m(dy) - q^(N)(t+s,x,z)|`` on ``grid``.

    The inner integral applies the discrete operator ``sum (-1)^n Q_n(t)/n!`` to
    the nodal values of ``q^(N)(s, ., z)``.
    """
    eng = engine_for(model, pert, grid, N)
    kt, ks, kts = grid.time_index(t), grid.time_index(s), grid.time_index(t + s)
    v = truncated_columns(eng, N, ks, z)
    composed = apply_truncated(eng, v[:, None], N, kt)[:, 0]
    direct = truncated_columns(eng, N, kts, z)
    return float(abs(_interp_rows(composed, grid, x) - _interp_rows(direct, grid, x)))


def apply_truncated(eng: SeriesEngine, V: np.ndarray, N: int, k: int) -> np.ndarray:
    """``sum_{n<=N} (-1)^n Q_n(t_k) V / n!`` with ``V`` holding nodal function values."""
    Q = eng.propagate(V, N, k_max=k)[:, k]
    out = np.zeros_like(Q[0])
    for n in range(N + 1):
        out += (-1) ** n * Q[n] / math.factorial(n)
    return out


# ---------------------------------------------------------------------------
# Kato quantities


def mu_density(model: ModelSpec, sym: SymmetrizedModel, w: float, radius: float = 8.0,
               gamma: float = 0.7, levels: int = 60, panels_per_unit: int = 8, order: int = 6) -> float:
    """``h(w) = int Fbar(w, y) |w-y|^-(1+alpha) dy`` so that ``mu(dw) = h(w) dw``.

    Gauss panels on ``[w-R, w+R]`` graded toward ``y = w`` and split at the
    cutoff, plus the closed-form tail ``2 L R^-alpha / alpha`` beyond ``R``.
    """
    if sym.is_zero:
        return 0.0
    if sym.certificate is None:
        raise ValueError("a diagonal certificate is needed to bound the singularity at y = w")
    if model.dimension != 1:
        raise ValueError("mu density quadrature is one-dimensional")
    alpha = model.alpha
    cut = sym.certificate.delta if isinstance(sym.certificate, HardCutoff) else 0.0
    n_pan = max(1, int(math.ceil(radius * panels_per_unit)))
    base = np.linspace(0.0, radius, n_pan + 1)
    if 0.0 < cut < radius:
        base = np.union1d(base, [cut])
    edges = np.concatenate((graded_edges(0.0, base[1], True, gamma, levels), base[2:]))
    xg, wg = np.polynomial.legendre.leggauss(order)
    u, wts = _gauss_on(edges, xg, wg)
    total = 0.0
    for sign in (1.0, -1.0):
        y = (w + sign * u)[:, None]
        fb = np.asarray(sym.f_bar(np.full_like(y, w), y), dtype=float)
        total += float(np.dot(wts, fb * u ** (-(1.0 + alpha))))
    return total + 2.0 * sym.bound * radius ** (-alpha) / alpha


def kato_Ct(model: ModelSpec, pert: PerturbationF, t: float, x_grid, grid: Optional[Grid] = None) -> float:
    """``C_t = sup_x int_0^t int pbar(s, x, w) mu(dw) ds``, maximised over ``x_grid``.

    Space integrals apply the product-integrated ``Pbar(s)`` to the nodal
    Kato density; the time integral is the trapezoid rule on the grid.
    """
    if t <= 0:
        raise ValueError("C_t needs t > 0")
    if pert.is_zero:
        return 0.0
    base = Grid() if grid is None else grid
    steps = max(2, int(round(t / base.dt)))
    g = replace(base, t_max=t, time_nodes=steps)
    eng = engine_for(model, pert, g, 0)
    mu_vec = eng.hmu / eng.m_nodes
    vals = eng.propagate(mu_vec[:, None], 0, bar=True)[0, :, :, 0]  # [k, j]
    integ = 0.5 * g.dt * (vals[1:] + vals[:-1]).sum(axis=0)
    xs = np.atleast_1d(np.asarray(x_grid, dtype=float))
    return float(max(_interp_rows(integ, g, x) for x in xs))


# ---------------------------------------------------------------------------
# constant ledger

HOLDER_GAP = 1.0 - 0.1 - 2.0 ** -0.5


def c0_partial_sum(n: int, K: float, L: float) -> float:
    """``sum_{i=1}^n K^-i L^(i-1) / i!``: increases in ``n`` toward ``(e^(L/K) - 1)/L``."""
    return math.fsum(K ** -i * L ** (i - 1) / math.factorial(i) for i in range(1, n + 1))


def c0_closed_form(K: float, L: float) -> float:
    return 1.0 / K if L == 0 else math.expm1(L / K) / L


def _prefix_time(times: np.ndarray, ok: np.ndarray) -> Optional[float]:
    """Largest grid time up to which ``ok`` holds at every earlier grid time."""
    if ok.size == 0 or not ok[0]:
        return None
    bad = np.flatnonzero(~ok)
    idx = ok.size - 1 if bad.size == 0 else bad[0] - 1
    return float(times[idx])


@dataclass
class ConstantLedger:
    """Every named constant of the small-time estimates, with witnesses.

    Thresholds ``t0..t3`` are ``None`` when no grid time satisfies the defining
    inequality ("not found at this resolution").
    """

    K: float
    L: float
    C0: float
    M: float
    quad_const: float
    t0: Optional[float]
    t1: Optional[float]
    t2: Optional[float]
    t3: Optional[float]
    k: int
    C_tilde: float
    C_tilde1: float
    C_tilde2: float
    D1: float
    D2: float
    Ct_samples: dict
    d: int = 1
    alpha: float = 1.0
    mass_measured: tuple = (math.nan, math.nan)
    witnesses: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.K < 1.0:
            raise ValueError("K must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("k must be at least 1")

    @staticmethod
    def _fmt_t(t):
        return "not found at this resolution" if t is None else f"{t:.6g}"

    def report(self) -> str:
        lines = [
            "# constant ledger",
            f"K = {self.K:.6g}  (target contraction, chosen)",
            f"L = {self.L:.6g}  (bound of Fbar = 2 * half_bound)",
            f"C0 = {self.C0:.10g}  (sup_n sum_(i<=n) K^-i L^(i-1)/i! = (e^(L/K)-1)/L; "
            f"partial sum at n=100: {self.witnesses.get('C0_partial_100', math.nan):.10g})",
            f"quad_const = {self.quad_const:.10g}  (2^(1+d/alpha) Mbar^2 Cbar)",
            f"t0 = {self._fmt_t(self.t0)}  (largest grid time with C_t * quad_const * C0 <= 1 at all earlier grid times)",
            f"M = {self.M:.10g}  (max of qbar_n t^(d/alpha)/(n! K^n) over n in {{0,1}}, t <= t0; "
            f"witness {self.witnesses.get('M')})",
            f"D1 = {self.D1:.10g}, D2 = {self.D2:.10g}  (2 m_lo (1-1e-3), 2 m_hi (1+1e-3); "
            f"measured int pbar m in [{self.mass_measured[0]:.10g}, {self.mass_measured[1]:.10g}])",
            f"k = {self.k}  (ceil(4 L Cbar D2^2 / (M1 (1 - 1/10 - 2^-1/2)^(d+alpha))))",
            f"t1 = {self._fmt_t(self.t1)}  (largest grid time with qbar_1/k <= p/2 on the grid)",
            f"C_tilde = {self.C_tilde:.10g}  (smallest >= 1 with L^(n-1) Mbar^2 Cbar <= C_tilde n! K^n / 2, n <= 100)",
            f"t2 = {self._fmt_t(self.t2)}  (largest grid time with int qbar_n g m <= C_tilde C_t n! K^n, 1 <= n <= N, "
            f"g = min(1/D2, 1))",
            f"C_tilde2 = {self.C_tilde2:.10g}  (smallest >= 1 with L^n Cbar D2^2 / (2 (1-1/10-2^-1/2)^(d+alpha)) "
            f"<= C_tilde2 n! K^n / 8, n <= 100)",
            f"C_tilde1 = {self.C_tilde1:.10g}  (max of qbar_n/(n! K^n envelope) over n in {{0,1}}, t <= t0, floored at 1; "
            f"witness {self.witnesses.get('C_tilde1')})",
            f"t3 = {self._fmt_t(self.t3)}  (largest grid time with qbar_n <= C_tilde1 n! K^n envelope, all n <= N)",
            "C_t samples:",
        ]
        for t, c in self.Ct_samples.items():
            lines.append(f"  C_{t:.6g} = {c:.10g}")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def build_ledger(model: ModelSpec, pert: PerturbationF, grid: Grid = Grid(), K: float = 0.5,
                 n_max: int = 10, table: Optional[SeriesTable] = None) -> ConstantLedger:
    """Construct witnesses for every constant from closed forms and a series table."""
    if not 0.0 < K < 1.0:
        raise ValueError("K must lie in (0, 1)")
    if table is None:
        table = build_series_table(model, pert, grid, n_max, self_convergence=False)
    n_max = table.n_max
    sym = symmetrize(pert)
    L = sym.bound
    d, alpha = model.dimension, model.alpha
    mbar, cbar = model.m_hi, model.c_bar
    times = table.times
    notes = []
    wit = {}

    C0 = c0_closed_form(K, L)
    partial = [c0_partial_sum(n, K, L) for n in range(1, 101)]
    wit["C0_partial_100"] = partial[-1]
    if np.any(np.diff(partial) < -1e-15) or partial[-1] > C0 * (1 + 1e-12):
        notes.append("partial sums of C0 are not increasing toward the closed form")
    quad_const = 2.0 ** (1.0 + d / alpha) * mbar ** 2 * cbar
    kato = table.kato
    t0 = _prefix_time(times, kato * quad_const * C0 <= 1.0 + 1e-12)

    # M from orders 0 and 1 on t <= t0
    upto0 = times <= (t0 if t0 is not None else -1.0) + 1e-12
    M = math.nan
    if upto0.any():
        best = -math.inf
        for n in (0, 1):
            r = table.qbar[n][upto0] * (times[upto0, None, None] ** (d / alpha)) / (math.factorial(n) * K ** n)
            idx = np.unravel_index(int(np.argmax(r)), r.shape)
            if r[idx] > best:
                best = float(r[idx])
                wit["M"] = (n, float(times[upto0][idx[0]]), float(table.x[idx[1]]), float(table.z[idx[2]]))
        M = best

    eps = MASS_EPS
    D1, D2 = 2.0 * model.m_lo * (1.0 - eps), 2.0 * model.m_hi * (1.0 + eps)
    mass = table.mass_range
    if np.isfinite(mass[0]) and not (D1 <= mass[0] and mass[1] <= D2):
        notes.append(f"measured mass range {mass} leaves [D1, D2]")
    k = max(1, int(math.ceil(4.0 * L * cbar * D2 ** 2 / (model.envelope_lo * HOLDER_GAP ** (d + alpha)) - 1e-12)))

    ok1 = np.all(table.qbar[1] / k <= 0.5 * table.p + 1e-15, axis=(1, 2))
    t1 = _prefix_time(times, ok1)

    ns = np.arange(1, 101)
    fact = np.array([math.factorial(int(n)) for n in ns], dtype=float)
    C_tilde = max(1.0, float(np.max(2.0 * L ** (ns - 1) * mbar ** 2 * cbar / (fact * K ** ns))))
    ns0 = np.arange(0, 101)
    fact0 = np.array([math.factorial(int(n)) for n in ns0], dtype=float)
    C_tilde2 = max(1.0, float(np.max(4.0 * L ** ns0 * cbar * D2 ** 2 / (HOLDER_GAP ** (d + alpha) * fact0 * K ** ns0))))

    g_val = min(1.0 / D2, 1.0)
    ok2 = np.ones(times.size, bool)
    for n in range(1, n_max + 1):
        lhs = g_val * table.qbar_mass[n].max(axis=1)
        ok2 &= lhs <= C_tilde * kato * math.factorial(n) * K ** n * (1 + 1e-12)
    t2 = _prefix_time(times, ok2)

    C1 = 1.0
    if upto0.any():
        for n in (0, 1):
            r = table.qbar[n][upto0] / (math.factorial(n) * K ** n * table.envelope[upto0])
            idx = np.unravel_index(int(np.argmax(r)), r.shape)
            if r[idx] > C1:
                C1 = float(r[idx])
                wit["C_tilde1"] = (n, float(times[upto0][idx[0]]), float(table.x[idx[1]]), float(table.z[idx[2]]))
    ok3 = np.ones(times.size, bool)
    for n in range(n_max + 1):
        bound = C1 * math.factorial(n) * K ** n * table.envelope
        ok3 &= np.all(table.qbar[n] <= bound * (1 + 1e-12), axis=(1, 2))
    t3 = _prefix_time(times, ok3)
    if C1 < C_tilde2:
        notes.append(f"C_tilde1 = {C1:.6g} is fitted from the data and not raised to C_tilde2 = {C_tilde2:.6g}")

    stride = max(1, times.size // 8)
    Ct = {float(t): float(c) for t, c in zip(times[stride - 1::stride], kato[stride - 1::stride])}
    return ConstantLedger(
        K=K, L=L, C0=C0, M=M, quad_const=quad_const, t0=t0, t1=t1, t2=t2, t3=t3, k=k,
        C_tilde=C_tilde, C_tilde1=C1, C_tilde2=C_tilde2, D1=D1, D2=D2, Ct_samples=Ct, d=d, alpha=alpha,
        mass_measured=mass, witnesses=wit, notes=notes,
    )


def symmetry_defect(table: SeriesTable, n: int) -> float:
    """``max |qbar_n(t,x,z) - qbar_n(t,z,x)|`` over target pairs that are also report rows."""
    rows = np.array([table.row_index(z) for z in table.z])
    block = table.qbar[n][:, rows, :]  # [k, x = target a, z = target b]
    return float(np.max(np.abs(block - block.transpose(0, 2, 1))))
