"""Jump-path simulation with explicit jump records and Monte Carlo estimators.

Large jumps ``|h| >= epsilon`` are generated shell by shell: the radial range
is cut at fixed dyadic edges (plus the perturbation cutoff) and every shell
draws from its own random stream.  Jumps above a given radius are therefore
the same whatever ``epsilon`` below it is used, which makes estimates of
functionals that only see those jumps exactly invariant in ``epsilon``.

Paths are simulated in blocks.  Block ``b`` of seed ``s`` draws shell ``j``
from ``SeedSequence(s, spawn_key=(b, j))``, so every path is a pure function
of ``(seed, path index)`` and blocks can run in any order or in parallel.
Block summaries are merged in block order with Chan's pairwise update.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from scipy import integrate, special

from .jumpalgebra import JumpSequence, batch_additive_functional
from .model import HardCutoff, ModelSpec, PerturbationF, stable_levy_constant

BLOCK_SIZE = 4096
_GAUSS_STREAM = 10 ** 6
_THIN_STREAM = 10 ** 6 + 1
_EDGE_RANGE = range(-30, 31)


class SmallJumpMode(str, Enum):
    DISCARD = "discard"
    STABLE_REMAINDER = "stable_remainder"


@dataclass(frozen=True)
class PathConfig:
    """Simulation settings.

    :param epsilon: smallest recorded jump size
    :param t_horizon: simulated time span
    :param radius: domain radius ``R_sim`` (recorded in reports; paths are not stopped)
    :param small_jump_mode: discard jumps below ``epsilon`` or replace them by a
        Gaussian with matching covariance (constant kernel only)
    """

    epsilon: float = 0.5
    t_horizon: float = 1.0
    radius: float = 10.0
    small_jump_mode: SmallJumpMode = SmallJumpMode.DISCARD
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be positive and finite: the dominating jump rate is infinite at 0")
        if self.t_horizon <= 0:
            raise ValueError("t_horizon must be positive")
        if self.block_size < 1:
            raise ValueError("block_size must be positive")


@dataclass(frozen=True)
class RngStream:
    seed: int
    index: int = 0


@dataclass(frozen=True)
class SimulatedPath:
    x0: np.ndarray
    jumps: JumpSequence
    pre_states: np.ndarray  # (n, d)
    post_states: np.ndarray  # (n, d)
    terminal: np.ndarray  # (d,)


@dataclass(frozen=True)
class MCEstimate:
    estimate: float
    std_error: float
    n_paths: int
    hits: Optional[int] = None
    inconclusive: bool = False

    def __iter__(self):
        return iter((self.estimate, self.std_error))


# ---------------------------------------------------------------------------
# jump law


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere in ``R^d`` (2 for d = 1)."""
    return 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)


def _shells(epsilon: float, pert: PerturbationF):
    """``(key, lo, hi)`` for radial shells covering ``[epsilon, inf)``."""
    edges = {2.0 ** j for j in _EDGE_RANGE}
    if isinstance(pert.certificate, HardCutoff) and not pert.is_zero:
        edges.add(float(pert.certificate.delta))
    edges = sorted(edges)
    out = []
    for key, lo in enumerate(edges):
        hi = edges[key + 1] if key + 1 < len(edges) else math.inf
        if hi <= epsilon:
            continue
        out.append((key, max(lo, epsilon), hi))
    if epsilon < edges[0]:
        out.insert(0, (-1, epsilon, edges[0]))
    return out


def _tail_mass(r, alpha):
    return 0.0 if math.isinf(r) else r ** (-alpha)


def large_jump_rate(model: ModelSpec, epsilon: float, dominating: bool = False) -> float:
    """``int_{|h| >= eps} 2C |h|^-(d+alpha) M dh`` for a constant kernel.

    With ``dominating`` the bound ``c_bar * m_hi`` replaces the kernel.
    """
    scale = _intensity_scale(model, dominating)
    return scale * sphere_area(model.dimension) * epsilon ** (-model.alpha) / model.alpha


def _intensity_scale(model: ModelSpec, dominating: bool) -> float:
    if not dominating and model.is_constant_kernel:
        return model.kernel_constant * model.density_constant
    return model.c_bar * model.m_hi


def small_jump_variance(model: ModelSpec, epsilon: float) -> float:
    """Per-coordinate variance rate of the jumps below ``epsilon``."""
    d, a = model.dimension, model.alpha
    scale = model.kernel_constant * model.density_constant
    return scale * sphere_area(d) / d * epsilon ** (2.0 - a) / (2.0 - a)


def cms_symmetric_stable(alpha: float, size, rng: np.random.Generator) -> np.ndarray:
    """Chambers-Mallows-Stuck draws with characteristic function ``exp(-|w|^alpha)``."""
    v = rng.uniform(-math.pi / 2, math.pi / 2, size)
    w = rng.exponential(1.0, size)
    if alpha == 1.0:
        return np.tan(v)
    return (np.sin(alpha * v) / np.cos(v) ** (1.0 / alpha)
            * (np.cos(v - alpha * v) / w) ** ((1.0 - alpha) / alpha))


def stable_scale(model: ModelSpec) -> float:
    """Scale ``s`` such that the constant-kernel process at time ``t`` is ``s t^(1/alpha)`` times standard."""
    c = model.kernel_constant * model.density_constant
    return (c / stable_levy_constant(model.alpha)) ** (1.0 / model.alpha)


# ---------------------------------------------------------------------------
# block simulation


@dataclass
class PathBlock:
    """Paths ``start .. start+size-1``; jump arrays are flat and grouped by path."""

    start: int
    counts: np.ndarray
    times: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    fvals: np.ndarray
    A: np.ndarray
    X: np.ndarray


def _rng(seed: int, block: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block, stream)))


def _directions(rng, n, d):
    if d == 1:
        return np.where(rng.random(n) < 0.5, -1.0, 1.0)[:, None]
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _proposals(model, pert, cfg, t, seed, block, size, dominating):
    """Merged shell proposals sorted by (path, time)."""
    d, a = model.dimension, model.alpha
    scale = _intensity_scale(model, dominating) * sphere_area(d) / a
    ids, times, incs = [], [], []
    for key, lo, hi in _shells(cfg.epsilon, pert):
        rate = scale * (_tail_mass(lo, a) - _tail_mass(hi, a))
        if rate * t <= 0:
            continue
        rng = _rng(seed, block, key + 1)
        counts = rng.poisson(rate * t, size)
        n = int(counts.sum())
        if n == 0:
            continue
        ids.append(np.repeat(np.arange(size), counts))
        times.append(rng.uniform(0.0, t, n))
        u = rng.random(n)
        tail = lo ** (-a) - u * (lo ** (-a) - _tail_mass(hi, a))
        r = tail ** (-1.0 / a)
        incs.append(r[:, None] * _directions(rng, n, d))
    if not ids:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros((0, d))
    ids = np.concatenate(ids)
    times = np.concatenate(times)
    incs = np.concatenate(incs)
    order = np.lexsort((times, ids))
    return ids[order], times[order], incs[order]


def simulate_block(model: ModelSpec, pert: PerturbationF, cfg: PathConfig, x0, t: float, seed: int,
                   block: int, size: int) -> PathBlock:
    """Simulate paths ``block * cfg.block_size + (0 .. size-1)`` up to time ``t``."""
    d = model.dimension
    x0 = np.asarray(x0, dtype=float).reshape(d)
    const = model.is_constant_kernel
    remainder = cfg.small_jump_mode == SmallJumpMode.STABLE_REMAINDER
    if remainder and not const:
        raise ValueError("the stable remainder mode needs a constant kernel")
    ids, times, incs = _proposals(model, pert, cfg, t, seed, block, size, dominating=not const)

    if not const:
        ids, times, incs = _thin(model, cfg, x0, ids, times, incs, seed, block, size)
    counts = np.bincount(ids, minlength=size).astype(np.int64)
    starts = np.cumsum(counts) - counts
    has = counts > 0
    last = starts[has] + counts[has] - 1

    # Gaussian stand-in for the small jumps: one increment per inter-event gap
    gauss = np.zeros((ids.size, d))
    X = np.tile(x0, (size, 1))
    if remainder:
        var = small_jump_variance(model, cfg.epsilon)
        rng = _rng(seed, block, _GAUSS_STREAM)
        prev = np.zeros(ids.size)
        if ids.size:
            prev[1:] = np.where(ids[1:] == ids[:-1], times[:-1], 0.0)
        z = rng.standard_normal((ids.size + size, d))
        gauss = _group_cumsum(z[: ids.size] * np.sqrt(var * (times - prev))[:, None], ids, starts)
        t_last = np.zeros(size)
        t_last[has] = times[last]
        X += z[ids.size:] * np.sqrt(var * (t - t_last))[:, None]
        X[has] += gauss[last]

    moved = _group_cumsum(incs, ids, starts)
    before = np.zeros_like(moved)
    if ids.size:
        same = ids[1:] == ids[:-1]
        before[1:][same] = moved[:-1][same]
    post = x0 + moved + gauss
    pre = x0 + before + gauss
    X[has] += post[last] - x0 - gauss[last]
    fvals = np.asarray(pert.f(pre, post), dtype=float).reshape(-1) if ids.size else np.zeros(0)
    A = batch_additive_functional(counts, fvals)
    return PathBlock(block * cfg.block_size, counts, times, pre, post, fvals, A, X)


def _group_cumsum(values: np.ndarray, ids: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """Running sums of ``values`` restarted at each path (rows grouped by ``ids``)."""
    if values.shape[0] == 0:
        return values.copy()
    cs = np.cumsum(values, axis=0)
    base = np.zeros((starts.size,) + values.shape[1:])
    nz = starts > 0
    base[nz] = cs[starts[nz] - 1]
    return cs - base[ids]


def _thin(model, cfg, x0, ids, times, incs, seed, block, size):
    """Accept proposals with probability ``2C(x, y) M(y) / (c_bar m_hi)`` along each path."""
    if ids.size == 0:
        return ids, times, incs
    rng = _rng(seed, block, _THIN_STREAM)
    u = rng.random(ids.size)
    bound = model.c_bar * model.m_hi
    counts = np.bincount(ids, minlength=size)
    starts = np.cumsum(counts) - counts
    pos = np.tile(np.asarray(x0, float), (size, 1))
    keep = np.zeros(ids.size, bool)
    for rank in range(int(counts.max())):
        paths = np.flatnonzero(counts > rank)
        j = starts[paths] + rank
        cur = pos[paths]
        nxt = cur + incs[j]
        acc = np.asarray(model.c2(cur, nxt), float) * np.asarray(model.reference_density(nxt), float) / bound
        ok = u[j] < acc
        keep[j] = ok
        pos[paths[ok]] = nxt[ok]
    return ids[keep], times[keep], incs[keep]


def _block_layout(n_paths: int, block_size: int, first_path: int = 0):
    if n_paths <= 0:
        raise ValueError("n_paths must be positive")
    out = []
    p = first_path
    end = first_path + n_paths
    while p < end:
        b = p // block_size
        lo = p - b * block_size
        hi = min(block_size, end - b * block_size)
        out.append((b, lo, hi))
        p = b * block_size + hi
    return out


def simulate(model: ModelSpec, pert: PerturbationF, cfg: PathConfig, x0, t: float, n_paths: int,
             seed: int, threads: int = 1, first_path: int = 0) -> list[tuple[PathBlock, int, int]]:
    """Blocks covering paths ``first_path .. first_path+n_paths-1`` with the slice to use."""
    if t > cfg.t_horizon + 1e-12:
        raise ValueError(f"t = {t} exceeds the horizon {cfg.t_horizon}")
    layout = _block_layout(n_paths, cfg.block_size, first_path)

    def run(item):
        b, lo, hi = item
        return simulate_block(model, pert, cfg, x0, t, seed, b, cfg.block_size), lo, hi

    if threads == 1 or len(layout) == 1:
        return [run(it) for it in layout]
    workers = None if threads <= 0 else threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, layout))


def sample_path(model: ModelSpec, pert: PerturbationF, cfg: PathConfig, x0, rng: RngStream,
                t: Optional[float] = None) -> SimulatedPath:
    """Path ``rng.index`` of seed ``rng.seed``, identical to its copy inside any batch."""
    t = cfg.t_horizon if t is None else t
    d = model.dimension
    blk, lo, _ = simulate(model, pert, cfg, x0, t, 1, rng.seed, first_path=rng.index)[0]
    starts = np.cumsum(blk.counts) - blk.counts
    a, n = starts[lo], blk.counts[lo]
    seq = JumpSequence(tuple(float(s) for s in blk.times[a:a + n]),
                       tuple(float(f) for f in blk.fvals[a:a + n]), t)
    return SimulatedPath(np.asarray(x0, float).reshape(d), seq, blk.pre[a:a + n].copy(),
                         blk.post[a:a + n].copy(), blk.X[lo].copy())


# ---------------------------------------------------------------------------
# estimators


def _merge(stats, n, mean, m2):
    """Chan's pairwise update of ``(count, mean, sum of squared deviations)``."""
    n0, mean0, m20 = stats
    if n0 == 0:
        return n, mean, m2
    tot = n0 + n
    delta = mean - mean0
    return tot, mean0 + delta * n / tot, m20 + m2 + delta * delta * n0 * n / tot


def _reduce(blocks, per_path: Callable[[PathBlock, int, int], np.ndarray]):
    stats = (0, 0.0, 0.0)
    for blk, lo, hi in blocks:
        v = np.asarray(per_path(blk, lo, hi), dtype=float)
        if v.size == 0:
            continue
        mean = float(np.mean(v))
        m2 = float(np.sum((v - mean) ** 2))
        stats = _merge(stats, v.size, mean, m2)
    n, mean, m2 = stats
    se = math.sqrt(m2 / (n - 1) / n) if n > 1 else math.inf
    return n, mean, se


def _as_function(g, d):
    if g is None:
        return lambda x: np.ones(x.shape[0])
    if np.isscalar(g):
        return lambda x: np.full(x.shape[0], float(g))
    return g


def feynman_kac_mc(model, pert, cfg: PathConfig, x0, f, t: float, n_paths: int, rng: RngStream,
                   threads: int = 1) -> MCEstimate:
    """Mean of ``exp(-A_t) f(X_t)`` with its standard error."""
    f = _as_function(f, model.dimension)
    blocks = simulate(model, pert, cfg, x0, t, n_paths, rng.seed, threads, rng.index)
    n, mean, se = _reduce(blocks, lambda b, lo, hi: np.exp(-b.A[lo:hi]) * f(b.X[lo:hi]))
    return MCEstimate(mean, se, n)


def moment_mc(model, pert, cfg: PathConfig, x0, g, t: float, n: int, n_paths: int, rng: RngStream,
              threads: int = 1) -> MCEstimate:
    """Mean of ``A_t^n g(X_t)``."""
    if n < 0:
        raise ValueError("moment order must be nonnegative")
    g = _as_function(g, model.dimension)
    blocks = simulate(model, pert, cfg, x0, t, n_paths, rng.seed, threads, rng.index)
    cnt, mean, se = _reduce(blocks, lambda b, lo, hi: b.A[lo:hi] ** n * g(b.X[lo:hi]))
    return MCEstimate(mean, se, cnt)


def ball_measure(model: ModelSpec, z, r: float) -> float:
    """``m(B_r(z))``; quadrature of ``M`` in one dimension, exact for constant ``M``."""
    d = model.dimension
    vol = math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0) * r ** d
    if model.density_constant is not None:
        return model.density_constant * vol
    if d != 1:
        raise ValueError("ball measure of a non-constant reference density needs d = 1")
    z = float(np.asarray(z).reshape(-1)[0])
    return integrate.quad(lambda y: float(model.reference_density(np.array([[y]]))[0]), z - r, z + r)[0]


def smallball_density_mc(model, pert, cfg: PathConfig, x0, z, r: float, t: float, n_paths: int,
                         rng: RngStream, threads: int = 1, discounted: bool = True,
                         weight: Optional[Callable] = None) -> MCEstimate:
    """``E_x[exp(-A_t) 1{|X_t - z| <= r}] / m(B_r(z))``.

    ``discounted=False`` drops the ``exp(-A_t)`` factor; ``weight`` maps
    ``A_t`` to an arbitrary per-path factor instead.  Zero hits give estimate 0
    flagged inconclusive.
    """
    if r <= 0:
        raise ValueError("ball radius must be positive")
    z = np.asarray(z, dtype=float).reshape(model.dimension)
    vol = ball_measure(model, z, r)
    hits = [0]
    if weight is None:
        weight = (lambda a: np.exp(-a)) if discounted else (lambda a: np.ones_like(a))

    def per_path(b, lo, hi):
        inside = np.linalg.norm(b.X[lo:hi] - z, axis=1) <= r
        hits[0] += int(inside.sum())
        return np.where(inside, weight(b.A[lo:hi]), 0.0) / vol

    blocks = simulate(model, pert, cfg, x0, t, n_paths, rng.seed, threads, rng.index)
    n, mean, se = _reduce(blocks, per_path)
    if hits[0] == 0:
        return MCEstimate(0.0, math.inf, n, 0, True)
    return MCEstimate(mean, se, n, hits[0])


def batch_records(model, pert, cfg: PathConfig, x0, t: float, n_paths: int, seed: int, threads: int = 1):
    """Per-path ``(path_id, n_jumps, A_t, X_t)`` arrays for persistence."""
    ids, counts, A, X = [], [], [], []
    for blk, lo, hi in simulate(model, pert, cfg, x0, t, n_paths, seed, threads):
        ids.append(blk.start + np.arange(lo, hi))
        counts.append(blk.counts[lo:hi])
        A.append(blk.A[lo:hi])
        X.append(blk.X[lo:hi])
    return np.concatenate(ids), np.concatenate(counts), np.concatenate(A), np.concatenate(X)
