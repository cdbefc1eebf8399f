"""Finite-sum algebra of a purely discontinuous additive functional.

A path of the functional ``A`` is determined by its jump marks ``(s_j, f_j)``
where ``f_j = F(X_{s_j-}, X_{s_j})``.  Integrals against ``dA`` reduce to sums
over the marks, which makes the power expansions of ``A_t^n`` checkable
exactly.  Every routine is generic in the number type: feed
:class:`fractions.Fraction` values for exact arithmetic and floats for the
production path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

MAX_BINOMIAL_ORDER = 60


def _pascal_rows(n_max: int) -> list[list[int]]:
    rows = [[1]]
    for m in range(1, n_max + 1):
        prev = rows[-1]
        rows.append([1] + [prev[i - 1] + prev[i] for i in range(1, m)] + [1])
    return rows


_PASCAL = _pascal_rows(MAX_BINOMIAL_ORDER)


def binomial(n: int, i: int) -> int:
    """Exact binomial coefficient from the Pascal triangle.

    :param n: order, ``0 <= n <= 60``
    :param i: index, ``0 <= i <= n``
    :raises ValueError: outside the tabulated range
    """
    if not (0 <= i <= n):
        raise ValueError(f"binomial needs 0 <= i <= n, got n={n}, i={i}")
    if n > MAX_BINOMIAL_ORDER:
        raise ValueError(f"binomial order {n} exceeds the supported maximum {MAX_BINOMIAL_ORDER}")
    return _PASCAL[n][i]


class Jump(NamedTuple):
    """View of one jump handed to Stieltjes integrands."""

    index: int
    time: object
    f: object
    pre: object  # A_{s_j-}
    post: object  # A_{s_j}


@dataclass(frozen=True)
class JumpSequence:
    """Ordered jump marks of an additive functional on ``[0, t_horizon]``."""

    times: tuple
    values: tuple
    t_horizon: object

    def __post_init__(self):
        times = tuple(self.times)
        values = tuple(self.values)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        if len(times) != len(values):
            raise ValueError("times and values must have equal length")
        prev = 0
        for s in times:
            if not s > prev:
                raise ValueError("jump times must be strictly increasing and positive")
            prev = s
        if times and times[-1] > self.t_horizon:
            raise ValueError("last jump time exceeds the horizon")
        for f in values:
            if isinstance(f, float) and not math.isfinite(f):
                raise ValueError("jump values must be finite")

    @classmethod
    def from_marks(cls, marks: Sequence[tuple], t_horizon) -> "JumpSequence":
        marks = list(marks)
        return cls(tuple(m[0] for m in marks), tuple(m[1] for m in marks), t_horizon)

    def __len__(self) -> int:
        return len(self.times)

    def _count_upto(self, t) -> int:
        if t > self.t_horizon:
            raise ValueError(f"time {t} exceeds the horizon {self.t_horizon}")
        count = 0
        for s in self.times:
            if s <= t:
                count += 1
            else:
                break
        return count

    def _zero(self):
        return self.values[0] * 0 if self.values else 0

    def jumps(self, t=None) -> list[Jump]:
        """Jumps up to ``t`` with pre- and post-jump values of ``A``."""
        t = self.t_horizon if t is None else t
        count = self._count_upto(t)
        out = []
        acc = self._zero()
        for j in range(count):
            f = self.values[j]
            out.append(Jump(j, self.times[j], f, acc, acc + f))
            acc = acc + f
        return out

    def reversed(self, t=None) -> "JumpSequence":
        """Marks ``(t - s_j, f_j)`` in increasing order; needs every ``s_j < t``."""
        t = self.t_horizon if t is None else t
        count = self._count_upto(t)
        times = self.times[:count]
        if count and times[-1] >= t:
            raise ValueError("time reversal needs all jump times strictly below t")
        return JumpSequence(
            tuple(t - s for s in reversed(times)), tuple(reversed(self.values[:count])), t
        )


def additive_functional(seq: JumpSequence, t) -> object:
    """Return ``A_t``, the sum of the marks with ``s_j <= t``."""
    count = seq._count_upto(t)
    return sum(seq.values[:count], seq._zero())


def stieltjes_integral(seq: JumpSequence, integrand: Callable[[Jump], object], t) -> object:
    """Return the sum over jumps ``s_j <= t`` of ``integrand(jump) * f_j``."""
    total = seq._zero()
    for jump in seq.jumps(t):
        total = total + integrand(jump) * jump.f
    return total


class PowerExpansion(NamedTuple):
    lhs: object
    rhs: object
    terms: tuple  # signed contributions, one per (i, j)

    @property
    def residual(self) -> float:
        """Residual relative to the larger of ``|lhs|`` and the absolute term mass.

        Normalising by the term mass keeps the residual meaningful when
        cancellation drives ``A_t`` to zero.
        """
        scale = max(abs(float(self.lhs)), math.fsum(abs(float(x)) for x in self.terms))
        diff = abs(float(self.lhs - self.rhs))
        return 0.0 if scale == 0.0 else diff / scale


def _expand(seq: JumpSequence, n: int, t, alternating: bool) -> PowerExpansion:
    if n < 1:
        raise ValueError("power order must be at least 1")
    jumps = seq.jumps(t)
    a_t = sum((jp.f for jp in jumps), seq._zero())
    terms = []
    for i in range(1, n + 1):
        coef = binomial(n, i)
        if alternating and i % 2 == 0:
            coef = -coef
        for jp in jumps:
            base = jp.post if alternating else a_t - jp.post
            terms.append(coef * base ** (n - i) * jp.f ** i)
    rhs = sum(terms, seq._zero())
    return PowerExpansion(a_t ** n, rhs, tuple(terms))


def power_forward(seq: JumpSequence, n: int, t=None) -> PowerExpansion:
    """Expand ``A_t^n`` with alternating signs and post-jump values ``A_{s_j}``.

    ``rhs = sum_i (-1)^(i-1) C(n,i) sum_j A_{s_j}^(n-i) f_j^i``.
    """
    return _expand(seq, n, seq.t_horizon if t is None else t, True)


def power_backward(seq: JumpSequence, n: int, t=None) -> PowerExpansion:
    """Expand ``A_t^n`` with positive signs and remaining increments ``A_t - A_{s_j}``."""
    return _expand(seq, n, seq.t_horizon if t is None else t, False)


def batch_additive_functional(counts: np.ndarray, f_values: np.ndarray) -> np.ndarray:
    """Per-path ``A_t`` from flat jump values grouped by path.

    ``f_values`` lists the marks of path 0, then path 1, ... with ``counts[p]``
    marks for path ``p``.  Summation runs left to right inside each path, so the
    result does not depend on how paths are batched.
    """
    counts = np.asarray(counts, dtype=np.int64)
    f_values = np.asarray(f_values, dtype=float)
    if counts.sum() != f_values.size:
        raise ValueError("counts do not match the number of jump values")
    out = np.zeros(counts.size)
    if f_values.size == 0:
        return out
    starts = np.cumsum(counts) - counts
    nonempty = counts > 0
    out[nonempty] = np.add.reduceat(f_values, starts[nonempty])
    return out
