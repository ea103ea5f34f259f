"""Growth rates: strictly increasing positive weights generalizing e^t.

A rate mu has mu(0) = 1, tends to 0 at -inf and to +inf at +inf.  The
delay-compatibility constant N(r) bounds mu(s + r) / mu(s) uniformly in s;
the three built-in rates carry closed forms for it, plus closed-form
inverses used by the change-of-variable quadratures elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DegenerateGrid, NonPositiveDelay

ArrayLike = "float | np.ndarray"


@dataclass(frozen=True)
class GrowthRate:
    """A differentiable growth rate with optional closed-form extras.

    eval and deriv accept scalars or numpy arrays.  closed_form_N maps a
    delay r to the ratio bound N(r) > 1 when one is known analytically.
    inverse is the functional inverse of eval, available for every
    catalogued rate and required by the truncated improper integrals.
    """

    label: str
    eval: Callable
    deriv: Callable
    closed_form_N: Optional[Callable] = None
    inverse: Optional[Callable] = None

    def __call__(self, t):
        return self.eval(t)

    def inverse_or_solve(self, u, lo=-200.0, hi=200.0):
        """mu^{-1}(u), using the closed form when present, else bisection."""
        if self.inverse is not None:
            return self.inverse(u)
        u = np.asarray(u, dtype=float)
        lo_arr = np.full(u.shape, lo, dtype=float)
        hi_arr = np.full(u.shape, hi, dtype=float)
        for _ in range(200):
            mid = 0.5 * (lo_arr + hi_arr)
            below = self.eval(mid) < u
            lo_arr = np.where(below, mid, lo_arr)
            hi_arr = np.where(below, hi_arr, mid)
        return 0.5 * (lo_arr + hi_arr)


def mu_weight(g: GrowthRate, t: float, exponent: float) -> float:
    """mu(t)^(-sgn(t) * exponent) with sgn(0) = 0, so the weight at 0 is 1."""
    s = np.sign(t)
    return np.asarray(g.eval(t)) ** (-s * exponent)


def _candidate_points(r: float) -> np.ndarray:
    # Analytic argmax candidates: the catalogued piecewise rates attain the
    # ratio supremum at s = -r/2, with seams at -r and 0.
    return np.array([-r / 2.0, -r, 0.0])


def ratio_bound_N(g: GrowthRate, r: float, grid) -> float:
    """Bound on mu(s+r)/mu(s): max of the closed form (if any) and a scan.

    The scan always includes the analytic candidates -r/2, -r, 0 on top of
    the supplied grid.
    """
    if r <= 0:
        raise NonPositiveDelay(f"delay must be positive, got {r}")
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DegenerateGrid("empty grid for ratio scan")
    pts = np.concatenate([grid.ravel(), _candidate_points(r)])
    sup = float(np.max(g.eval(pts + r) / g.eval(pts)))
    if g.closed_form_N is not None:
        sup = max(sup, float(g.closed_form_N(r)))
    return sup


def verify_property_H(g: GrowthRate, r: float, grid, N: float) -> bool:
    """True iff mu(s+r)/mu(s) <= N (up to 1e-12 slack) for every s in grid."""
    if N <= 1:
        raise ValueError(f"ratio bound N must exceed 1, got {N}")
    if r <= 0:
        raise NonPositiveDelay(f"delay must be positive, got {r}")
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise DegenerateGrid("empty grid for property check")
    ratios = g.eval(grid + r) / g.eval(grid)
    return bool(np.all(ratios <= N * (1.0 + 1e-12)))


def _exp_rate() -> GrowthRate:
    return GrowthRate(
        label="exp",
        eval=np.exp,
        deriv=np.exp,
        closed_form_N=lambda r: float(np.exp(r)),
        inverse=np.log,
    )


def _poly_rate() -> GrowthRate:
    # t + 1 on the right half line, 1/(1 - t) on the left; C^1 across 0.
    def ev(t):
        t = np.asarray(t, dtype=float)
        return np.piecewise(t, [t >= 0], [lambda x: x + 1.0, lambda x: 1.0 / (1.0 - x)])

    def dv(t):
        t = np.asarray(t, dtype=float)
        return np.piecewise(t, [t >= 0], [lambda x: np.ones_like(x), lambda x: 1.0 / (1.0 - x) ** 2])

    def inv(u):
        u = np.asarray(u, dtype=float)
        return np.piecewise(u, [u >= 1], [lambda x: x - 1.0, lambda x: 1.0 - 1.0 / x])

    return GrowthRate(
        label="poly",
        eval=ev,
        deriv=dv,
        closed_form_N=lambda r: r * r / 4.0 + r + 1.0,
        inverse=inv,
    )


def _log_rate() -> GrowthRate:
    # ln(t + e) on the right, 1/ln(e - t) on the left; C^1 across 0.
    def ev(t):
        t = np.asarray(t, dtype=float)
        return np.piecewise(t, [t >= 0], [lambda x: np.log(x + np.e), lambda x: 1.0 / np.log(np.e - x)])

    def dv(t):
        t = np.asarray(t, dtype=float)
        return np.piecewise(
            t,
            [t >= 0],
            [lambda x: 1.0 / (x + np.e), lambda x: 1.0 / ((np.e - x) * np.log(np.e - x) ** 2)],
        )

    def inv(u):
        u = np.asarray(u, dtype=float)
        # small u maps to times near -exp(1/u); past ~1/709 that overflows
        # to -inf, the honest signal that the horizon is unrepresentable
        with np.errstate(over="ignore"):
            return np.piecewise(u, [u >= 1], [lambda x: np.exp(x) - np.e, lambda x: np.e - np.exp(1.0 / x)])

    return GrowthRate(
        label="log",
        eval=ev,
        deriv=dv,
        closed_form_N=lambda r: float(np.log(np.e + r / 2.0) ** 2),
        inverse=inv,
    )


def builtin_catalogue() -> list[GrowthRate]:
    """The three built-in rates: exponential, polynomial-type, logarithmic-type."""
    return [_exp_rate(), _poly_rate(), _log_rate()]


def rate_by_id(label: str) -> GrowthRate:
    for g in builtin_catalogue():
        if g.label == label:
            return g
    raise KeyError(f"unknown growth rate id {label!r}; known: exp, poly, log")


def verify_growth_rate(g: GrowthRate, grid, fd_step: float = 1e-7) -> list[str]:
    """Check the defining invariants on a grid; returns a list of violations.

    fd_step is small enough that the one-sided curvature mismatch of the
    piecewise rates at t = 0 stays below the 1e-6 relative tolerance on the
    central difference.
    """
    grid = np.sort(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise DegenerateGrid("empty grid for invariant check")
    problems: list[str] = []
    vals = np.asarray(g.eval(grid), dtype=float)
    if np.any(vals <= 0):
        problems.append("mu must be positive on the grid")
    if np.any(np.diff(vals) <= 0):
        problems.append("mu must be strictly increasing on the grid")
    if abs(float(g.eval(0.0)) - 1.0) > 1e-12:
        problems.append(f"mu(0) = {float(g.eval(0.0))!r} differs from 1 beyond 1e-12")
    fd = (np.asarray(g.eval(grid + fd_step)) - np.asarray(g.eval(grid - fd_step))) / (2 * fd_step)
    dv = np.asarray(g.deriv(grid), dtype=float)
    rel = np.abs(fd - dv) / np.maximum(np.abs(dv), 1e-300)
    if np.any(rel > 1e-6):
        worst = grid[int(np.argmax(rel))]
        problems.append(f"derivative mismatch vs central difference at t={worst}")
    return problems
