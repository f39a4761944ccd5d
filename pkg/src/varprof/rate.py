"""Rate function of the largest eigenvalue.

Three routes are provided:

* :func:`rate_function` evaluates ``sup_theta J(theta, x) - F(theta)``
  directly (coarse grid, then golden-section refinement);
* :func:`rate_closed_form` integrates ``(beta/2) (Gbar - G)`` from the edge,
  valid when ``w -> R(w) + 1/w`` is increasing on the continued branch;
* :func:`tilt_solve` solves ``(2 theta / beta) rho(theta, x) = 1`` for the
  tilt that moves the top eigenvalue to ``x``.

:func:`pathological_rate` gives the two-branch rate of block-diagonal
two-block profiles built from the semicircle rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .annealed import AnnealedResult, MaximizerPath, annealed_f, maximizer_path, quadratic_form
from .errors import ConvergenceError, DomainError
from .freeprob import TransformTable, build_transforms
from .profile import BlockProfile, check_concavity

__all__ = [
    "RateCurve",
    "TiltSolution",
    "PathologicalRate",
    "rate_function",
    "rate_closed_form",
    "combine_rates",
    "tilt_solve",
    "pathological_rate",
    "semicircle_rate",
]

N_THETA_GRID = 256
AGREE_TOL = 1e-3
EDGE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class RateCurve:
    """Sampled rate function ``x -> I(x)``.

    ``method`` holds one tag per point (``sup_direct``, ``closed_form`` or
    ``both_agree``).  ``upper_bound_only`` is set when the maximiser path has
    jumps, in which case the sup-form value is only known to bound the rate
    from above.
    """

    beta: int
    xs: np.ndarray
    values: np.ndarray
    theta_stars: np.ndarray
    method: tuple[str, ...]
    upper_bound_only: bool = False
    diagnostics: dict = field(default_factory=dict)


def _check_xs(t: TransformTable, xs) -> np.ndarray:
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if xs.ndim != 1 or np.any(np.diff(xs) <= 0):
        raise DomainError("x grid must be strictly increasing")
    if xs[0] < t.r - EDGE_TOL * max(1.0, t.r):
        raise DomainError(f"rate: x grid starts at {xs[0]:.17g}, below the right edge r = {t.r:.17g}")
    return np.maximum(xs, t.r)


class _JEvaluator:
    """``J(theta, x)`` with the below-threshold pieces cached per ``theta'``."""

    def __init__(self, t: TransformTable, beta: int) -> None:
        self.t = t
        self.beta = beta
        self._below: dict[float, float] = {}
        self._Lx: dict[float, float] = {}

    def threshold(self, x: float) -> float:
        return self.t.g_edge if x <= self.t.r else self.t.G(x)

    def L(self, x: float) -> float:
        if x not in self._Lx:
            self._Lx[x] = float(self.t.log_potential(x))
        return self._Lx[x]

    def below_many(self, tps: np.ndarray) -> np.ndarray:
        """``J`` below threshold (independent of ``x``) for many ``theta'``."""
        todo = np.array([tp for tp in tps if tp not in self._below and tp > 0])
        if todo.size:
            K = self.t.K(todo)
            Lk = self.t.log_potential(K)
            th = 0.5 * self.beta * todo
            vals = th * (K - 1.0 / todo) - 0.5 * self.beta * (np.log(todo) + Lk)
            self._below.update(zip(todo.tolist(), vals.tolist()))
        return np.array([0.0 if tp == 0 else self._below[tp] for tp in tps])

    def __call__(self, theta, x: float) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        tp = 2.0 * theta / self.beta
        out = np.zeros_like(theta)
        thr = self.threshold(x)
        above = tp > thr
        if above.any():
            ta, tpa = theta[above], tp[above]
            out[above] = ta * x - 0.5 * self.beta - 0.5 * self.beta * (np.log(tpa) + self.L(x))
        below = ~above & (tp > 0)
        if below.any():
            out[below] = self.below_many(tp[below])
        return out


class _FEvaluator:
    """Annealed values with warm starts from the nearest computed theta."""

    def __init__(self, p: BlockProfile, beta: int, seed: int) -> None:
        self.p = p
        self.beta = beta
        self.seed = seed
        self.cache: dict[float, AnnealedResult] = {}

    def seed_path(self, path: MaximizerPath) -> None:
        for th, psi, val in zip(path.thetas, path.psis, path.values):
            self.cache[float(th)] = AnnealedResult(float(th), self.beta, float(val), psi, 0.0, 0.0)

    def __call__(self, theta: float) -> float:
        theta = float(theta)
        if theta not in self.cache:
            warm = None
            if self.cache:
                keys = np.array(list(self.cache))
                warm = self.cache[float(keys[np.argmin(np.abs(keys - theta))])].psi
            self.cache[theta] = annealed_f(self.p, theta, self.beta, warm=warm, seed=self.seed)
        return self.cache[theta].value


def _theta_cap(p: BlockProfile, beta: int, x_max: float, t: TransformTable) -> float:
    A = float(quadratic_form(p, p.alpha)) / beta
    if A <= 0:
        raise DomainError("rate: the profile has zero variance")
    lower = 0.5 * beta * (t.g_edge if math.isfinite(t.g_edge) else 1.0)
    return max(2.0 * (x_max + 1.0) / A + 1.0, 2.0 * lower)


def rate_function(
    p: BlockProfile,
    beta: int,
    xs: Sequence[float],
    *,
    t: TransformTable | None = None,
    n_grid: int = N_THETA_GRID,
    seed: int = 0,
) -> RateCurve:
    """Rate function by the variational formula ``sup_theta J - F``.

    The supremum is located on a shared grid of ``n_grid`` points in
    ``[0, theta_cap]`` and refined by golden-section search on the bracket
    around the best grid point; ties go to the smaller ``theta``.
    ``theta_cap`` uses ``F(theta) >= theta^2 <alpha, S alpha> / beta``, so
    that ``J - F`` is negative beyond it; this is verified on the grid.

    Examples
    --------
    >>> from varprof.profile import BlockProfile
    >>> c = rate_function(BlockProfile([[1.0]], [1.0]), 1, [2.5])
    >>> round(float(c.values[0]), 5)
    0.24435
    """
    if beta not in (1, 2):
        raise DomainError("beta must be 1 or 2")
    t = t if t is not None else build_transforms(p)
    xs = _check_xs(t, xs)
    cap = _theta_cap(p, beta, float(xs[-1]), t)
    grid = np.linspace(0.0, cap, n_grid)
    path = maximizer_path(p, grid, beta, seed=seed)
    Jx = _JEvaluator(t, beta)
    Fx = _FEvaluator(p, beta, seed)
    Fx.seed_path(path)
    Fgrid = path.values
    values = np.empty(xs.size)
    thetas = np.empty(xs.size)
    for k, x in enumerate(xs):
        obj = Jx(grid, float(x)) - Fgrid
        j = int(np.argmax(obj))
        if j == grid.size - 1:
            raise ConvergenceError("rate.rate_function", f"supremum not interior at x = {x:.17g}; theta cap too small")
        if j == 0:
            values[k], thetas[k] = max(obj[0], 0.0), 0.0
            continue

        def neg(th, x=float(x)):
            return -(float(Jx(th, x)[0]) - Fx(th))

        res = minimize_scalar(neg, bracket=(grid[j - 1], grid[j], grid[j + 1]), method="golden", tol=1e-10)
        if -res.fun >= obj[j]:
            values[k], thetas[k] = -res.fun, res.x
        else:
            values[k], thetas[k] = obj[j], grid[j]
    values = np.maximum(values, 0.0)
    diag = {"theta_cap": cap, "jump_locations": list(path.jump_locations)}
    return RateCurve(beta, xs, values, thetas, ("sup_direct",) * xs.size, not path.continuous, diag)


def _panel_nodes(nodes: int):
    u, w = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (u + 1.0), 0.5 * w


def rate_closed_form(
    p: BlockProfile,
    t: TransformTable | None,
    beta: int,
    xs: Sequence[float],
    *,
    nodes: int = 20,
) -> RateCurve:
    """Rate function as ``(beta/2) int_r^x (Gbar(u) - G(u)) du``.

    The integral is taken in ``s = sqrt(u - r)``, in which the integrand is
    smooth at the edge, with Gauss-Legendre panels between consecutive grid
    points.  Each panel is also integrated with ``nodes // 2`` points; the
    largest panel difference is reported as ``quadrature_error``.

    Raises
    ------
    ConvergenceError
        If ``w -> R(w) + 1/w`` cannot be verified increasing up to
        ``max(xs)``; use :func:`rate_function` instead.
    """
    if beta not in (1, 2):
        raise DomainError("beta must be 1 or 2")
    t = t if t is not None else build_transforms(p)
    xs = _check_xs(t, xs)
    ok, reason = t.check_monotone(float(xs[-1]))
    if not ok:
        raise ConvergenceError(
            "rate.rate_closed_form", f"monotonicity of R(w) + 1/w fails ({reason}); use rate_function"
        )
    r = t.r
    s_pts = np.concatenate([[0.0], np.sqrt(xs - r)])
    s_pts = np.unique(s_pts)

    def integrand(s):
        u = r + s**2
        out = np.zeros_like(s)
        # Gbar - G vanishes at the edge itself
        inside = u > r
        if inside.any():
            uu = u[inside]
            out[inside] = 2.0 * s[inside] * (t.g_bar(uu) - t.G(uu))
        return out

    vf, wf = _panel_nodes(nodes)
    vc, wc = _panel_nodes(max(nodes // 2, 2))
    a, b = s_pts[:-1], s_pts[1:]
    h = b - a
    fine = integrand((a[:, None] + h[:, None] * vf[None]).ravel()).reshape(a.size, -1)
    coarse = integrand((a[:, None] + h[:, None] * vc[None]).ravel()).reshape(a.size, -1)
    pf = h * (fine @ wf)
    pc = h * (coarse @ wc)
    cum = np.concatenate([[0.0], np.cumsum(pf)])
    lookup = dict(zip(s_pts.tolist(), cum.tolist()))
    # rounding in the first panel can leave values of order -1e-23 at the edge
    values = np.maximum(0.5 * beta * np.array([lookup[float(s)] for s in np.sqrt(xs - r)]), 0.0)
    thetas = 0.5 * beta * np.array([t.g_bar(x) if x > r else t.g_edge for x in xs])
    diag = {"quadrature_error": float(0.5 * beta * np.abs(pf - pc).max()) if pf.size else 0.0}
    return RateCurve(beta, xs, values, thetas, ("closed_form",) * xs.size, False, diag)


def combine_rates(direct: RateCurve, closed: RateCurve, tol: float = AGREE_TOL) -> RateCurve:
    """Merge the two routes, tagging points where they agree within ``tol``."""
    if direct.beta != closed.beta or not np.array_equal(direct.xs, closed.xs):
        raise DomainError("curves must share beta and x grid")
    agree = np.abs(direct.values - closed.values) <= tol
    methods = tuple("both_agree" if a else "sup_direct" for a in agree)
    diag = dict(direct.diagnostics)
    diag["max_route_difference"] = float(np.abs(direct.values - closed.values).max())
    return RateCurve(direct.beta, direct.xs, direct.values, direct.theta_stars, methods, direct.upper_bound_only, diag)


@dataclass(frozen=True, eq=False)
class TiltSolution:
    """Tilt ``theta_x`` with ``(2 theta_x / beta) rho(theta_x, x) = 1``."""

    x: float
    theta_x: float
    rho_value: float
    psi_at_theta: np.ndarray
    beta: int = 1

    @property
    def defect(self) -> float:
        return abs(2.0 * self.theta_x / self.beta * self.rho_value - 1.0)


def _rho(p: BlockProfile, g: np.ndarray, psi: np.ndarray) -> float:
    d = np.sqrt(g * psi)
    M = d[:, None] * p.s2 * d[None, :]
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[-1])


def tilt_solve(
    p: BlockProfile,
    beta: int,
    x: float,
    path: MaximizerPath,
    *,
    t: TransformTable | None = None,
    seed: int = 0,
) -> TiltSolution:
    """Smallest ``theta > 0`` solving ``(2 theta / beta) rho(theta, x) = 1``.

    ``rho(theta, x)`` is the top eigenvalue of ``sqrt(D) S sqrt(D)`` with
    ``D = diag(g_i(x) psi_i^theta)``, ``g_i(x) = -m_i(x) > 0`` the real-axis
    solution and ``psi^theta`` the annealed maximiser.  The first sign change
    on the path grid is refined by bisection; past the end of the grid the
    bracket is extended by doubling.

    Examples
    --------
    >>> import numpy as np
    >>> from varprof.profile import BlockProfile
    >>> from varprof.annealed import maximizer_path
    >>> p = BlockProfile([[1.0]], [1.0])
    >>> s = tilt_solve(p, 1, 2.5, maximizer_path(p, np.linspace(0, 3, 7), 1))
    >>> round(s.theta_x, 10)
    1.0
    """
    if not path.continuous:
        raise DomainError(
            "rate.tilt_solve: the maximiser path is discontinuous at "
            f"{list(path.jump_locations)}; the tilt equation does not apply"
        )
    t = t if t is not None else build_transforms(p)
    if x <= t.r:
        raise DomainError(f"rate.tilt_solve: x must exceed the right edge r = {t.r:.17g}")
    g = t.components(x)[0]
    concave = bool(check_concavity(p))

    def psi_of(theta, warm):
        if theta == 0:
            return np.asarray(p.alpha, dtype=float)
        return annealed_f(p, theta, beta, warm=warm, seed=seed).psi

    def h(theta, psi):
        return 2.0 * theta / beta * _rho(p, g, psi) - 1.0

    vals = np.array([h(th, ps) for th, ps in zip(path.thetas, path.psis)])
    cross = np.flatnonzero((vals[:-1] < 0) & (vals[1:] >= 0))
    if cross.size:
        k = int(cross[0])
        lo, hi, psi_lo, psi_hi = path.thetas[k], path.thetas[k + 1], path.psis[k], path.psis[k + 1]
    else:
        if vals[-1] >= 0:
            raise ConvergenceError("rate.tilt_solve", "no sign change of the tilt equation on the path grid")
        lo, psi_lo = path.thetas[-1], path.psis[-1]
        hi, psi_hi = 2.0 * max(lo, 1.0), None
        for _ in range(60):
            psi_hi = psi_of(hi, psi_lo)
            if h(hi, psi_hi) >= 0:
                break
            lo, psi_lo, hi = hi, psi_hi, 2.0 * hi
        else:
            raise ConvergenceError("rate.tilt_solve", "could not bracket the tilt equation")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi or hi - lo <= 1e-15 * hi:
            break
        psi_mid = psi_of(mid, psi_lo if concave else None)
        if h(mid, psi_mid) >= 0:
            hi, psi_hi = mid, psi_mid
        else:
            lo, psi_lo = mid, psi_mid
    theta_x = 0.5 * (lo + hi)
    psi = psi_of(theta_x, psi_lo)
    return TiltSolution(float(x), float(theta_x), _rho(p, g, psi), psi, beta)


def semicircle_rate(y, beta: int):
    """Rate of the top eigenvalue for the semicircle of radius 2.

    ``(beta/2) int_2^y sqrt(u^2 - 4) du`` for ``y >= 2`` and ``inf`` below.
    """
    y = np.asarray(y, dtype=float)
    with np.errstate(invalid="ignore"):
        s = np.sqrt(np.maximum(y * y - 4.0, 0.0))
        prim = 0.5 * y * s - 2.0 * np.log((y + s) / 2.0)
    return np.where(y >= 2.0, 0.5 * beta * prim, np.inf)


@dataclass(frozen=True, eq=False)
class PathologicalRate:
    """Two-branch rate ``min(alpha I(x/sqrt(a alpha)), (1-alpha) I(x/sqrt(b(1-alpha))))``.

    ``active`` is 0 or 1 per point (``-1`` where the rate is infinite);
    ``switches`` lists the points where the active branch changes;
    ``nonconvex`` reports negative discrete second differences.
    """

    xs: np.ndarray
    values: np.ndarray
    branches: np.ndarray
    active: np.ndarray
    switches: tuple[float, ...]
    nonconvex: bool


def pathological_rate(a: float, b: float, alpha: float, beta: int, xs: Sequence[float]) -> PathologicalRate:
    """Rate of the block-diagonal two-block model from scaled semicircle rates.

    The edges of the two branches are ``2 sqrt(a alpha)`` and
    ``2 sqrt(b (1 - alpha))``; below the larger one the rate is infinite.
    """
    if a <= 0 or b <= 0 or not 0 < alpha < 1:
        raise DomainError("need a, b > 0 and 0 < alpha < 1")
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    sa, sb = math.sqrt(a * alpha), math.sqrt(b * (1.0 - alpha))
    edge = 2.0 * max(sa, sb)

    def branches(x):
        x = np.asarray(x, dtype=float)
        return np.stack([alpha * semicircle_rate(x / sa, beta), (1.0 - alpha) * semicircle_rate(x / sb, beta)])

    br = branches(xs)
    vals = np.where(xs >= edge, br.min(axis=0), np.inf)
    active = np.where(xs >= edge, np.argmin(br, axis=0), -1)
    switches = []
    fin = np.flatnonzero(active >= 0)
    for i, j in zip(fin[:-1], fin[1:]):
        if active[i] != active[j]:
            f = lambda x: float(np.diff(branches(x), axis=0)[0])
            switches.append(float(brentq(f, xs[i], xs[j], xtol=1e-14)))
    v = vals[fin]
    x = xs[fin]
    nonconvex = False
    if v.size >= 3:
        # second divided differences on a possibly nonuniform grid
        d1 = np.diff(v) / np.diff(x)
        d2 = np.diff(d1)
        nonconvex = bool(np.any(d2 < -1e-12 * (1.0 + np.abs(v).max())))
    return PathologicalRate(xs, vals, br, active, tuple(switches), nonconvex)
