"""Vector Dyson equation for block variance profiles.

For a block profile the limiting Stieltjes transform is piecewise constant
and solves, componentwise,

    -1/m_i(z) = z + sum_j alpha_j sigma_ij^2 m_j(z),    Im m_i > 0 on Im z > 0.

With this sign convention ``m`` is the Stieltjes transform
``int dmu(t)/(t - z)`` and the transform ``G(x) = int dmu(t)/(x - t)`` used
elsewhere in the package is ``-sum_i alpha_i m_i``.

Upper half plane solves use damped fixed point steps and Newton's method
along a geometric homotopy in ``Im z``.  Real points right of the support are
handled in the positive variable ``g = -m``, which solves
``g_i = 1/(x - (S_alpha g)_i)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConvergenceError, DomainError
from .profile import BlockProfile

__all__ = [
    "QveSolution",
    "SpectralDensity",
    "MomentOracle",
    "solve_qve",
    "solve_upper_batch",
    "real_axis_g",
    "density",
    "edges",
    "enumerate_words",
    "moments_oracle",
    "DEFAULT_ETAS",
    "EDGE_EPS",
]

RESIDUAL_TOL = 1e-12
DAMPING = 0.5
HOMOTOPY_RATIO = 0.5
DEFAULT_ETAS = (1e-2, 1e-3, 1e-4)
EDGE_EPS = 1e-6
EDGE_BISECTIONS = 60
MAX_MOMENT_ORDER = 6


@dataclass(frozen=True, eq=False)
class QveSolution:
    """Solution of the vector equation at one point ``z``."""

    profile: BlockProfile
    z: complex
    m: np.ndarray
    residual: float

    @property
    def total(self) -> complex:
        """``sum_i alpha_i m_i(z)``, the Stieltjes transform of the density."""
        return complex(np.dot(self.profile.alpha, self.m))


def _residual(s2a: np.ndarray, z: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Sup-norm of ``-1/m - z - S_alpha m`` per point."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = -1.0 / m - z[:, None] - m @ s2a.T
    r = np.abs(r).max(axis=1)
    return np.where(np.isfinite(r), r, np.inf)


def _fixed_point(s2a, z, m, steps):
    for _ in range(steps):
        m = (1.0 - DAMPING) * m + DAMPING * (-1.0 / (z[:, None] + m @ s2a.T))
    return m


def _solve_each(J: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Batched ``J x = F``; singular systems yield NaN rows."""
    try:
        return np.linalg.solve(J, F[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        out = np.full(F.shape, np.nan, dtype=np.result_type(J, F))
        for k in range(F.shape[0]):
            try:
                out[k] = np.linalg.solve(J[k], F[k])
            except np.linalg.LinAlgError:
                pass
        return out


def _newton(s2a, z, m, iters=40):
    """Newton on ``m (z + S m) + 1 = 0``; returns iterate and residual."""
    n = s2a.shape[0]
    eye = np.eye(n)
    res = _residual(s2a, z, m)
    for _ in range(iters):
        todo = res > 0.05 * RESIDUAL_TOL
        if not todo.any():
            break
        mt, zt = m[todo], z[todo]
        sm = mt @ s2a.T
        F = mt * (zt[:, None] + sm) + 1.0
        J = (zt[:, None] + sm)[:, :, None] * eye + mt[:, :, None] * s2a[None, :, :]
        step = _solve_each(J, -F)
        m_new = m.copy()
        m_new[todo] = mt + step
        res_new = _residual(s2a, z, m_new)
        improved = res_new < res  # NaN steps never count as improvement
        if not improved.any():
            break
        m = np.where(improved[:, None], m_new, m)
        res = np.where(improved, res_new, res)
    return m, res


def _advance(s2a, E, h_from, h_to, m, depth=0):
    """Move solutions from ``Im z = h_from`` to ``h_to`` along fixed ``Re z``."""
    z = E + 1j * h_to
    m1 = _fixed_point(s2a, z, m, 3)
    m1, res = _newton(s2a, z, m1)
    bad = ~((res <= RESIDUAL_TOL) & (m1.imag > 0).all(axis=1))
    if bad.any():
        if depth < 12:
            h_mid = np.sqrt(h_from * h_to)
            mb = _advance(s2a, E[bad], h_from, h_mid, m[bad], depth + 1)
            mb = _advance(s2a, E[bad], h_mid, h_to, mb, depth + 1)
            m1[bad] = mb
        else:
            # last resort: plain damped iteration, which contracts on Im z > 0
            zb = z[bad]
            mb = _fixed_point(s2a, zb, m[bad], 20000)
            mb, rb = _newton(s2a, zb, mb)
            if not ((rb <= RESIDUAL_TOL) & (mb.imag > 0).all(axis=1)).all():
                raise ConvergenceError(
                    "qve.solve_qve",
                    f"no convergence at Im z = {h_to:g} for Re z in "
                    f"[{E[bad].min():.6g}, {E[bad].max():.6g}]",
                )
            m1[bad] = mb
    return m1


def solve_upper_batch(
    p: BlockProfile, E: np.ndarray, etas: Sequence[float]
) -> dict[float, np.ndarray]:
    """Solve at ``E + i eta`` for every target ``eta`` (all positive).

    The homotopy starts at ``Im z = max(1, max(etas))`` from ``m = -1/z`` and
    decreases ``Im z`` geometrically, recording the solution at each target.

    Returns
    -------
    dict
        ``eta -> m`` with ``m`` of shape ``(len(E), n)``.
    """
    E = np.asarray(E, dtype=float).reshape(-1)
    targets = sorted({float(e) for e in etas}, reverse=True)
    if targets[-1] <= 0:
        raise DomainError("eta targets must be positive")
    s2a = np.asarray(p.s2_alpha)
    h = max(1.0, targets[0])
    z = E + 1j * h
    m = -1.0 / z[:, None] * np.ones((1, p.n))
    m = _fixed_point(s2a, z, m, 50)
    m, res = _newton(s2a, z, m)
    m = _advance(s2a, E, h, h, m)
    out: dict[float, np.ndarray] = {}
    for t in targets:
        while h > t:
            h_next = max(h * HOMOTOPY_RATIO, t)
            m = _advance(s2a, E, h, h_next, m)
            h = h_next
        out[t] = m.copy()
    return out


def real_axis_g(p: BlockProfile, x: np.ndarray, max_iter: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """Minimal nonnegative solution of ``g_i (x - (S_alpha g)_i) = 1``.

    Newton's method for ``g - T(g) = 0`` with ``T(g) = 1/(x - S_alpha g)`` is
    started at ``g = 0``.  Since ``T`` is monotone and convex the iterates
    increase to the minimal fixed point whenever one exists, which is the case
    exactly for ``x`` right of the support.  A point is declared outside when
    the iteration converges with nondecreasing iterates and ``x - S g > 0``.

    Returns
    -------
    g : ndarray, shape (len(x), n)
        Solution (NaN where the point failed).
    ok : ndarray of bool
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    s2a = np.asarray(p.s2_alpha)
    n = p.n
    eye = np.eye(n)
    g = np.zeros((x.size, n))
    ok = x > 0
    done = np.zeros(x.size, dtype=bool)
    for _ in range(max_iter):
        act = ok & ~done
        if not act.any():
            break
        ga, xa = g[act], x[act]
        d = xa[:, None] - ga @ s2a.T
        pos = (d > 0).all(axis=1)
        T = 1.0 / np.where(d > 0, d, 1.0)
        H = ga - T
        J = eye[None] - (T**2)[:, :, None] * s2a[None]
        step = _solve_each(J, -H)
        scale = 1.0 + np.abs(ga).max(axis=1)
        good = pos & np.isfinite(step).all(axis=1) & (step.min(axis=1) > -1e-10 * scale)
        idx = np.flatnonzero(act)
        ok[idx[~good]] = False
        ga_new = ga + np.where(good[:, None], step, 0.0)
        g[idx] = ga_new
        conv = good & (
            (np.abs(H).max(axis=1) <= 2e-15 * scale) | (np.abs(step).max(axis=1) <= 1e-15 * scale)
        )
        done[idx[conv]] = True
    ok &= done
    # confirm the fixed point residual and positivity of x - S g
    d = x[:, None] - g @ s2a.T
    with np.errstate(divide="ignore", invalid="ignore"):
        resid = np.abs(g * d - 1.0).max(axis=1)
    ok &= (d > 0).all(axis=1) & (resid <= RESIDUAL_TOL)
    g[~ok] = np.nan
    return g, ok


def solve_qve(p: BlockProfile, z: complex) -> QveSolution:
    """Solve the vector equation at ``z``.

    ``z`` may lie in the upper or lower half plane (``m(conj z) =
    conj m(z)``) or on the real axis outside the support.

    Examples
    --------
    >>> from varprof.profile import BlockProfile
    >>> sol = solve_qve(BlockProfile([[1.0]], [1.0]), 3.0)
    >>> round(-sol.m[0].real, 6)
    0.381966
    """
    z = complex(z)
    s2a = np.asarray(p.s2_alpha)
    if z.imag == 0.0:
        x = z.real
        g, ok = real_axis_g(p, np.array([abs(x)]))
        if not ok[0]:
            raise ConvergenceError(
                "qve.solve_qve", f"real point z = {x:.17g} is not outside the support (no real solution)"
            )
        m = (-np.sign(x) * g[0]).astype(complex)
    else:
        zu = z if z.imag > 0 else z.conjugate()
        m = solve_upper_batch(p, np.array([zu.real]), [zu.imag])[zu.imag][0]
        if z.imag < 0:
            m = m.conjugate()
    res = float(_residual(s2a, np.array([z]), m[None, :])[0])
    if not res <= RESIDUAL_TOL:
        raise ConvergenceError("qve.solve_qve", f"residual {res:.3e} above tolerance at z = {z!r}")
    m.setflags(write=False)
    return QveSolution(p, z, m, res)


@dataclass(frozen=True, eq=False)
class SpectralDensity:
    """Density of the limiting spectral measure sampled on a grid.

    ``flagged`` lists grid indices where the boundary value could not be
    polished and the extrapolated value was kept.
    """

    profile: BlockProfile
    grid: np.ndarray
    density: np.ndarray
    edges: tuple[float, float]
    total_mass_defect: float
    flagged: tuple[int, ...] = field(default=())

    @property
    def l(self) -> float:
        return self.edges[0]

    @property
    def r(self) -> float:
        return self.edges[1]

    def integrate(self, f: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
        """``int f(E) rho(E) dE``.

        Trapezoid rule between the first and last grid points inside the
        support; the two edge cells use the substitution ``E = r - u^2`` (and
        its mirror) with a square-root profile for the density, which keeps
        the error of the edge cells at the level of the interior cells.
        """
        E, rho = self.grid, self.density
        fE = np.ones_like(E) if f is None else np.asarray(f(E), dtype=float) * np.ones_like(E)
        l, r = self.edges
        idx = np.flatnonzero((E > l) & (E < r))
        if idx.size < 2:
            return float(np.trapezoid(fE * rho, E))
        a, b = idx[0], idx[-1]
        total = float(np.trapezoid(fE[a : b + 1] * rho[a : b + 1], E[a : b + 1]))
        u, w = np.polynomial.legendre.leggauss(16)
        for j, end, sgn in ((b, r, 1.0), (a, l, -1.0)):
            span = abs(end - E[j])
            if span == 0.0 or rho[j] == 0.0:
                continue
            uu = 0.5 * np.sqrt(span) * (u + 1.0)
            y = end - sgn * uu**2
            fy = np.ones_like(y) if f is None else np.asarray(f(y), dtype=float) * np.ones_like(y)
            dens = rho[j] * uu / np.sqrt(span)
            total += float(np.sum(w * fy * dens * 2.0 * uu) * 0.5 * np.sqrt(span))
        return total

    def moment(self, k: int) -> float:
        """``int E^k rho(E) dE``."""
        return self.integrate(lambda e: e**k)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """Cumulative distribution, normalised to total mass 1."""
        c = np.concatenate([[0.0], np.cumsum(0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid))])
        c /= c[-1]
        return np.interp(x, self.grid, c, left=0.0, right=1.0)


def _boundary_values(p: BlockProfile, E: np.ndarray, etas: Sequence[float]):
    """Boundary value ``m(E + i0)`` per grid point and a flag array."""
    sols = solve_upper_batch(p, E, etas)
    e_small, e_next = sorted(sols)[:2]
    m_s, m_n = sols[e_small], sols[e_next]
    # linear extrapolation in eta of the two closest levels
    m_rich = m_s + (m_s - m_n) * e_small / (e_next - e_small)
    s2a = np.asarray(p.s2_alpha)
    m_pol, res = _newton(s2a, E.astype(complex), m_s.copy())
    accept = (
        (res <= RESIDUAL_TOL)
        & (m_pol.imag >= -1e-14).all(axis=1)
        & (np.abs(m_pol - m_s).max(axis=1) <= 1e-2)
    )
    m = np.where(accept[:, None], m_pol, m_rich)
    return m, ~accept


def edges(p: BlockProfile) -> tuple[float, float]:
    """Support edges ``(l, r)`` with ``l = -r``.

    A coarse downward scan of ``[0, 2 max sigma + 1]`` locates the last point
    where the real-axis solve fails; 60 bisection steps then shrink the
    bracket and the outside end is returned.
    """
    hi = 2.0 * p.max_sigma + 1.0
    xs = np.linspace(0.0, hi, 201)
    _, ok = real_axis_g(p, xs)
    if not ok[-1]:
        raise ConvergenceError("qve.edges", f"real-axis solve fails at the bracket end {hi:.17g}")
    fails = np.flatnonzero(~ok)
    if fails.size == 0:
        return (0.0, 0.0)
    a, b = xs[fails[-1]], xs[fails[-1] + 1]
    for _ in range(EDGE_BISECTIONS):
        c = 0.5 * (a + b)
        if c <= a or c >= b:
            break
        if real_axis_g(p, np.array([c]))[1][0]:
            b = c
        else:
            a = c
    return (-b, b)


def density(
    p: BlockProfile,
    grid: np.ndarray | int | None = None,
    etas: Sequence[float] = DEFAULT_ETAS,
) -> SpectralDensity:
    """Limiting spectral density on a grid.

    Parameters
    ----------
    p : BlockProfile
    grid : array_like, int or None
        Explicit increasing abscissae, a point count, or ``None`` for 2001
        points; counts use the uniform grid on ``[-r - 1/2, r + 1/2]``.
    etas : sequence of float
        Homotopy levels; the two smallest are used for extrapolation.

    Notes
    -----
    The boundary value at each point is obtained by Newton's method on the
    real-axis equation started from the smallest-``eta`` solution.  Points
    where that polish is rejected keep the extrapolated value and are flagged.
    """
    l, r = edges(p)
    if grid is None or np.isscalar(grid):
        count = 2001 if grid is None else int(grid)
        E = np.linspace(l - 0.5, r + 0.5, count)
    else:
        E = np.asarray(grid, dtype=float).reshape(-1)
        if E.size < 2 or np.any(np.diff(E) <= 0):
            raise DomainError("density grid must be strictly increasing with at least two points")
    m, flag = _boundary_values(p, E, etas)
    rho = np.clip(m.imag @ p.alpha / np.pi, 0.0, None)
    # outside the support the density vanishes identically
    rho[(E > r) | (E < l)] = 0.0
    rho.setflags(write=False)
    E.setflags(write=False)
    out = SpectralDensity(p, E, rho, (l, r), 0.0, tuple(int(i) for i in np.flatnonzero(flag)))
    object.__setattr__(out, "total_mass_defect", abs(out.integrate() - 1.0))
    return out


@dataclass(frozen=True)
class MomentOracle:
    """Representative closed words up to ``max_order``.

    ``words[k]`` is a tuple of words of length ``2k + 1`` on letters
    ``0..k`` in first-occurrence canonical form.
    """

    max_order: int
    words: dict[int, tuple[tuple[int, ...], ...]]

    def count(self, k: int) -> int:
        return len(self.words[k])


def enumerate_words(k: int) -> tuple[tuple[int, ...], ...]:
    """Canonical representatives of the closed words of order ``k``.

    A word ``w_1..w_{2k+1}`` on ``k + 1`` letters qualifies when it uses every
    letter, ends where it starts, and every step ``{w_i, w_{i+1}}`` is taken
    by exactly one other step.  Words are generated directly in canonical form
    (letters numbered by first occurrence); partial words where some step is
    already used three times, or where too few positions remain to introduce
    the missing letters and return, are pruned.
    """
    if k < 0:
        raise DomainError("k must be nonnegative")
    if k == 0:
        return ((0,),)
    length = 2 * k + 1
    found: list[tuple[int, ...]] = []
    counts: dict[frozenset, int] = {}
    word = [0]

    def dfs(used: int) -> None:
        pos = len(word)
        if pos == length:
            if word[-1] == 0 and used == k + 1 and all(c == 2 for c in counts.values()):
                found.append(tuple(word))
            return
        remaining = length - pos
        if k + 1 - used > remaining - 1 and used < k + 1:
            return
        for letter in range(min(used + 1, k + 1)):
            step = frozenset((word[-1], letter))
            c = counts.get(step, 0)
            if c >= 2:
                continue
            counts[step] = c + 1
            word.append(letter)
            dfs(max(used, letter + 1))
            word.pop()
            if c == 0:
                del counts[step]
            else:
                counts[step] = c

    dfs(1)
    return tuple(found)


def _word_tree(w: Sequence[int]) -> list[tuple[int, int]]:
    """Distinct steps of a word; for a qualifying word they form a tree."""
    seen = []
    for a, b in zip(w[:-1], w[1:]):
        e = (min(a, b), max(a, b))
        if e not in seen:
            seen.append(e)
    return seen


def _tree_sum(edges_: list[tuple[int, int]], nletters: int, alpha: np.ndarray, s2: np.ndarray) -> float:
    """``sum over block labels of prod alpha prod sigma^2`` on a tree."""
    adj: dict[int, list[int]] = {v: [] for v in range(nletters)}
    for a, b in edges_:
        adj[a].append(b)
        adj[b].append(a)

    def value(v: int, parent: int) -> np.ndarray:
        out = alpha.copy()
        for c in adj[v]:
            if c != parent:
                out = out * (s2 @ value(c, v))
        return out

    return float(value(0, -1).sum())


def moments_oracle(p: BlockProfile, k: int) -> float:
    """Limiting moment ``c_{2k}`` from the combinatorial word sum.

    Examples
    --------
    >>> from varprof.profile import BlockProfile
    >>> [moments_oracle(BlockProfile([[1.0]], [1.0]), k) for k in (1, 2, 3)]
    [1.0, 2.0, 5.0]
    """
    k = int(k)
    if k < 0 or k > MAX_MOMENT_ORDER:
        raise DomainError(f"moment order k must lie in [0, {MAX_MOMENT_ORDER}], got {k}")
    if k == 0:
        return 1.0
    alpha = np.asarray(p.alpha)
    s2 = np.asarray(p.s2)
    return float(sum(_tree_sum(_word_tree(w), k + 1, alpha, s2) for w in enumerate_words(k)))


def moment_table(k_max: int) -> MomentOracle:
    """All representative words up to order ``k_max``."""
    if k_max > MAX_MOMENT_ORDER:
        raise DomainError(f"k_max must be at most {MAX_MOMENT_ORDER}")
    return MomentOracle(k_max, {k: enumerate_words(k) for k in range(1, k_max + 1)})
