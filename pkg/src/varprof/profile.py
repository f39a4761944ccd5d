"""Variance profiles: block and grid forms, validation, I/O, discretization.

A block profile is an ``n x n`` symmetric matrix of standard-deviation
multipliers ``sigma[k, l]`` together with block weights ``alpha`` summing to
one.  A grid profile samples a continuous ``sigma(x, y)`` on ``[0, 1]^2`` at
the midpoints of a ``g x g`` grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Any, Callable, Mapping, Union

import numpy as np

from .errors import ProfileError

__all__ = [
    "SYMMETRY_TOL",
    "WEIGHT_TOL",
    "BlockProfile",
    "GridProfile",
    "ScalingMatrix",
    "ConcavityReport",
    "ProfileError",
    "block_sizes",
    "load_profile",
    "profile_to_dict",
    "discretize",
    "materialize",
    "check_concavity",
]

SYMMETRY_TOL = 1e-12
WEIGHT_TOL = 1e-12


def _as_square(values: Any, name: str) -> np.ndarray:
    try:
        arr = np.array(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ProfileError(f"{name}: entries must be real numbers ({exc})") from None
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise ProfileError(f"{name}: expected a non-empty square matrix, got shape {arr.shape}")
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        i, j = bad[0]
        raise ProfileError(f"{name}[{i}][{j}] is not finite")
    return arr


def _check_symmetric_nonnegative(arr: np.ndarray, name: str) -> None:
    neg = np.argwhere(arr < 0)
    if neg.size:
        i, j = neg[0]
        raise ProfileError(f"{name}[{i}][{j}] = {arr[i, j]:.17g} is negative")
    asym = np.argwhere(np.abs(arr - arr.T) > SYMMETRY_TOL)
    if asym.size:
        i, j = asym[0]
        raise ProfileError(
            f"{name} is not symmetric: {name}[{i}][{j}] = {arr[i, j]:.17g} "
            f"but {name}[{j}][{i}] = {arr[j, i]:.17g}"
        )


@dataclass(frozen=True, eq=False)
class BlockProfile:
    """Piecewise constant variance profile.

    Parameters
    ----------
    sigma : array_like, shape (n, n)
        Symmetric nonnegative standard-deviation multipliers.
    alpha : array_like, shape (n,)
        Positive block weights summing to one.

    Notes
    -----
    The arrays are copied, validated and made read-only, so a profile can be
    shared between workers.
    """

    sigma: np.ndarray
    alpha: np.ndarray
    s2: np.ndarray = field(init=False, repr=False)
    s2_alpha: np.ndarray = field(init=False, repr=False)
    gamma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        sigma = _as_square(self.sigma, "sigma")
        _check_symmetric_nonnegative(sigma, "sigma")
        # exact symmetry so that downstream eigen-solvers see a symmetric matrix
        sigma = 0.5 * (sigma + sigma.T)
        try:
            alpha = np.array(self.alpha, dtype=float).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise ProfileError(f"alpha: entries must be real numbers ({exc})") from None
        if alpha.shape[0] != sigma.shape[0]:
            raise ProfileError(
                f"alpha has {alpha.shape[0]} entries but sigma is {sigma.shape[0]}x{sigma.shape[0]}"
            )
        bad = np.flatnonzero(~np.isfinite(alpha) | (alpha <= 0))
        if bad.size:
            k = bad[0]
            raise ProfileError(f"alpha[{k}] = {alpha[k]:.17g} must be positive")
        total = math.fsum(alpha)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ProfileError(f"alpha sums to {total:.17g}, expected 1 within {WEIGHT_TOL}")
        gamma = np.concatenate([[0.0], np.cumsum(alpha)])
        gamma[-1] = 1.0
        s2 = sigma**2
        for name, arr in (("sigma", sigma), ("alpha", alpha), ("s2", s2), ("gamma", gamma)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        s2a = s2 * alpha[None, :]
        s2a.setflags(write=False)
        object.__setattr__(self, "s2_alpha", s2a)

    @property
    def n(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def max_sigma(self) -> float:
        return float(self.sigma.max())

    def scaled(self, c: float) -> "BlockProfile":
        """Profile with every sigma multiplied by ``c``."""
        return BlockProfile(self.sigma * float(c), self.alpha)

    def __repr__(self) -> str:
        return f"BlockProfile(n={self.n}, sigma={self.sigma.tolist()}, alpha={self.alpha.tolist()})"


@dataclass(frozen=True, eq=False)
class GridProfile:
    """Continuous profile sampled at the midpoints of a ``g x g`` grid.

    ``values[a, b]`` is ``sigma((a + 1/2)/g, (b + 1/2)/g)``.  Evaluation at an
    arbitrary point uses the cell containing it (nearest midpoint).
    """

    values: np.ndarray

    def __post_init__(self) -> None:
        values = _as_square(self.values, "values")
        _check_symmetric_nonnegative(values, "values")
        values = 0.5 * (values + values.T)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def resolution(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_function(cls, func: Callable[[np.ndarray, np.ndarray], np.ndarray], resolution: int) -> "GridProfile":
        """Sample a vectorised ``func(x, y)`` at cell midpoints."""
        if resolution < 1:
            raise ProfileError("resolution must be a positive integer")
        mid = (np.arange(resolution) + 0.5) / resolution
        x, y = np.meshgrid(mid, mid, indexing="ij")
        return cls(np.asarray(func(x, y), dtype=float) * np.ones_like(x))

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        g = self.resolution
        return np.minimum(np.floor(np.asarray(x) * g).astype(int), g - 1).clip(0)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.values[self.cell_index(x), self.cell_index(y)]

    def __repr__(self) -> str:
        return f"GridProfile(resolution={self.resolution})"


Profile = Union[BlockProfile, GridProfile]


@dataclass(frozen=True, eq=False)
class ScalingMatrix:
    """Entry scaling matrix ``Sigma_N`` of an ``N x N`` random matrix.

    ``block_sizes`` is filled for block sources and ``None`` for grid sources.
    """

    entries: np.ndarray
    block_sizes: tuple[int, ...] | None = None

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    def block_index(self) -> np.ndarray:
        """Block label of every row (block sources only)."""
        if self.block_sizes is None:
            raise ProfileError("grid-sourced scaling matrix has no block structure")
        return np.repeat(np.arange(len(self.block_sizes)), self.block_sizes)


def block_sizes(alpha: np.ndarray, N: int) -> tuple[int, ...]:
    """Largest-remainder rounding of ``alpha * N``.

    Remainder ties go to the lowest block index.

    Examples
    --------
    >>> block_sizes(np.array([1/3, 2/3]), 10)
    (3, 7)
    """
    alpha = np.asarray(alpha, dtype=float)
    target = alpha * N
    sizes = np.floor(target).astype(int)
    short = N - int(sizes.sum())
    # stable sort on negated remainders keeps lower indices first on ties
    order = np.argsort(-(target - sizes), kind="stable")
    sizes[order[:short]] += 1
    return tuple(int(s) for s in sizes)


def materialize(p: Profile, N: int) -> ScalingMatrix:
    """Build ``Sigma_N`` for an ``N x N`` matrix.

    Block profiles give constant blocks of the sizes returned by
    :func:`block_sizes`; grid profiles are sampled at ``(i/N, j/N)``,
    ``i, j = 1..N``, by nearest-cell lookup.
    """
    N = int(N)
    if isinstance(p, BlockProfile):
        if N < p.n:
            raise ProfileError(f"N = {N} is smaller than the number of blocks n = {p.n}")
        sizes = block_sizes(p.alpha, N)
        if min(sizes) == 0:
            raise ProfileError(f"N = {N} leaves an empty block (sizes {sizes})")
        labels = np.repeat(np.arange(p.n), sizes)
        entries = p.sigma[np.ix_(labels, labels)].copy()
        entries.setflags(write=False)
        return ScalingMatrix(entries, sizes)
    if isinstance(p, GridProfile):
        if N < 1:
            raise ProfileError("N must be positive")
        pts = np.arange(1, N + 1) / N
        idx = p.cell_index(pts)
        entries = p.values[np.ix_(idx, idx)].copy()
        entries.setflags(write=False)
        return ScalingMatrix(entries, None)
    raise ProfileError(f"unsupported profile type {type(p).__name__}")


def _overlap_weights(n: int, g: int) -> np.ndarray:
    """``W[k, c]`` = fraction of block ``k`` covered by grid cell ``c``."""
    block_edges = np.arange(n + 1) / n
    cell_edges = np.arange(g + 1) / g
    lo = np.maximum(block_edges[:-1, None], cell_edges[None, :-1])
    hi = np.minimum(block_edges[1:, None], cell_edges[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n


def discretize(p: GridProfile, n: int) -> BlockProfile:
    """Uniform ``n``-block approximation of a grid profile.

    The variance is averaged: block ``(k, l)`` gets
    ``sqrt(mean of sigma^2 over the square + 1/(n+1))``, where the grid
    profile is treated as constant on each of its cells.  The additive
    ``1/(n+1)`` keeps every entry positive and shifts the quadratic part of
    the annealed functional by exactly ``theta^2 / ((n+1) beta)``.

    Examples
    --------
    >>> discretize(GridProfile(np.ones((3, 3))), 4).sigma[0, 0] ** 2
    1.2
    """
    if not isinstance(p, GridProfile):
        raise ProfileError("discretize expects a GridProfile")
    n = int(n)
    if n < 1:
        raise ProfileError("n must be a positive integer")
    W = _overlap_weights(n, p.resolution)
    avg = W @ (p.values**2) @ W.T
    sigma = np.sqrt(0.5 * (avg + avg.T) + 1.0 / (n + 1))
    return BlockProfile(sigma, np.full(n, 1.0 / n))


@dataclass(frozen=True)
class ConcavityReport:
    """Outcome of :func:`check_concavity`.

    ``witness`` is a zero-sum vector with ``<psi, S psi> > 0`` when the
    profile is not concave, scaled so that its largest entry in absolute
    value is 1 and its first nonzero entry is positive.
    """

    concave: bool
    max_eigenvalue: float
    witness: np.ndarray | None

    def __bool__(self) -> bool:
        return self.concave


def check_concavity(p: BlockProfile, tol: float = 1e-12) -> ConcavityReport:
    """Test negative semidefiniteness of ``S = sigma^2`` on zero-sum vectors."""
    n = p.n
    if n == 1:
        return ConcavityReport(True, 0.0, None)
    P0 = np.eye(n) - np.full((n, n), 1.0 / n)
    M = P0 @ p.s2 @ P0
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    scale = max(1.0, float(np.abs(p.s2).max()))
    top = float(w[-1])
    if top <= tol * scale:
        return ConcavityReport(True, top, None)
    v = V[:, -1]
    v = v - v.mean()
    v = v / np.abs(v).max()
    first = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
    v = np.where(np.abs(v) < 1e-14, 0.0, v) * np.sign(first)
    return ConcavityReport(False, top, v)


def _read_document(source: Any) -> Mapping[str, Any]:
    if isinstance(source, Mapping):
        return source
    if isinstance(source, (str, PathLike)):
        text = str(source)
        if isinstance(source, PathLike) or not text.lstrip().startswith("{"):
            path = Path(source)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ProfileError(f"cannot read profile document {path}: {exc}") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ProfileError(f"malformed profile document: {exc}") from None
        if not isinstance(doc, Mapping):
            raise ProfileError("profile document must be a JSON object")
        return doc
    raise ProfileError(f"unsupported profile source of type {type(source).__name__}")


def load_profile(source: Any) -> Profile:
    """Parse and validate a profile document.

    ``source`` may be a mapping, a JSON string or a path to a JSON file.  The
    document has ``kind`` equal to ``"block"`` (fields ``sigma``, ``alpha``)
    or ``"grid"`` (field ``values``, optional ``resolution`` checked against
    the shape).
    """
    doc = _read_document(source)
    kind = doc.get("kind")
    if kind == "block":
        missing = [k for k in ("sigma", "alpha") if k not in doc]
        if missing:
            raise ProfileError(f"block profile is missing field(s): {', '.join(missing)}")
        return BlockProfile(doc["sigma"], doc["alpha"])
    if kind == "grid":
        if "values" not in doc:
            raise ProfileError("grid profile is missing field: values")
        grid = GridProfile(doc["values"])
        res = doc.get("resolution")
        if res is not None and int(res) != grid.resolution:
            raise ProfileError(f"resolution {res} does not match values of size {grid.resolution}")
        return grid
    raise ProfileError(f"profile kind must be 'block' or 'grid', got {kind!r}")


def profile_to_dict(p: Profile) -> dict[str, Any]:
    """Inverse of :func:`load_profile` for manifests."""
    if isinstance(p, BlockProfile):
        return {"kind": "block", "sigma": p.sigma.tolist(), "alpha": p.alpha.tolist()}
    return {"kind": "grid", "resolution": p.resolution, "values": p.values.tolist()}
