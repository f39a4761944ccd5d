"""Spectral densities, free transforms and largest-eigenvalue rate functions
for Wigner-type matrices with a variance profile."""

from __future__ import annotations

from .profile import (
    BlockProfile,
    GridProfile,
    ProfileError,
    ScalingMatrix,
    check_concavity,
    discretize,
    load_profile,
    materialize,
)

__version__ = "0.1.0"

__all__ = [
    "BlockProfile",
    "GridProfile",
    "ProfileError",
    "ScalingMatrix",
    "check_concavity",
    "discretize",
    "load_profile",
    "materialize",
    "__version__",
]
