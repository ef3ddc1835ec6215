"""Boundary-normalised kernels, evaluation grids and trapezoid quadrature."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateBandwidthError(ValueError):
    """A kernel row has no mass on the grid."""


def epanechnikov(u):
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


# name -> (K, int t^2 K, int K^2)
KERNELS = {"epanechnikov": (epanechnikov, 0.2, 0.6)}


@dataclass(frozen=True)
class KernelSpec:
    """Base kernel and per-axis bandwidths ``h_k`` in (0, 0.5]."""

    bandwidths: tuple[float, ...]
    name: str = "epanechnikov"

    def __post_init__(self):
        h = tuple(float(v) for v in np.atleast_1d(self.bandwidths))
        object.__setattr__(self, "bandwidths", h)
        if self.name not in KERNELS:
            raise ValueError(f"unknown kernel {self.name!r}")
        if any(not 0.0 < v <= 0.5 for v in h):
            raise ValueError(f"bandwidths must lie in (0, 0.5], got {h}")

    def __call__(self, u):
        return KERNELS[self.name][0](u)

    @property
    def mu2(self) -> float:
        return KERNELS[self.name][1]

    @property
    def roughness(self) -> float:
        return KERNELS[self.name][2]


def make_grid(size: int = 101) -> np.ndarray:
    """Equispaced grid on [0, 1] including both endpoints."""
    if size < 2:
        raise ValueError("grid needs at least two points")
    return np.linspace(0.0, 1.0, int(size))


def trapezoid_weights(grid) -> np.ndarray:
    """Weights ``q`` with ``sum(q * v) == trapezoid(v, grid)``."""
    z = np.asarray(grid, dtype=float)
    if z.ndim != 1 or len(z) < 2 or np.any(np.diff(z) <= 0):
        raise ValueError("grid must be strictly increasing with at least two points")
    dz = np.diff(z)
    q = np.zeros_like(z)
    q[:-1] += dz / 2
    q[1:] += dz / 2
    return q


def trapezoid_integrate(values, grid) -> float:
    """Trapezoid rule over the last axis of ``values``."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != len(grid):
        raise ValueError(f"{values.shape[-1]} values for a grid of {len(grid)} points")
    return values @ trapezoid_weights(grid)


def interior_mask(grid, h: float) -> np.ndarray:
    """Points in ``[2h, 1 - 2h]``, away from the boundary layers."""
    z = np.asarray(grid)
    return (z >= 2 * h) & (z <= 1 - 2 * h)


def normalized_kernel_matrix(
    observations, grid, h: float, kernel: str = "epanechnikov", check: bool = True
) -> np.ndarray:
    """Boundary-normalised kernel ``K_h(X_i, z_g)`` as an (n, G) matrix.

    Each row is ``h^-1 K((X_i - z)/h)`` divided by its trapezoid integral over
    the grid, so every row integrates to one under the same rule used for all
    downstream integrals.
    """
    x = np.asarray(observations, dtype=float).reshape(-1)
    z = np.asarray(grid, dtype=float)
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    raw = KERNELS[kernel][0]((x[:, None] - z[None, :]) / h) / h
    mass = raw @ trapezoid_weights(z)
    empty = mass <= 0.0
    if np.any(empty):
        if check:
            i = int(np.flatnonzero(empty)[0])
            raise DegenerateBandwidthError(
                f"bandwidth {h} leaves observation {i} (value {x[i]!r}) with no grid mass"
            )
        mass = np.where(empty, 1.0, mass)
    return raw / mass[:, None]
