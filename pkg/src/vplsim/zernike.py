"""Zernike circle polynomials on the unit pupil, Noll indexing.

Single-index scheme j = 1..37 (up to and including the (8, 0) spherical
term).  Polynomials carry the Noll normalization: sqrt(n+1) for m = 0 and
sqrt(2(n+1)) otherwise, so that each term has unit RMS over the unit disk.
Sign convention: even j pairs with cos(m*theta), odd j with sin(m*theta).
"""

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial

import numpy as np

JMAX = 37


def noll_to_nm(j):
    """Map Noll index j to radial/azimuthal orders (n, m).

    Parameters
    ----------
    j : int
        Noll index, 1 <= j <= 37.

    Returns
    -------
    (n, m) : tuple of int
        m is signed: positive for cosine terms (even j), negative for
        sine terms (odd j); m = 0 terms are rotationally symmetric.
    """
    if not isinstance(j, (int, np.integer)):
        raise ValueError(f"Noll index must be an integer, got {j!r}")
    if j < 1 or j > JMAX:
        raise ValueError(f"Noll index out of range 1..{JMAX}: {j}")
    n = 0
    j1 = j - 1
    while j1 > n:
        n += 1
        j1 -= n
    m = (-1) ** j * ((n % 2) + 2 * ((j1 + ((n + 1) % 2)) // 2))
    return n, m


@lru_cache(maxsize=None)
def _radial_coeffs(n, m_abs):
    # exact integer-valued coefficients of rho^(n-2k), k = 0..(n-m)/2
    ks = range((n - m_abs) // 2 + 1)
    return tuple(
        (-1) ** k
        * factorial(n - k)
        // (factorial(k) * factorial((n + m_abs) // 2 - k) * factorial((n - m_abs) // 2 - k))
        for k in ks
    )


def zernike_eval(j, rho, theta):
    """Evaluate the j-th Zernike polynomial at polar points (rho, theta).

    rho and theta may be scalars or arrays (broadcast together).  Points
    with rho outside [0, 1] are a domain error.
    """
    rho = np.asarray(rho, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(rho < 0) or np.any(rho > 1):
        raise ValueError("rho outside the unit disk [0, 1]")
    n, m = noll_to_nm(j)
    m_abs = abs(m)
    coeffs = _radial_coeffs(n, m_abs)
    rad = np.zeros(np.broadcast(rho, theta).shape)
    for k, c in enumerate(coeffs):
        rad += c * rho ** (n - 2 * k)
    if m == 0:
        return np.sqrt(n + 1.0) * rad
    ang = np.cos(m_abs * theta) if m > 0 else np.sin(m_abs * theta)
    return np.sqrt(2.0 * (n + 1.0)) * rad * ang


@dataclass(frozen=True)
class PupilGrid:
    """Square sample lattice over the unit pupil.

    Points sit at x_k = (2k - n + 1)/n: symmetric about the origin with
    spacing 2/n, strictly inside [-1, 1].  mask marks rho <= 1.
    """

    n: int
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    @classmethod
    def make(cls, n: int) -> "PupilGrid":
        if n < 16 or n % 2 != 0:
            raise ValueError(f"pupil sample count must be even and >= 16, got {n}")
        ax = (2.0 * np.arange(n) - n + 1.0) / n
        x, y = np.meshgrid(ax, ax)
        rho = np.hypot(x, y)
        theta = np.arctan2(y, x)
        return cls(n=n, x=x, y=y, rho=rho, theta=theta, mask=rho <= 1.0)


@lru_cache(maxsize=4)
def _basis_stack(n):
    # (JMAX, n, n) stack of masked basis values, cached per lattice size
    grid = PupilGrid.make(n)
    rho = np.where(grid.mask, grid.rho, 0.0)
    stack = np.stack([zernike_eval(j, rho, grid.theta) for j in range(1, JMAX + 1)])
    stack *= grid.mask
    return stack


def zernike_basis(grid: PupilGrid) -> np.ndarray:
    """Return the (37, n, n) masked basis stack for a pupil grid."""
    return _basis_stack(grid.n)


@dataclass(frozen=True)
class WavefrontMap:
    """OPD map over a pupil grid, micrometres, zero outside the aperture."""

    values: np.ndarray
    grid: PupilGrid


def wavefront_map(coeffs, grid: PupilGrid) -> WavefrontMap:
    """Synthesize a wavefront from 37 Noll coefficients (micrometres RMS).

    The map is the coefficient-weighted sum of the basis stack; points
    outside the aperture are exactly zero.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (JMAX,):
        raise ValueError(f"expected {JMAX} coefficients, got shape {coeffs.shape}")
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("coefficients must be finite")
    values = np.tensordot(coeffs, zernike_basis(grid), axes=(0, 0))
    return WavefrontMap(values=values, grid=grid)
