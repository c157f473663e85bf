"""Sampled 2D Gaussian-derivative filter basis with analytic steering.

A basis element is the derivative of an isotropic 2D Gaussian, of order
``i`` along a direction ``theta`` and order ``j`` along the perpendicular
direction ``theta + pi/2``, sampled on an odd square grid of integer
offsets centered on the kernel center.  Because directional derivatives
expand into axis-aligned ones with cos/sin coefficients, rotating an
element to any angle is a small exact linear combination of axis-aligned
grids rather than an image-space resampling.

Grid convention: ``values[row, col]`` with x = col - m and y = row - m,
where m = (extent - 1) // 2.  Sampling evaluates the continuous function
at the integer offsets with no area averaging and no renormalization,
which keeps the steering identities exact to rounding error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_ORDER = 2


@dataclass(frozen=True)
class BasisSpec:
    """Parameters of one basis element: orders along theta and theta+pi/2."""

    order_i: int
    order_j: int
    theta: float
    sigma: float
    extent: int

    def __post_init__(self):
        if self.order_i < 0 or self.order_j < 0:
            raise ValueError("derivative orders must be nonnegative")
        if self.order_i + self.order_j > MAX_ORDER:
            raise ValueError(f"total derivative order exceeds {MAX_ORDER}")
        _check_sigma_extent(self.sigma, self.extent)


@dataclass(frozen=True)
class KernelGrid:
    """A sampled kernel on an odd square grid of centered integer offsets."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("kernel grid must be square")
        if v.shape[0] % 2 == 0:
            raise ValueError("kernel extent must be odd")
        if not np.isfinite(v).all():
            raise ValueError("kernel grid contains non-finite values")

    @property
    def extent(self) -> int:
        return self.values.shape[0]


def _check_sigma_extent(sigma: float, extent: int):
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if extent < 1 or extent % 2 == 0:
        raise ValueError(f"extent must be an odd positive integer, got {extent}")


def _offsets(extent: int) -> np.ndarray:
    m = (extent - 1) // 2
    return np.arange(-m, m + 1, dtype=float)


def gaussian_1d(sigma: float, extent: int) -> np.ndarray:
    """Sample the normalized 1D Gaussian at integer offsets."""
    _check_sigma_extent(sigma, extent)
    t = _offsets(extent)
    return np.exp(-t * t / (2.0 * sigma * sigma)) / (sigma * math.sqrt(2.0 * math.pi))


def gaussian_derivative_1d(order: int, sigma: float, extent: int) -> np.ndarray:
    """Sample the order-0/1/2 derivative of the 1D Gaussian.

    Closed forms: order 1 is (-t / sigma^2) g(t), order 2 is
    ((t^2 - sigma^2) / sigma^4) g(t).
    """
    g = gaussian_1d(sigma, extent)
    t = _offsets(extent)
    s2 = sigma * sigma
    if order == 0:
        return g
    if order == 1:
        return (-t / s2) * g
    if order == 2:
        return ((t * t - s2) / (s2 * s2)) * g
    raise ValueError(f"unsupported derivative order {order}")


def gaussian_derivative_1d_dsigma(order: int, sigma: float, extent: int) -> np.ndarray:
    """Closed-form d/dsigma of the sampled 1D derivative of given order.

    Uses dg/dsigma = ((t^2 - sigma^2) / sigma^3) g(t) and the product rule
    on the polynomial prefactors, so gradient checks can be tight.
    """
    g = gaussian_1d(sigma, extent)
    t = _offsets(extent)
    t2 = t * t
    s2 = sigma * sigma
    if order == 0:
        return ((t2 - s2) / (s2 * sigma)) * g
    if order == 1:
        return (t * (3.0 * s2 - t2) / (s2 * s2 * sigma)) * g
    if order == 2:
        return ((t2 * t2 - 6.0 * t2 * s2 + 3.0 * s2 * s2) / (s2 * s2 * s2 * sigma)) * g
    raise ValueError(f"unsupported derivative order {order}")


def basis_list(order: int) -> list[tuple[int, int]]:
    """Ordered (i, j) pairs with i + j <= order; the order is part of the
    serialization contract because expansion coefficients index into it."""
    if order not in (1, 2):
        raise ValueError(f"basis order must be 1 or 2, got {order}")
    pairs = [(0, 0), (1, 0), (0, 1)]
    if order == 2:
        pairs += [(2, 0), (1, 1), (0, 2)]
    return pairs


def sample_axis_aligned(i: int, j: int, sigma: float, extent: int) -> KernelGrid:
    """Sample d^(i+j) G / dx^i dy^j as the outer product of 1D samples."""
    if i < 0 or j < 0 or i + j > MAX_ORDER:
        raise ValueError(f"unsupported axis-aligned orders ({i}, {j})")
    gx = gaussian_derivative_1d(i, sigma, extent)
    gy = gaussian_derivative_1d(j, sigma, extent)
    return KernelGrid(np.outer(gy, gx))


def _cos_sin(theta: float) -> tuple[float, float]:
    # Angles within 1e-12 of a quarter turn snap to exact {-1, 0, 1}
    # coefficients, so steering by multiples of pi/2 is an exact grid remap.
    quarter = theta / (math.pi / 2.0)
    nearest = round(quarter)
    if abs(quarter - nearest) < 1e-12:
        c = (1.0, 0.0, -1.0, 0.0)[nearest % 4]
        s = (0.0, 1.0, 0.0, -1.0)[nearest % 4]
        return c, s
    return math.cos(theta), math.sin(theta)


def steer_coefficients(i: int, j: int, theta: float) -> list[tuple[tuple[int, int], float]]:
    """Expansion of the (i, j) element at angle theta over axis-aligned grids.

    Order-one directions expand with (cos, sin) interpolation; the
    perpendicular direction uses theta + pi/2, i.e. (-sin, cos).  Order-two
    elements are the squared directional operators.
    """
    c, s = _cos_sin(theta)
    if (i, j) == (0, 0):
        return [((0, 0), 1.0)]
    if (i, j) == (1, 0):
        return [((1, 0), c), ((0, 1), s)]
    if (i, j) == (0, 1):
        return [((1, 0), -s), ((0, 1), c)]
    if (i, j) == (2, 0):
        return [((2, 0), c * c), ((1, 1), 2.0 * c * s), ((0, 2), s * s)]
    if (i, j) == (0, 2):
        return [((2, 0), s * s), ((1, 1), -2.0 * c * s), ((0, 2), c * c)]
    if (i, j) == (1, 1):
        return [((2, 0), -c * s), ((1, 1), c * c - s * s), ((0, 2), c * s)]
    raise ValueError(f"unsupported steered orders ({i}, {j})")


def _combine(i, j, theta, sampler, sigma, extent) -> KernelGrid:
    acc = np.zeros((extent, extent))
    for (ax_i, ax_j), coeff in steer_coefficients(i, j, theta):
        if coeff != 0.0:
            acc += coeff * sampler(ax_i, ax_j, sigma, extent)
    return KernelGrid(acc)


def steer(i: int, j: int, theta: float, sigma: float, extent: int) -> KernelGrid:
    """Sample the basis element of orders (i, j) steered to angle theta."""

    def sampler(ax_i, ax_j, sg, ext):
        return np.outer(
            gaussian_derivative_1d(ax_j, sg, ext), gaussian_derivative_1d(ax_i, sg, ext)
        )

    return _combine(i, j, theta, sampler, sigma, extent)


def steer_dsigma(i: int, j: int, theta: float, sigma: float, extent: int) -> KernelGrid:
    """Elementwise d/dsigma of steer(i, j, theta, sigma, extent).

    Product rule across the two separable axes; the steering coefficients
    do not depend on sigma.
    """

    def sampler(ax_i, ax_j, sg, ext):
        gx = gaussian_derivative_1d(ax_i, sg, ext)
        gy = gaussian_derivative_1d(ax_j, sg, ext)
        dgx = gaussian_derivative_1d_dsigma(ax_i, sg, ext)
        dgy = gaussian_derivative_1d_dsigma(ax_j, sg, ext)
        return np.outer(dgy, gx) + np.outer(gy, dgx)

    return _combine(i, j, theta, sampler, sigma, extent)
