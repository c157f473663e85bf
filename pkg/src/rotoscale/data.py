"""Procedural texture mosaics and the rotate/rescale evaluation transforms.

A mosaic is a Voronoi partition of the square into one region per class,
each filled with a sinusoidal stripe texture.  Stripe orientation is fixed
per class, so orientation alone carries the class identity; period and
contrast are per-class knobs.  Everything is a pure function of (spec,
seed).

Rotation convention: a positive angle moves content the same way as
steering a filter to a larger theta, so rotating an input by a quarter
turn corresponds to shifting rotation channels by R/4.  Angles within
1e-12 of a multiple of pi/2 take an exact index-remap path with no
interpolation; other angles resample bilinearly (images) or by nearest
neighbor (masks) and fill out-of-frame pixels with 0 / class 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conv import InputImage

QUARTER = math.pi / 2.0


@dataclass(frozen=True)
class MosaicSpec:
    """Layout and per-class texture parameters for one mosaic family."""

    size: int
    n_classes: int = 5
    orientations: tuple | None = None
    periods: tuple | None = None
    contrasts: tuple | None = None

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("mosaic size must be at least 8 pixels")
        if self.n_classes < 1:
            raise ValueError("need at least one texture class")
        for name in ("orientations", "periods", "contrasts"):
            values = getattr(self, name)
            if values is not None and len(values) != self.n_classes:
                raise ValueError(f"{name} must have one entry per class")
        if any(p < 2 for p in self.class_periods()):
            raise ValueError("stripe periods must be at least 2 pixels")

    def class_orientations(self):
        if self.orientations is not None:
            return tuple(self.orientations)
        return tuple(math.pi * c / self.n_classes for c in range(self.n_classes))

    def class_periods(self):
        return tuple(self.periods) if self.periods is not None else (6.0,) * self.n_classes

    def class_contrasts(self):
        return tuple(self.contrasts) if self.contrasts is not None else (0.9,) * self.n_classes


@dataclass(frozen=True)
class LabeledImage:
    image: InputImage
    mask: np.ndarray

    def __post_init__(self):
        if self.mask.shape != self.image.values.shape[1:]:
            raise ValueError("mask shape must match image spatial dims")


@dataclass(frozen=True)
class OODTransform:
    """Rotate-then-rescale evaluation transform."""

    angle: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not 0.5 <= self.scale <= 2.0:
            raise ValueError(f"scale factor must lie in [0.5, 2], got {self.scale}")


def generate_mosaic(spec: MosaicSpec, seed: int) -> LabeledImage:
    """Deterministic mosaic: Voronoi regions, one stripe texture per class."""
    rng = np.random.default_rng(seed)
    n = spec.size
    sites = rng.uniform(0.0, n, size=(spec.n_classes, 2))
    # Degenerate layouts (near-coincident sites) are resampled internally.
    while spec.n_classes > 1 and _min_site_distance(sites) < 2.0:
        sites = rng.uniform(0.0, n, size=(spec.n_classes, 2))
    rows, cols = np.mgrid[0:n, 0:n].astype(float)
    d2 = (rows[None] - sites[:, 0, None, None]) ** 2 + (cols[None] - sites[:, 1, None, None]) ** 2
    mask = np.argmin(d2, axis=0)

    image = np.zeros((n, n))
    phases = rng.uniform(0.0, 2.0 * math.pi, size=spec.n_classes)
    orientations = spec.class_orientations()
    periods = spec.class_periods()
    contrasts = spec.class_contrasts()
    for c in range(spec.n_classes):
        phi = orientations[c]
        wave = (2.0 * math.pi / periods[c]) * (
            cols * math.cos(phi) + rows * math.sin(phi)
        )
        texture = 0.5 + 0.5 * contrasts[c] * np.sin(wave + phases[c])
        image = np.where(mask == c, texture, image)
    return LabeledImage(InputImage(image[None]), mask)


def _min_site_distance(sites: np.ndarray) -> float:
    deltas = sites[:, None, :] - sites[None, :, :]
    d = np.sqrt((deltas**2).sum(axis=2))
    return float(d[np.triu_indices(len(sites), k=1)].min())


def generate_blobs(size: int, count: int, seed: int) -> np.ndarray:
    """Smooth band-limited test image: a sum of oriented Gaussian blobs in [0, 1]."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    acc = np.zeros((size, size))
    for _ in range(count):
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, size=2)
        phi = rng.uniform(0.0, math.pi)
        long_ax = rng.uniform(size / 8.0, size / 5.0)
        short_ax = rng.uniform(size / 16.0, size / 9.0)
        amp = rng.uniform(0.4, 1.0) * rng.choice([-1.0, 1.0])
        u = (cols - cx) * math.cos(phi) + (rows - cy) * math.sin(phi)
        v = -(cols - cx) * math.sin(phi) + (rows - cy) * math.cos(phi)
        acc += amp * np.exp(-(u**2) / (2 * long_ax**2) - (v**2) / (2 * short_ax**2))
    peak = np.abs(acc).max()
    if peak > 0:
        acc /= 2.0 * peak
    return acc + 0.5


def quarter_turn(values: np.ndarray, turns: int = 1) -> np.ndarray:
    """Exact rotation by turns * 90 degrees on the last two axes.

    This is the index remap that matches steering by +pi/2: rotating a
    sampled basis grid with quarter_turn equals sampling it at
    theta + pi/2.
    """
    return np.rot90(values, k=-turns, axes=(-2, -1))


def _is_quarter_multiple(angle: float) -> bool:
    return abs(angle / QUARTER - round(angle / QUARTER)) < 1e-12


def _source_coords(shape, angle):
    h, w = shape
    if h != w:
        raise ValueError("rotation requires a square input")
    c = (h - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    xd = cols - c
    yd = rows - c
    cos_a = math.cos(angle)
    sin_a = math.sin(angle)
    xs = xd * cos_a + yd * sin_a + c
    ys = -xd * sin_a + yd * cos_a + c
    return xs, ys


def _apply_spatial(values, fn):
    v = np.asarray(values)
    if v.ndim == 2:
        return fn(v)
    if v.ndim == 3:
        return np.stack([fn(plane) for plane in v])
    raise ValueError(f"expected 2D or [C, H, W] input, got shape {v.shape}")


def _resample_bilinear(plane, xs, ys):
    h, w = plane.shape
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    out = np.zeros(xs.shape)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            weight = (1 - np.abs(xs - xi)) * (1 - np.abs(ys - yi))
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            sample = plane[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(valid, weight * sample, 0.0)
    return out


def _resample_nearest(plane, xs, ys):
    h, w = plane.shape
    xi = np.rint(xs).astype(int)
    yi = np.rint(ys).astype(int)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    sample = plane[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(valid, sample, np.zeros((), dtype=plane.dtype))


def rotate_image(values, angle: float, interpolation: str = "bilinear"):
    """Rotate about the center; bilinear for images, nearest for masks.

    Out-of-frame pixels are filled with 0 (class 0 for masks).  Quarter-turn
    multiples bypass interpolation entirely.
    """
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    v = np.asarray(values)
    if v.shape[-2] != v.shape[-1]:
        raise ValueError("rotation requires a square input")
    if _is_quarter_multiple(angle):
        return quarter_turn(v, int(round(angle / QUARTER)) % 4)
    resample = _resample_bilinear if interpolation == "bilinear" else _resample_nearest

    def rotate_plane(plane):
        xs, ys = _source_coords(plane.shape, angle)
        return resample(plane, xs, ys)

    return _apply_spatial(v, rotate_plane)


def rescale_image(values, factor: float, interpolation: str = "bilinear"):
    """Resample to round(factor * dims) with half-pixel-center alignment."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if interpolation not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    resample = _resample_bilinear if interpolation == "bilinear" else _resample_nearest

    def rescale_plane(plane):
        h, w = plane.shape
        h_out = max(1, round(factor * h))
        w_out = max(1, round(factor * w))
        if (h_out, w_out) == (h, w) and factor == 1.0:
            return plane.copy()
        rows, cols = np.mgrid[0:h_out, 0:w_out].astype(float)
        xs = np.clip((cols + 0.5) * (w / w_out) - 0.5, 0.0, w - 1.0)
        ys = np.clip((rows + 0.5) * (h / h_out) - 0.5, 0.0, h - 1.0)
        return resample(plane, xs, ys)

    return _apply_spatial(np.asarray(values), rescale_plane)


def rotation_margin(size: int) -> int:
    """Border width ceil((sqrt(2) - 1) / 2 * size) contaminated by fill pixels."""
    return math.ceil((math.sqrt(2.0) - 1.0) / 2.0 * size)


def apply_ood(labeled: LabeledImage, transform: OODTransform) -> LabeledImage:
    """Rotate then rescale an image/mask pair with the matched interpolations."""
    image = labeled.image.values
    mask = labeled.mask
    if transform.angle != 0.0:
        image = rotate_image(image, transform.angle, "bilinear")
        mask = rotate_image(mask, transform.angle, "nearest")
    if transform.scale != 1.0:
        image = rescale_image(image, transform.scale, "bilinear")
        mask = rescale_image(mask, transform.scale, "nearest")
    return LabeledImage(InputImage(np.clip(image, 0.0, 1.0)), mask)
