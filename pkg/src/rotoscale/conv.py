"""Equivariant convolution layers and rotation-channel reductions.

Convolution here means cross-correlation (no kernel flip) with zero "same"
padding, so output spatial dims equal input dims and the kernel center is
well defined for odd extents.  Zero padding commutes exactly with
quarter-turn rotation on square inputs, which the equivariance test suite
relies on.

Hidden layers come in two modes.  The default, ``steered-per-channel``,
convolves rotation channel r only with the filter slice steered to
theta_r, so orientation information never mixes between channels and the
rotation-channel count may differ between training and inference.  The
``summed-orientations`` mode instead convolves every input channel with
the sum of all filter orientations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .basis import KernelGrid
from .filterbank import FilterTensor

STEERED_PER_CHANNEL = "steered-per-channel"
SUMMED_ORIENTATIONS = "summed-orientations"
HIDDEN_MODES = (STEERED_PER_CHANNEL, SUMMED_ORIENTATIONS)


@dataclass(frozen=True)
class InputImage:
    """Channels-first [C, H, W] image, 1 or 3 channels, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or v.shape[0] not in (1, 3):
            raise ValueError(f"expected [C, H, W] with C in {{1, 3}}, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("image contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class FeatureMap:
    """Activation tensor [C, R, H, W] for one scale group at one layer."""

    values: np.ndarray
    scale_group: int = 0
    layer: int = 0

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ValueError(f"expected [C, R, H, W], got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def rotations(self) -> int:
        return self.values.shape[1]


def _kernel_values(kernel) -> np.ndarray:
    values = kernel.values if isinstance(kernel, KernelGrid) else np.asarray(kernel)
    if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got shape {values.shape}")
    return values


def conv_stack(inputs: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Multi-channel same cross-correlation: [D,H,W] x [C,D,k,k] -> [C,H,W].

    Accumulation runs over input channels in index order, then over kernel
    taps inside one contraction, so results are reproducible run to run.
    """
    d, height, width = inputs.shape
    c, d_k, kh, kw = kernels.shape
    if d_k != d:
        raise ValueError(f"kernel expects {d_k} input channels, got {d}")
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {kh}x{kw}")
    m = kh // 2
    padded = np.pad(inputs, ((0, 0), (m, m), (m, m)))
    windows = sliding_window_view(padded, (kh, kw), axis=(1, 2))
    out = np.zeros((c, height, width))
    for di in range(d):
        out += np.einsum("xyuv,cuv->cxy", windows[di], kernels[:, di], optimize=True)
    return out


def conv2d_same(image: np.ndarray, kernel) -> np.ndarray:
    """Same-padded cross-correlation of a single 2D image with one kernel."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    values = _kernel_values(kernel)
    return conv_stack(img[None], values[None, None])[0]


def conv_stack_input_gradient(dout: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """Adjoint of conv_stack w.r.t. its inputs: [C,H,W] x [C,D,k,k] -> [D,H,W]."""
    adjoint = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return conv_stack(dout, adjoint)


def conv_stack_kernel_gradient(inputs: np.ndarray, dout: np.ndarray, extent: int) -> np.ndarray:
    """Adjoint of conv_stack w.r.t. its kernels: returns [C,D,extent,extent]."""
    d = inputs.shape[0]
    m = extent // 2
    padded = np.pad(inputs, ((0, 0), (m, m), (m, m)))
    windows = sliding_window_view(padded, (extent, extent), axis=(1, 2))
    grads = [
        np.einsum("cxy,xyuv->cuv", dout, windows[di], optimize=True) for di in range(d)
    ]
    return np.stack(grads, axis=1)


def first_layer_forward(image: InputImage, tensor: FilterTensor) -> FeatureMap:
    """Convolve an image with one scale group's filters, all orientations.

    out[c, r] = sum over input channels of conv2d_same(image[c0], F[c, c0, r]).
    """
    values = tensor.values
    c_out, c_in, rot, kh, kw = values.shape
    if c_in != image.channels:
        raise ValueError(f"filter expects {c_in} image channels, got {image.channels}")
    kernels = values.transpose(0, 2, 1, 3, 4).reshape(c_out * rot, c_in, kh, kw)
    out = conv_stack(image.values, kernels).reshape(c_out, rot, *image.values.shape[1:])
    return FeatureMap(out)


def hidden_layer_forward(
    fmap: FeatureMap, tensor: FilterTensor, mode: str = STEERED_PER_CHANNEL
) -> FeatureMap:
    """Convolve a feature map with the next layer's filters for its group."""
    if mode not in HIDDEN_MODES:
        raise ValueError(f"unknown hidden-layer mode {mode!r}")
    f = fmap.values
    weights = tensor.values
    c_out, c_in, rot_f, kh, kw = weights.shape
    c, rot, height, width = f.shape
    if c_in != c:
        raise ValueError(f"filter expects {c_in} feature channels, got {c}")
    out = np.empty((c_out, rot, height, width))
    if mode == STEERED_PER_CHANNEL:
        if rot_f != rot:
            raise ValueError(
                f"steered-per-channel requires matching rotation counts, "
                f"got filter {rot_f} vs features {rot}"
            )
        for r in range(rot):
            out[:, r] = conv_stack(f[:, r], weights[:, :, r])
    else:
        summed = weights.sum(axis=2)
        for r in range(rot):
            out[:, r] = conv_stack(f[:, r], summed)
    return FeatureMap(out, fmap.scale_group, fmap.layer + 1)


def relu(fmap: FeatureMap) -> FeatureMap:
    return FeatureMap(np.maximum(fmap.values, 0.0), fmap.scale_group, fmap.layer)


def rotation_max(fmap: FeatureMap) -> FeatureMap:
    """Elementwise max over the rotation axis; result has R = 1."""
    return FeatureMap(fmap.values.max(axis=1, keepdims=True), fmap.scale_group, fmap.layer)


def rotation_select_unified(fmap: FeatureMap) -> tuple[FeatureMap, int]:
    """Keep the single rotation channel with the largest total activation.

    Returns the reduced map and the selected channel number, counted from 1
    to match the angle convention theta_r = 2*pi*r/R.  Ties pick the lowest
    channel.
    """
    sums = fmap.values.sum(axis=(0, 2, 3))
    best = int(np.argmax(sums))
    reduced = fmap.values[:, best : best + 1]
    return FeatureMap(reduced.copy(), fmap.scale_group, fmap.layer), best + 1


def rotation_select_per_channel(fmap: FeatureMap) -> FeatureMap:
    """Per filter channel, keep the rotation slice with the largest spatial sum."""
    sums = fmap.values.sum(axis=(2, 3))
    best = np.argmax(sums, axis=1)
    reduced = fmap.values[np.arange(fmap.values.shape[0]), best]
    return FeatureMap(reduced[:, None], fmap.scale_group, fmap.layer)
