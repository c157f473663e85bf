"""Rotation/scale equivariant steerable filter banks with desk-scale training."""

from .basis import KernelGrid, basis_list, steer, steer_dsigma
from .conv import FeatureMap, InputImage
from .data import LabeledImage, MosaicSpec, OODTransform, generate_mosaic
from .filterbank import (
    FilterBank,
    FilterTensor,
    RotationScheme,
    ScaleGroup,
    inflate_rotations,
    kernel_extent,
    materialize,
)
from .net import Model, ModelConfig, Prediction, build_model, mean_iou, predict
from .train import TrainConfig, backward, fit

__all__ = [
    "KernelGrid",
    "basis_list",
    "steer",
    "steer_dsigma",
    "FeatureMap",
    "InputImage",
    "LabeledImage",
    "MosaicSpec",
    "OODTransform",
    "generate_mosaic",
    "FilterBank",
    "FilterTensor",
    "RotationScheme",
    "ScaleGroup",
    "inflate_rotations",
    "kernel_extent",
    "materialize",
    "Model",
    "ModelConfig",
    "Prediction",
    "build_model",
    "mean_iou",
    "predict",
    "TrainConfig",
    "backward",
    "fit",
]

__version__ = "0.1.0"
