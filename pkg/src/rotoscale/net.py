"""Model assembly: equivariant layer stack, 1x1 head, weighted loss, prediction.

The network keeps one independent stream per scale group; streams share
coefficients through their layer's bank but activations never cross scale.
Each stream is first-layer conv, then hidden convs, with a relu after
every layer and no spatial resampling.  At inference the rotation axis is
reduced to one channel (max, unified channel, or per-channel selection),
a shared 1x1 head maps features to class logits, and a pixelwise softmax
yields per-scale probability maps.  Scale streams combine through the
rectified weights eta~ = softmax(logits)/2 + 1/(2*gamma), the same weights
that gate the training loss, so every scale keeps a nonzero share.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import conv, formats
from .conv import FeatureMap, InputImage
from .filterbank import (
    EXTENT_UPPER_BOUND,
    FilterBank,
    FilterTensor,
    default_scale_bounds,
    inflate_rotations,
    init_bank,
    load_bank,
    materialize,
    save_bank,
)

REDUCTION_MAX = "max"
REDUCTION_UNIFIED = "unified"
REDUCTION_PER_CHANNEL = "per_channel"
REDUCTIONS = (REDUCTION_MAX, REDUCTION_UNIFIED, REDUCTION_PER_CHANNEL)

LOG_CLIP = 1e-12


def _normalize_bounds(bounds, depth: int):
    """Accept one (lower, upper) list for all layers or one list per layer."""
    bounds = list(bounds)
    if bounds and isinstance(bounds[0][0], (int, float)):
        per_layer = [tuple((float(lo), float(hi)) for lo, hi in bounds)] * depth
    else:
        per_layer = [tuple((float(lo), float(hi)) for lo, hi in layer) for layer in bounds]
    if len(per_layer) != depth:
        raise ValueError(f"expected scale bounds for {depth} layers, got {len(per_layer)}")
    return per_layer


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    channels: tuple
    n_classes: int
    bounds: tuple
    order: int = 2
    in_channels: int = 1
    r_train: int = 1
    r_infer: int = 4
    hidden_mode: str = conv.STEERED_PER_CHANNEL
    reduction: str = REDUCTION_MAX

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be at least 2")
        if len(self.channels) != self.depth:
            raise ValueError("need one channel count per layer")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if not 1 <= self.r_train <= self.r_infer:
            raise ValueError("rotation counts must satisfy 1 <= r_train <= r_infer")
        if self.hidden_mode not in conv.HIDDEN_MODES:
            raise ValueError(f"unknown hidden mode {self.hidden_mode!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown rotation reduction {self.reduction!r}")
        per_layer = _normalize_bounds(self.bounds, self.depth)
        if len({len(layer) for layer in per_layer}) != 1:
            raise ValueError("every layer needs the same number of scale groups")
        object.__setattr__(self, "bounds", tuple(per_layer))
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def n_groups(self) -> int:
        return len(self.bounds[0])

    def layer_bounds(self, layer: int):
        return self.bounds[layer]


@dataclass
class Head:
    """1x1 readout: class logits = weights @ features + bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("head expects weights [K, C] and bias [K]")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("head parameters must be finite")


@dataclass
class ScaleWeights:
    """Trainable per-scale importance; rectified() keeps every scale > 1/(2*gamma)."""

    logits: np.ndarray

    def weights(self) -> np.ndarray:
        z = self.logits - self.logits.max()
        e = np.exp(z)
        return e / e.sum()

    def rectified(self) -> np.ndarray:
        gamma = len(self.logits)
        return self.weights() / 2.0 + 1.0 / (2.0 * gamma)


@dataclass
class Model:
    config: ModelConfig
    banks: list[FilterBank]
    head: Head
    scale_weights: ScaleWeights


@dataclass
class Prediction:
    per_scale_probs: list
    combined_probs: np.ndarray
    label_map: np.ndarray

    def __post_init__(self):
        for probs in list(self.per_scale_probs) + [self.combined_probs]:
            sums = probs.sum(axis=0)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise ValueError("per-pixel probabilities must sum to 1")


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    banks = []
    for layer in range(config.depth):
        c_in = config.in_channels if layer == 0 else config.channels[layer - 1]
        banks.append(
            init_bank(
                layer_index=layer + 1,
                c_out=config.channels[layer],
                c_in=c_in,
                order=config.order,
                bounds=config.layer_bounds(layer),
                rotations=config.r_train,
                rng=rng,
            )
        )
    c_last = config.channels[-1]
    head = Head(
        weights=rng.uniform(-1.0, 1.0, size=(config.n_classes, c_last)) / np.sqrt(c_last),
        bias=np.zeros(config.n_classes),
    )
    return Model(config, banks, head, ScaleWeights(np.zeros(config.n_groups)))


def materialize_model(
    model: Model, rotations: int | None = None, extent_policy: str = EXTENT_UPPER_BOUND
) -> list[list[FilterTensor]]:
    """Filter tensors indexed [layer][group], optionally re-keyed to R=rotations."""
    tensors = []
    for bank in model.banks:
        if rotations is not None and rotations != bank.rotations.count:
            bank = inflate_rotations(bank, rotations)
        tensors.append([materialize(bank, k, extent_policy) for k in range(bank.n_groups)])
    return tensors


def forward_streams(
    image: InputImage, model: Model, tensors: list[list[FilterTensor]] | None = None
) -> list[FeatureMap]:
    """Run every scale stream; returns the post-relu last-layer map per group.

    Passing pre-materialized tensors overrides the model parameters, which
    is also the seam for perturbing a single group's filters without
    touching the shared coefficients.
    """
    if tensors is None:
        tensors = materialize_model(model)
    outputs = []
    for k in range(model.config.n_groups):
        fmap = conv.relu(conv.first_layer_forward(image, tensors[0][k]))
        fmap.scale_group = k
        for layer in range(1, model.config.depth):
            fmap = conv.relu(
                conv.hidden_layer_forward(fmap, tensors[layer][k], model.config.hidden_mode)
            )
        outputs.append(fmap)
    return outputs


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Pixelwise softmax over the leading class axis."""
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def head_and_softmax(fmap: FeatureMap, head: Head) -> np.ndarray:
    """Apply the 1x1 head to an R=1 feature map and return [K, H, W] probs."""
    if fmap.rotations != 1:
        raise ValueError("head expects a single rotation channel; reduce first")
    logits = np.einsum("kc,cxy->kxy", head.weights, fmap.values[:, 0])
    logits += head.bias[:, None, None]
    return softmax_probs(logits)


def reduce_rotations(fmap: FeatureMap, strategy: str) -> FeatureMap:
    if strategy == REDUCTION_MAX:
        return conv.rotation_max(fmap)
    if strategy == REDUCTION_UNIFIED:
        return conv.rotation_select_unified(fmap)[0]
    if strategy == REDUCTION_PER_CHANNEL:
        return conv.rotation_select_per_channel(fmap)
    raise ValueError(f"unknown rotation reduction {strategy!r}")


def multi_scale_loss(per_scale_probs, targets: np.ndarray, scale_weights: ScaleWeights) -> float:
    """Pixel-mean cross-entropy, summed over scales with the rectified weights."""
    eta = scale_weights.rectified()
    if len(per_scale_probs) != len(eta):
        raise ValueError("need one probability map per scale group")
    total = 0.0
    for k, probs in enumerate(per_scale_probs):
        n_classes = probs.shape[0]
        if targets.min() < 0 or targets.max() >= n_classes:
            raise ValueError("target labels out of range")
        true_probs = np.take_along_axis(probs, targets[None], axis=0)[0]
        total += eta[k] * float(-np.log(np.clip(true_probs, LOG_CLIP, None)).mean())
    return total


def predict(
    image: InputImage,
    model: Model,
    rotations: int | None = None,
    reduction: str | None = None,
    tensors: list[list[FilterTensor]] | None = None,
) -> Prediction:
    """Full inference: streams, rotation reduction, head, weighted combination."""
    if tensors is None:
        tensors = materialize_model(model, rotations)
    reduction = reduction or model.config.reduction
    eta = model.scale_weights.rectified()
    per_scale = []
    for fmap in forward_streams(image, model, tensors):
        reduced = reduce_rotations(fmap, reduction)
        per_scale.append(head_and_softmax(reduced, model.head))
    combined = sum(eta[k] * per_scale[k] for k in range(len(per_scale)))
    return Prediction(per_scale, combined, np.argmax(combined, axis=0))


def mean_iou(predicted: np.ndarray, truth: np.ndarray, n_classes: int, margin: int = 0) -> float:
    """Mean over classes of |intersection| / |union|.

    Classes absent from both maps are excluded.  A nonzero margin crops
    that many border pixels before counting, for evaluations whose
    transforms filled the frame corners.
    """
    if predicted.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    if margin:
        if 2 * margin >= min(predicted.shape):
            raise ValueError("margin leaves no interior pixels")
        predicted = predicted[margin:-margin, margin:-margin]
        truth = truth[margin:-margin, margin:-margin]
    scores = []
    for c in range(n_classes):
        pred_c = predicted == c
        true_c = truth == c
        union = np.logical_or(pred_c, true_c).sum()
        if union == 0:
            continue
        scores.append(np.logical_and(pred_c, true_c).sum() / union)
    return float(np.mean(scores)) if scores else 1.0


def save_checkpoint(model: Model, directory) -> None:
    """Write config, per-layer banks, head tensors; bit-exact round-trip."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    items = {
        "depth": str(cfg.depth),
        "channels": ",".join(str(c) for c in cfg.channels),
        "n_classes": str(cfg.n_classes),
        "order": str(cfg.order),
        "in_channels": str(cfg.in_channels),
        "r_train": str(cfg.r_train),
        "r_infer": str(cfg.r_infer),
        "hidden_mode": cfg.hidden_mode,
        "reduction": cfg.reduction,
    }
    for k, logit in enumerate(model.scale_weights.logits):
        items[f"scale_weight_logit{k}"] = repr(float(logit))
    formats.write_keyvalues(directory / "model.txt", items)
    for layer, bank in enumerate(model.banks, 1):
        save_bank(bank, directory / f"layer{layer:02d}.bank.txt", directory / f"layer{layer:02d}.coeffs.ten1")
    formats.save_tensor(directory / "head.weights.ten1", model.head.weights)
    formats.save_tensor(directory / "head.bias.ten1", model.head.bias)


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    items = formats.read_keyvalues(directory / "model.txt")
    depth = int(items["depth"])
    banks = [
        load_bank(directory / f"layer{layer:02d}.bank.txt", directory / f"layer{layer:02d}.coeffs.ten1")
        for layer in range(1, depth + 1)
    ]
    bounds = tuple(
        tuple((g.lower, g.upper) for g in bank.groups) for bank in banks
    )
    config = ModelConfig(
        depth=depth,
        channels=tuple(int(c) for c in items["channels"].split(",")),
        n_classes=int(items["n_classes"]),
        bounds=bounds,
        order=int(items["order"]),
        in_channels=int(items["in_channels"]),
        r_train=int(items["r_train"]),
        r_infer=int(items["r_infer"]),
        hidden_mode=items["hidden_mode"],
        reduction=items["reduction"],
    )
    n_groups = banks[0].n_groups
    logits = np.array([float(items[f"scale_weight_logit{k}"]) for k in range(n_groups)])
    head = Head(
        weights=formats.load_tensor(directory / "head.weights.ten1"),
        bias=formats.load_tensor(directory / "head.bias.ten1"),
    )
    return Model(config, banks, head, ScaleWeights(logits))
