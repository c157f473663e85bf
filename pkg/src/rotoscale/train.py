"""Reverse-mode gradients and a desk-scale SGD training loop.

Training always runs with a single rotation channel (the bank's angle set
is just theta = 2*pi), which is what makes the memory story work: the
other orientations are only ever materialized at inference.  Gradients
are exact reverse-mode through loss -> softmax -> head -> conv stack ->
filter materialization -> the tanh scale parameterization; the kernel
extent is pinned to each group's upper bound so the loss stays
differentiable in the scale logits.

The optimizer is plain SGD with optional momentum.  Runs are pure
functions of (dataset, model, config): batches are visited in a fixed
cyclic order unless shuffling is requested, in which case the order comes
from the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import net
from .conv import conv_stack, conv_stack_input_gradient, conv_stack_kernel_gradient
from .data import LabeledImage
from .filterbank import EXTENT_UPPER_BOUND, basis_grid_stack
from .net import Model, multi_scale_loss, softmax_probs

PARAM_FAMILIES = ("coeffs", "scale_logits", "head", "scale_weights")


class NumericalError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


@dataclass
class GradientSet:
    """Gradients shaped like the trainable parameters; zero when frozen."""

    coeffs: list
    scale_logits: list
    head_weights: np.ndarray
    head_bias: np.ndarray
    scale_weight_logits: np.ndarray


@dataclass
class TrainConfig:
    step_size: float
    steps: int
    batch_size: int | None = None
    seed: int = 0
    momentum: float = 0.0
    shuffle: bool = False
    freeze: tuple = ()

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step size must be positive")
        if self.steps < 0:
            raise ValueError("step count must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        unknown = set(self.freeze) - set(PARAM_FAMILIES)
        if unknown:
            raise ValueError(f"unknown parameter families to freeze: {sorted(unknown)}")


def _zero_gradients(model: Model) -> GradientSet:
    return GradientSet(
        coeffs=[np.zeros_like(bank.coeffs) for bank in model.banks],
        scale_logits=[np.zeros(bank.n_groups) for bank in model.banks],
        head_weights=np.zeros_like(model.head.weights),
        head_bias=np.zeros_like(model.head.bias),
        scale_weight_logits=np.zeros_like(model.scale_weights.logits),
    )


def _as_pair(sample):
    if isinstance(sample, LabeledImage):
        return sample.image.values, sample.mask
    image, mask = sample
    return np.asarray(image, dtype=np.float64), np.asarray(mask)


@dataclass
class _StepTensors:
    """Per-step materializations shared across the batch."""

    filters: list  # [layer][group] -> [c_out, c_in, h, w]
    basis: list  # [layer][group] -> [B, h, w]
    sigma_filters: list  # [layer][group] -> [c_out, c_in, h, w], d/dsigma


def _materialize_step(model: Model, need_sigma: bool) -> _StepTensors:
    filters, basis, sigma_filters = [], [], []
    for bank in model.banks:
        if bank.rotations.count != 1:
            raise ValueError("training requires banks with a single rotation channel")
        f_layer, b_layer, s_layer = [], [], []
        for k in range(bank.n_groups):
            grids = basis_grid_stack(bank, k, EXTENT_UPPER_BOUND)[:, 0]
            b_layer.append(grids)
            f_layer.append(np.einsum("odb,buv->oduv", bank.coeffs, grids, optimize=True))
            if need_sigma:
                dgrids = basis_grid_stack(bank, k, EXTENT_UPPER_BOUND, gradient=True)[:, 0]
                s_layer.append(np.einsum("odb,buv->oduv", bank.coeffs, dgrids, optimize=True))
        filters.append(f_layer)
        basis.append(b_layer)
        sigma_filters.append(s_layer)
    return _StepTensors(filters, basis, sigma_filters)


def _stream_forward(image: np.ndarray, step: _StepTensors, group: int):
    """Forward one scale stream; returns per-layer (pre, act) raw arrays."""
    states = []
    act = image
    for layer, f_layer in enumerate(step.filters):
        pre = conv_stack(act, f_layer[group])
        if not np.isfinite(pre).all():
            raise NumericalError(f"layer {layer + 1} produced non-finite values")
        act = np.maximum(pre, 0.0)
        states.append((pre, act))
    return states


def _image_probs(feat: np.ndarray, model: Model) -> np.ndarray:
    logits = np.einsum("kc,cxy->kxy", model.head.weights, feat)
    logits += model.head.bias[:, None, None]
    return softmax_probs(logits)


def batch_loss(batch, model: Model) -> float:
    """Mean training loss over a batch, same forward path the gradients use."""
    step = _materialize_step(model, need_sigma=False)
    total = 0.0
    for sample in batch:
        image, mask = _as_pair(sample)
        per_scale = []
        for k in range(model.config.n_groups):
            states = _stream_forward(image, step, k)
            per_scale.append(_image_probs(states[-1][1], model))
        total += multi_scale_loss(per_scale, mask, model.scale_weights)
    return total / len(batch)


def backward(batch, model: Model, freeze: tuple = ()) -> tuple[float, GradientSet]:
    """Loss and exact reverse-mode gradients of every trainable family.

    The scale-parameter gradient flows through the closed-form d/dsigma of
    the materialized filters times d sigma / d logit; frozen families are
    skipped and left at zero.
    """
    unknown = set(freeze) - set(PARAM_FAMILIES)
    if unknown:
        raise ValueError(f"unknown parameter families to freeze: {sorted(unknown)}")
    grads = _zero_gradients(model)
    need_sigma = "scale_logits" not in freeze
    step = _materialize_step(model, need_sigma)
    eta_tilde = model.scale_weights.rectified()
    eta = model.scale_weights.weights()
    n_groups = model.config.n_groups
    batch = list(batch)
    ce_means = np.zeros(n_groups)
    total = 0.0

    for sample in batch:
        image, mask = _as_pair(sample)
        per_scale = []
        for k in range(n_groups):
            states = _stream_forward(image, step, k)
            feat = states[-1][1]
            probs = _image_probs(feat, model)
            per_scale.append(probs)

            n_classes = probs.shape[0]
            n_pix = probs.shape[1] * probs.shape[2]
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, mask[None], 1.0, axis=0)
            ce = float(-np.log(np.clip((probs * onehot).sum(axis=0), net.LOG_CLIP, None)).mean())
            ce_means[k] += ce / len(batch)

            dlogits = eta_tilde[k] * (probs - onehot) / (n_pix * len(batch))
            if "head" not in freeze:
                grads.head_weights += np.einsum("kxy,cxy->kc", dlogits, feat, optimize=True)
                grads.head_bias += dlogits.sum(axis=(1, 2))
            dact = np.einsum("kc,kxy->cxy", model.head.weights, dlogits, optimize=True)

            for layer in range(model.config.depth - 1, -1, -1):
                pre, _ = states[layer]
                dpre = np.where(pre > 0, dact, 0.0)
                below = image if layer == 0 else states[layer - 1][1]
                kernels = step.filters[layer][k]
                if "coeffs" not in freeze or need_sigma:
                    dkern = conv_stack_kernel_gradient(below, dpre, kernels.shape[-1])
                    if "coeffs" not in freeze:
                        grads.coeffs[layer] += np.einsum(
                            "oduv,buv->odb", dkern, step.basis[layer][k], optimize=True
                        )
                    if need_sigma:
                        dsigma = float((dkern * step.sigma_filters[layer][k]).sum())
                        grads.scale_logits[layer][k] += (
                            dsigma * model.banks[layer].groups[k].sigma_gradient()
                        )
                if layer > 0:
                    dact = conv_stack_input_gradient(dpre, kernels)
        total += multi_scale_loss(per_scale, mask, model.scale_weights) / len(batch)

    if "scale_weights" not in freeze and n_groups > 1:
        grads.scale_weight_logits[:] = 0.5 * eta * (ce_means - float(eta @ ce_means))
    return total, grads


def sgd_step(model: Model, grads: GradientSet, config: TrainConfig, velocity=None):
    """One in-place SGD(+momentum) update; returns the velocity state."""
    if velocity is None:
        velocity = _zero_gradients(model)
    lr = config.step_size
    mu = config.momentum

    def update(param, grad, vel):
        vel *= mu
        vel += grad
        param -= lr * vel

    if "coeffs" not in config.freeze:
        for layer, bank in enumerate(model.banks):
            update(bank.coeffs, grads.coeffs[layer], velocity.coeffs[layer])
    if "scale_logits" not in config.freeze:
        for layer, bank in enumerate(model.banks):
            vel = velocity.scale_logits[layer]
            vel *= mu
            vel += grads.scale_logits[layer]
            for k, group in enumerate(bank.groups):
                group.logit -= lr * vel[k]
    if "head" not in config.freeze:
        update(model.head.weights, grads.head_weights, velocity.head_weights)
        update(model.head.bias, grads.head_bias, velocity.head_bias)
    if "scale_weights" not in config.freeze:
        update(model.scale_weights.logits, grads.scale_weight_logits, velocity.scale_weight_logits)
    return velocity


def fit(dataset, model: Model, config: TrainConfig) -> tuple[Model, list[float]]:
    """SGD over the dataset; deterministic given the config seed.

    Returns the trained model (mutated in place) and the per-step loss
    trace.  Batches are fixed-size contiguous slices of the (optionally
    seed-shuffled) sample order, visited cyclically.
    """
    samples = [_as_pair(s) for s in dataset]
    if not samples:
        raise ValueError("empty dataset")
    order = np.arange(len(samples))
    rng = np.random.default_rng(config.seed)
    batch_size = config.batch_size or len(samples)
    trace = []
    velocity = None
    cursor = 0
    for _ in range(config.steps):
        if config.shuffle and cursor == 0:
            order = rng.permutation(len(samples))
        take = [samples[order[(cursor + i) % len(samples)]] for i in range(batch_size)]
        cursor = (cursor + batch_size) % len(samples)
        loss, grads = backward(take, model, config.freeze)
        velocity = sgd_step(model, grads, config, velocity)
        trace.append(loss)
    return model, trace


def write_loss_trace(path, trace) -> None:
    """Loss trace as CSV: step,loss."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step_index, loss in enumerate(trace):
            writer.writerow([step_index, repr(float(loss))])
