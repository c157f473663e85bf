"""Equivariance audit: the architecture's invariants as a checkable report.

Each check produces a residual and a fixed threshold.  The exact checks
(steering identities, quarter-turn consistency, 90-degree equivariance)
hold for any parameter values because they are properties of the filter
parameterization, so a fresh random model must pass; a corrupted filter
tensor must not.  The approximate 45-degree check is interpolation
limited and carries a correspondingly loose bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data, net
from .basis import basis_list, sample_axis_aligned, steer
from .conv import InputImage
from .filterbank import ScaleGroup, group_extent

THRESHOLDS = {
    "steer-first-order": 1e-12,
    "steer-second-order": 1e-12,
    "quarter-turn": 1e-12,
    "rot90-forward": 1e-10,
    "rot90-labels": 0.0,
    "rot45-interior": 0.15,
    "sigma-bounds": 0.0,
    "interval-contiguity": 0.0,
    "gaussian-mass": 0.03,
}


@dataclass(frozen=True)
class AuditCheck:
    name: str
    residual: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.threshold


def _steering_residuals(rng, samples=64):
    first = second = 0.0
    for _ in range(samples):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        sigma = rng.uniform(0.4, 3.0)
        extent = int(2 * rng.integers(1, 8) + 1)
        gx = steer(1, 0, 0.0, sigma, extent).values
        gy = steer(1, 0, math.pi / 2.0, sigma, extent).values
        lhs = steer(1, 0, theta, sigma, extent).values
        first = max(first, np.abs(lhs - (math.cos(theta) * gx + math.sin(theta) * gy)).max())

        gxx = sample_axis_aligned(2, 0, sigma, extent).values
        gxy = sample_axis_aligned(1, 1, sigma, extent).values
        gyy = sample_axis_aligned(0, 2, sigma, extent).values
        c, s = math.cos(theta), math.sin(theta)
        rhs = c * c * gxx + 2.0 * c * s * gxy + s * s * gyy
        second = max(second, np.abs(steer(2, 0, theta, sigma, extent).values - rhs).max())
    return first, second


def _quarter_turn_residual(rng, samples=16):
    worst = 0.0
    for _ in range(samples):
        theta = rng.uniform(0.0, 2.0 * math.pi)
        sigma = rng.uniform(0.4, 3.0)
        extent = int(2 * rng.integers(1, 8) + 1)
        for i, j in basis_list(2):
            rotated = data.quarter_turn(steer(i, j, theta, sigma, extent).values)
            direct = steer(i, j, theta + math.pi / 2.0, sigma, extent).values
            worst = max(worst, np.abs(rotated - direct).max())
    return worst


def _rot90_residuals(model, tensors, rng, size=32):
    image = rng.uniform(0.0, 1.0, (model.config.in_channels, size, size))
    out = net.forward_streams(InputImage(image), model, tensors)
    out_rot = net.forward_streams(InputImage(data.quarter_turn(image)), model, tensors)
    rotations = tensors[0][0].values.shape[2]
    shift = rotations // 4
    forward_res = 0.0
    for k in range(model.config.n_groups):
        expected = np.roll(data.quarter_turn(out[k].values), shift, axis=1)
        scale = np.abs(expected).max()
        if scale > 0:
            forward_res = max(forward_res, np.abs(out_rot[k].values - expected).max() / scale)

    pred = net.predict(InputImage(image), model, tensors=tensors, reduction=net.REDUCTION_MAX)
    pred_rot = net.predict(
        InputImage(data.quarter_turn(image)), model, tensors=tensors, reduction=net.REDUCTION_MAX
    )
    labels_res = float(np.mean(pred_rot.label_map != data.quarter_turn(pred.label_map)))
    return forward_res, labels_res


def _rot45_residual(model, seed, size=48):
    tensors = net.materialize_model(model, rotations=8)
    image = data.generate_blobs(size, 6, seed)[None]
    if model.config.in_channels == 3:
        image = np.repeat(image, 3, axis=0)
    out = net.forward_streams(InputImage(image), model, tensors)
    rotated = np.clip(data.rotate_image(image, math.pi / 4.0), 0.0, 1.0)
    out_rot = net.forward_streams(InputImage(rotated), model, tensors)
    lo, hi = size // 4, size - size // 4
    worst = 0.0
    for k in range(model.config.n_groups):
        expected = np.roll(
            np.stack(
                [
                    np.stack([data.rotate_image(plane, math.pi / 4.0) for plane in channel])
                    for channel in out[k].values
                ]
            ),
            1,
            axis=1,
        )
        a = out_rot[k].values[..., lo:hi, lo:hi]
        b = expected[..., lo:hi, lo:hi]
        worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    return worst


def _scale_residuals(model, rng, samples=1000):
    bound_violation = 0.0
    contiguity = 0.0
    mass = 0.0
    for bank in model.banks:
        for prev, nxt in zip(bank.groups, bank.groups[1:]):
            contiguity = max(contiguity, abs(nxt.lower - prev.upper))
        for group in bank.groups:
            for logit in rng.normal(0.0, 5.0, size=samples):
                sigma = ScaleGroup(group.lower, group.upper, float(logit)).sigma()
                bound_violation = max(
                    bound_violation, group.lower - sigma, sigma - group.upper, 0.0
                )
            # Sampled-Gaussian mass stays near 1 for sigma in [0.5, 4]; live
            # sigmas below that are aliasing-dominated, so clamp into range.
            sigma_m = min(max(group.sigma(), 0.5), 4.0)
            total = steer(0, 0, 2.0 * math.pi, sigma_m, group_extent(group)).values.sum()
            mass = max(mass, abs(float(total) - 1.0))
    return bound_violation, contiguity, mass


def run_audit(model, tensors=None, seed: int = 0) -> list[AuditCheck]:
    """Run every check; tensors may override the model's own materialization
    (that is the seam fault-injection tests use)."""
    rng = np.random.default_rng(seed)
    if tensors is None:
        tensors = net.materialize_model(model, rotations=4)
    first, second = _steering_residuals(rng)
    quarter = _quarter_turn_residual(rng)
    rot90_fwd, rot90_lab = _rot90_residuals(model, tensors, rng)
    rot45 = _rot45_residual(model, seed)
    bounds, contiguity, mass = _scale_residuals(model, rng)
    values = {
        "steer-first-order": first,
        "steer-second-order": second,
        "quarter-turn": quarter,
        "rot90-forward": rot90_fwd,
        "rot90-labels": rot90_lab,
        "rot45-interior": rot45,
        "sigma-bounds": bounds,
        "interval-contiguity": contiguity,
        "gaussian-mass": mass,
    }
    return [AuditCheck(name, float(values[name]), THRESHOLDS[name]) for name in THRESHOLDS]


def report_lines(checks) -> list[str]:
    """Human-readable audit report; the header echoes every threshold."""
    lines = ["equivariance audit"]
    lines += [f"# threshold {c.name} <= {c.threshold:g}" for c in checks]
    width = max(len(c.name) for c in checks)
    for c in checks:
        status = "pass" if c.passed else "FAIL"
        lines.append(f"{c.name:<{width}}  residual={c.residual:.3e}  {status}")
    return lines
