"""Learnable filter banks over the Gaussian-derivative basis.

A bank holds one set of expansion coefficients per layer, shared by every
scale group and every rotation channel of that layer.  Scale lives in a
per-group trainable logit squashed into a fixed interval (lower, upper)
via tanh, with successive group intervals disjoint and contiguous, so the
groups cover increasing scales and never cross during training.
Orientation enters only at materialization time, when the coefficients
are contracted against basis grids steered to each channel's angle
theta_r = 2*pi*r/R.  That is what makes it cheap to train with a single
rotation channel and inflate to any R afterwards: the parameters never
depend on R.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import formats
from .basis import basis_list, steer, steer_dsigma

EXTENT_UPPER_BOUND = "upper-bound"
EXTENT_LIVE_SIGMA = "live-sigma"
EXTENT_POLICIES = (EXTENT_UPPER_BOUND, EXTENT_LIVE_SIGMA)


def kernel_extent(sigma: float) -> int:
    """Odd kernel side length 2*ceil(2.5*sigma) + 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return 2 * math.ceil(2.5 * sigma) + 1


@dataclass
class ScaleGroup:
    """One scale interval with its trainable logit; sigma() stays in (lower, upper)."""

    lower: float
    upper: float
    logit: float = 0.0

    def __post_init__(self):
        if not self.upper > self.lower > 0:
            raise ValueError(
                f"scale bounds must satisfy upper > lower > 0, got ({self.lower}, {self.upper})"
            )

    def sigma(self) -> float:
        half = (self.upper - self.lower) / 2.0
        return half * math.tanh(self.logit) + (self.upper + self.lower) / 2.0

    def sigma_gradient(self) -> float:
        """d sigma / d logit."""
        t = math.tanh(self.logit)
        return (self.upper - self.lower) / 2.0 * (1.0 - t * t)


@dataclass(frozen=True)
class RotationScheme:
    """R orientation channels at angles theta_r = 2*pi*r/R, r = 1..R.

    Channel R always sits at exactly 2*pi, so a bank trained with R = 1
    reappears bit-identically as the last channel after inflation.
    """

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"rotation count must be >= 1, got {self.count}")

    def angles(self) -> np.ndarray:
        return np.array([2.0 * math.pi * (r / self.count) for r in range(1, self.count + 1)])


@dataclass
class FilterBank:
    """Per-layer parameters: coefficients plus scale-group and rotation metadata."""

    layer_index: int
    c_out: int
    c_in: int
    order: int
    coeffs: np.ndarray
    groups: list[ScaleGroup]
    rotations: RotationScheme = field(default_factory=lambda: RotationScheme(1))

    def __post_init__(self):
        pairs = basis_list(self.order)
        expected = (self.c_out, self.c_in, len(pairs))
        if self.coeffs.shape != expected:
            raise ValueError(f"coeffs shape {self.coeffs.shape}, expected {expected}")
        if not self.groups:
            raise ValueError("at least one scale group is required")
        for prev, nxt in zip(self.groups, self.groups[1:]):
            if nxt.lower != prev.upper or nxt.upper <= prev.upper:
                raise ValueError(
                    "scale-group intervals must be disjoint and contiguous "
                    f"(got ({prev.lower}, {prev.upper}) then ({nxt.lower}, {nxt.upper}))"
                )

    @property
    def n_basis(self) -> int:
        return self.coeffs.shape[2]

    @property
    def n_groups(self) -> int:
        return len(self.groups)


@dataclass(frozen=True)
class FilterTensor:
    """Materialized filters [c_out, c_in, R, h, w] for one scale group."""

    values: np.ndarray
    sigma_used: float
    theta_list: np.ndarray


def group_extent(group: ScaleGroup, policy: str = EXTENT_UPPER_BOUND) -> int:
    """Kernel extent for a group under the chosen policy.

    The default derives the extent from the interval's upper bound, which
    is constant during training: the live sigma would change tensor shapes
    discontinuously as the logit moves.  The literal live-sigma rule is
    kept for inference-only materialization.
    """
    if policy == EXTENT_UPPER_BOUND:
        return kernel_extent(group.upper)
    if policy == EXTENT_LIVE_SIGMA:
        return kernel_extent(group.sigma())
    raise ValueError(f"unknown extent policy {policy!r}")


def basis_grid_stack(
    bank: FilterBank,
    group_index: int,
    extent_policy: str = EXTENT_UPPER_BOUND,
    gradient: bool = False,
) -> np.ndarray:
    """Steered basis grids [B, R, h, w] for one group at the bank's angles.

    With gradient=True the grids are the elementwise d/dsigma samples
    instead; contracting coefficients against either stack gives
    materialize() and its sigma derivative respectively.
    """
    if not 0 <= group_index < bank.n_groups:
        raise ValueError(f"group index {group_index} out of range 0..{bank.n_groups - 1}")
    group = bank.groups[group_index]
    sigma = group.sigma()
    extent = group_extent(group, extent_policy)
    sampler = steer_dsigma if gradient else steer
    return np.stack(
        [
            np.stack([sampler(i, j, theta, sigma, extent).values for theta in bank.rotations.angles()])
            for (i, j) in basis_list(bank.order)
        ]
    )


def _contract(bank: FilterBank, group_index: int, gradient: bool, policy: str) -> FilterTensor:
    grids = basis_grid_stack(bank, group_index, policy, gradient)
    values = np.einsum("odb,brhw->odrhw", bank.coeffs, grids, optimize=True)
    group = bank.groups[group_index]
    return FilterTensor(values, group.sigma(), bank.rotations.angles())


def materialize(
    bank: FilterBank, group_index: int, extent_policy: str = EXTENT_UPPER_BOUND
) -> FilterTensor:
    """Build the filter tensor for one scale group at the bank's rotations."""
    return _contract(bank, group_index, False, extent_policy)


def materialize_sigma_gradient(
    bank: FilterBank, group_index: int, extent_policy: str = EXTENT_UPPER_BOUND
) -> FilterTensor:
    """Elementwise d/dsigma of materialize() at the group's current sigma.

    The caller chains this with ScaleGroup.sigma_gradient() to reach the
    trainable logit.
    """
    return _contract(bank, group_index, True, extent_policy)


def inflate_rotations(bank: FilterBank, count: int) -> FilterBank:
    """Re-key the bank to a new rotation-channel count.

    Coefficients and scale groups are untouched; only the angle set
    changes, so the parameter count is unchanged and channel `count`
    (theta = 2*pi) materializes exactly the original single-orientation
    filters.
    """
    return replace(bank, rotations=RotationScheme(count))


def default_scale_bounds(n_groups: int) -> list[tuple[float, float]]:
    """Contiguous default intervals (0.4, 0.8), (0.8, 1.2), ... in 0.4 steps.

    Computed as (2 + 2k)/5 so adjacent bounds are bit-identical floats;
    accumulating 0.4 steps would drift (0.8 + 0.4 != 1.2 in binary).
    """
    if n_groups < 1:
        raise ValueError("need at least one scale group")
    return [((2 + 2 * k) / 5.0, (4 + 2 * k) / 5.0) for k in range(n_groups)]


def init_bank(
    layer_index: int,
    c_out: int,
    c_in: int,
    order: int,
    bounds,
    rotations: int,
    rng: np.random.Generator,
) -> FilterBank:
    """Seeded bank with variance-balanced coefficients and midpoint sigmas.

    Coefficients start zero-mean uniform with half-width 1/sqrt(c_in * B),
    then each basis element's column is divided by the L2 norm of its grid
    at a reference sigma (the mean of the group midpoints), so every basis
    direction contributes comparable output variance regardless of its
    derivative order.  Logits start at 0, i.e. sigma at each interval
    midpoint where the tanh gradient is largest.
    """
    pairs = basis_list(order)
    groups = [ScaleGroup(lo, hi) for lo, hi in bounds]
    sigma_ref = float(np.mean([(g.lower + g.upper) / 2.0 for g in groups]))
    extent = kernel_extent(sigma_ref)
    half = 1.0 / math.sqrt(c_in * len(pairs))
    coeffs = rng.uniform(-half, half, size=(c_out, c_in, len(pairs)))
    for idx, (i, j) in enumerate(pairs):
        norm = np.linalg.norm(steer(i, j, 2.0 * math.pi, sigma_ref, extent).values)
        coeffs[:, :, idx] /= norm
    return FilterBank(layer_index, c_out, c_in, order, coeffs, groups, RotationScheme(rotations))


def save_bank(bank: FilterBank, meta_path, coeffs_path) -> None:
    """Write the bank as a key=value header plus a TEN1 coefficient tensor."""
    items = {
        "layer_index": str(bank.layer_index),
        "c_out": str(bank.c_out),
        "c_in": str(bank.c_in),
        "order": str(bank.order),
        "rotations": str(bank.rotations.count),
        "groups": str(bank.n_groups),
    }
    for k, group in enumerate(bank.groups):
        items[f"group{k}.lower"] = repr(float(group.lower))
        items[f"group{k}.upper"] = repr(float(group.upper))
        items[f"group{k}.logit"] = repr(float(group.logit))
    formats.write_keyvalues(meta_path, items)
    formats.save_tensor(coeffs_path, bank.coeffs)


def load_bank(meta_path, coeffs_path) -> FilterBank:
    items = formats.read_keyvalues(meta_path)
    groups = [
        ScaleGroup(
            lower=float(items[f"group{k}.lower"]),
            upper=float(items[f"group{k}.upper"]),
            logit=float(items[f"group{k}.logit"]),
        )
        for k in range(int(items["groups"]))
    ]
    return FilterBank(
        layer_index=int(items["layer_index"]),
        c_out=int(items["c_out"]),
        c_in=int(items["c_in"]),
        order=int(items["order"]),
        coeffs=formats.load_tensor(coeffs_path),
        groups=groups,
        rotations=RotationScheme(int(items["rotations"])),
    )
