"""Per-pixel Gaussian heads, sampled uncertainty maps and attenuation mixing.

Each fused branch gets an independent pair of 1x1 heads predicting a mean
map and a standard-deviation map. Drawing a sample as mean + std * eps (eps
standard normal) keeps the draw differentiable in both head outputs. The
spread of several such draws, min-max normalized per image, becomes the
uncertainty map; one minus that map attenuates the branch before the two
branches are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modules import Module, PointwiseConv2d
from .ops import bilinear_upsample
from .tensor import ConfigError, ShapeError, Tensor, reciprocal, softplus, vmax, vmin


@dataclass
class GaussianField:
    """Independent per-pixel normal distributions over a (1,h,w) grid."""

    mean: Tensor
    std: Tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape


class GaussianHead(Module):
    """Two 1x1 heads mapping a feature to a mean map and a positive std map.

    Positivity comes from a softplus plus a small floor. ``zero_std`` is a
    test hook that pins the std map to exactly zero so every draw collapses
    onto the mean.
    """

    def __init__(self, channels: int, std_floor: float = 1e-4, zero_std: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.std_floor = std_floor
        self.zero_std = zero_std
        self.mean_head = PointwiseConv2d(channels, 1, rng=rng)
        self.spread_head = PointwiseConv2d(channels, 1, rng=rng)

    def forward(self, feature: Tensor) -> GaussianField:
        mean = self.mean_head(feature)
        if self.zero_std:
            std = Tensor(np.zeros(mean.shape, dtype=mean.data.dtype))
        else:
            std = softplus(self.spread_head(feature)) + self.std_floor
        return GaussianField(mean, std)

    __call__ = forward


def draw_samples(field: GaussianField, count: int, rng: np.random.Generator) -> list[Tensor]:
    """``count`` independent draws mean + std * eps, differentiable in both."""
    if count < 2:
        raise ConfigError(f"need at least 2 samples for a variance, got {count}")
    out = []
    for _ in range(count):
        eps = rng.standard_normal(field.mean.shape).astype(field.mean.data.dtype)
        out.append(field.mean + field.std * Tensor(eps))
    return out


def uncertainty_map(samples: list[Tensor]) -> Tensor:
    """Per-pixel variance across samples, min-max normalized into [0,1].

    A flat variance map (max == min) normalizes to all zeros: zero spread
    everywhere means full confidence everywhere.
    """
    if len(samples) < 2:
        raise ConfigError(f"need at least 2 samples for a variance, got {len(samples)}")
    shape = samples[0].shape
    for i, s in enumerate(samples[1:], start=1):
        if s.shape != shape:
            raise ShapeError(f"sample {i} has shape {s.shape}, expected {shape}")
    count = float(len(samples))
    mean = samples[0]
    for s in samples[1:]:
        mean = mean + s
    mean = mean * (1.0 / count)
    var = (samples[0] - mean) * (samples[0] - mean)
    for s in samples[1:]:
        var = var + (s - mean) * (s - mean)
    var = var * (1.0 / count)

    lo = vmin(var)
    hi = vmax(var)
    if hi.item() == lo.item():
        return var * 0.0
    return (var - lo) * reciprocal(hi - lo)


def aggregate(f_local: Tensor, f_global: Tensor, u_local: Tensor, u_global: Tensor) -> Tensor:
    """(1-U_g) * global + (1-U_l) * local, uncertainty broadcast over channels."""
    if f_local.shape != f_global.shape:
        raise ShapeError(f"branch shapes differ: local {f_local.shape} vs global {f_global.shape}")
    spatial = f_local.shape[1:]
    for name, u in (("local", u_local), ("global", u_global)):
        if u.shape != (1, *spatial):
            raise ShapeError(f"{name} uncertainty map must be (1,{spatial[0]},{spatial[1]}), got {u.shape}")
    return (1.0 - u_global) * f_global + (1.0 - u_local) * f_local


class SegmentationHead(Module):
    """1x1 squeeze to a logit map, lifted back to input resolution."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.squeeze = PointwiseConv2d(channels, 1, rng=rng)

    def forward(self, feature: Tensor, factor: int = 4) -> Tensor:
        return bilinear_upsample(self.squeeze(feature), factor)

    __call__ = forward


@dataclass
class DecoderResult:
    fused: Tensor
    field_local: GaussianField | None
    field_global: GaussianField | None
    u_local: Tensor | None
    u_global: Tensor | None


class UncertaintyDecoder(Module):
    """Estimates both branch distributions and mixes the branches.

    By default the uncertainty maps are computed from detached samples, so
    the attenuation weights act as constants in the mixing step and the head
    parameters learn only through the dedicated uncertainty objective. Set
    ``map_gradients`` to let gradients flow through the maps as well.
    """

    def __init__(self, channels: int, sample_count: int = 8, std_floor: float = 1e-4,
                 zero_std: bool = False, map_gradients: bool = False,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if sample_count < 2:
            raise ConfigError(f"sample count must be >= 2, got {sample_count}")
        self.sample_count = sample_count
        self.map_gradients = map_gradients
        self.local_head = GaussianHead(channels, std_floor, zero_std, rng=rng)
        self.global_head = GaussianHead(channels, std_floor, zero_std, rng=rng)

    def _branch_map(self, field: GaussianField, rng: np.random.Generator) -> Tensor:
        samples = draw_samples(field, self.sample_count, rng)
        if not self.map_gradients:
            samples = [s.detach() for s in samples]
        return uncertainty_map(samples)

    def forward(self, f_local: Tensor, f_global: Tensor, rng: np.random.Generator) -> DecoderResult:
        field_local = self.local_head(f_local)
        field_global = self.global_head(f_global)
        u_local = self._branch_map(field_local, rng)
        u_global = self._branch_map(field_global, rng)
        fused = aggregate(f_local, f_global, u_local, u_global)
        return DecoderResult(fused, field_local, field_global, u_local, u_global)

    __call__ = forward
