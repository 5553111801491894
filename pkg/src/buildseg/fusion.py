"""Fuses pyramid levels into a detail branch and a context branch.

Every level first passes through a residual depthwise refinement. The local
branch then folds the shallow levels together top-down; the global branch
folds the deep levels and lifts them to stride 4 so both branches end with
the same shape, which the decoder requires for elementwise mixing. Which
levels feed which branch is configurable, so fusion-strategy ablations only
rewire the constructor arguments.
"""

from __future__ import annotations

import numpy as np

from .encoder import STRIDES, FeaturePyramid
from .modules import (
    Conv2d,
    DepthwiseConv2d,
    LayerNorm,
    Module,
    ModuleList,
    PointwiseConv2d,
    channel_norm,
)
from .ops import bilinear_upsample
from .tensor import ConfigError, Tensor, concat, gelu


class ResidualRefine(Module):
    """x + (depthwise -> depthwise -> pointwise), shape preserved."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.depth1 = DepthwiseConv2d(channels, 3, rng=rng)
        self.depth2 = DepthwiseConv2d(channels, 3, rng=rng)
        self.mix = PointwiseConv2d(channels, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        branch = self.mix(gelu(self.depth2(gelu(self.depth1(x)))))
        return x + branch

    __call__ = forward


class ConvBlock(Module):
    """3x3 conv followed by channel normalization and GELU."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.conv = Conv2d(in_channels, out_channels, kernel=3, bias=bias, rng=rng)
        self.norm = LayerNorm(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        return gelu(channel_norm(self.conv(x), self.norm))

    __call__ = forward


class UpStep(Module):
    """One x2 lift: bilinear upsample then conv/norm/activation."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.block = ConvBlock(in_channels, out_channels, bias=bias, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.block(bilinear_upsample(x, 2))

    __call__ = forward


class FusionBranch(Module):
    """Folds a chosen set of pyramid levels down to stride 4.

    Levels are consumed deepest-first. Between levels the running feature is
    lifted by x2 steps whose widths halve toward ``out_width`` (never
    inflate), then concatenated under the shallower level. Once all levels
    are merged, either a final x2 chain lands exactly at ``out_width``
    (branch still deeper than stride 4) or a 3x3 projection does.
    """

    def __init__(self, levels: tuple[int, ...], level_widths: tuple[int, int, int, int],
                 out_width: int, bias: bool = True, rng: np.random.Generator | None = None):
        levels = tuple(sorted(set(levels)))
        if not levels or any(lvl not in (1, 2, 3, 4) for lvl in levels):
            raise ConfigError(f"fusion levels must be a non-empty subset of 1..4, got {levels}")
        self.levels = levels
        self.out_width = out_width

        plan: list[tuple[str, int]] = []
        steps: list[UpStep] = []
        order = list(reversed(levels))
        stride = STRIDES[order[0] - 1]
        width = level_widths[order[0] - 1]
        plan.append(("take", order[0]))
        for lvl in order[1:]:
            target = STRIDES[lvl - 1]
            while stride > target:
                next_width = max(out_width, width // 2)
                steps.append(UpStep(width, next_width, bias=bias, rng=rng))
                plan.append(("up", len(steps) - 1))
                width, stride = next_width, stride // 2
            plan.append(("cat", lvl))
            width += level_widths[lvl - 1]

        if stride > 4:
            while stride > 4:
                next_width = out_width if stride == 8 else max(out_width, width // 2)
                steps.append(UpStep(width, next_width, bias=bias, rng=rng))
                plan.append(("up", len(steps) - 1))
                width, stride = next_width, stride // 2
            self.project = None
        else:
            self.project = ConvBlock(width, out_width, bias=bias, rng=rng)

        self.steps = ModuleList(steps)
        self.plan = plan

    def step_widths(self) -> list[tuple[int, int]]:
        return [(s.in_channels, s.out_channels) for s in self.steps]

    def forward(self, refined: dict[int, Tensor]) -> Tensor:
        x = None
        for action, arg in self.plan:
            if action == "take":
                x = refined[arg]
            elif action == "up":
                x = self.steps[arg](x)
            else:  # cat: shallower level goes first
                x = concat([refined[arg], x], axis=0)
        if self.project is not None:
            x = self.project(x)
        return x

    __call__ = forward


class GlobalLocalFusion(Module):
    """Builds the stride-4 local/global pair from a feature pyramid."""

    def __init__(self, level_widths: tuple[int, int, int, int], out_width: int,
                 local_levels: tuple[int, ...] = (1, 2, 3), global_levels: tuple[int, ...] = (3, 4),
                 bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.refines = ModuleList(ResidualRefine(w, rng=rng) for w in level_widths)
        self.local_branch = FusionBranch(local_levels, level_widths, out_width, bias=bias, rng=rng)
        self.global_branch = FusionBranch(global_levels, level_widths, out_width, bias=bias, rng=rng)

    def forward(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
        needed = set(self.local_branch.levels) | set(self.global_branch.levels)
        refined = {lvl: self.refines[lvl - 1](pyramid[lvl]) for lvl in sorted(needed)}
        local = self.local_branch(refined)
        context = self.global_branch(refined)
        if local.shape != context.shape:
            raise ConfigError(f"fusion branches disagree on shape: local {local.shape} vs global {context.shape}")
        return local, context

    __call__ = forward
