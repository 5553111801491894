"""Four-stage hybrid encoder producing a stride-4/8/16/32 feature pyramid.

Stages 1-2 are convolutional: grouped depthwise filters of growing kernel
size build a modulation map that gates a learned per-pixel embedding.
Stage 3 alternates that modulation with multi-head self-attention inside
each block; stage 4 is a plain pre-norm transformer block. All blocks are
residual, so zeroing their internal weights makes them exact identities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .modules import (
    Conv2d,
    DepthwiseConv2d,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    PointwiseConv2d,
    channel_norm,
    drop_path,
    to_map,
    to_tokens,
)
from .ops import depthwise_conv2d, softmax
from .tensor import ConfigError, Tensor, concat, gelu, narrow, permute, reshape

STRIDES = (4, 8, 16, 32)


@dataclass
class FeaturePyramid:
    """The four stage outputs, shallow to deep."""

    levels: tuple[Tensor, Tensor, Tensor, Tensor]

    @property
    def strides(self) -> tuple[int, int, int, int]:
        return STRIDES

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(level.shape[0] for level in self.levels)

    def __getitem__(self, stage: int) -> Tensor:
        """1-based stage access matching the architecture tables."""
        return self.levels[stage - 1]


def group_kernel_sizes(groups: int) -> tuple[int, ...]:
    """Kernel ladder 3,5,...,2n+1: group j gets extent 2j+1."""
    return tuple(2 * j + 1 for j in range(1, groups + 1))


class MultiKernelModulator(Module):
    """Gates an embedded feature with a multi-receptive-field modulation map.

    The input is split into ``groups`` channel groups; group j runs a
    depthwise conv of kernel 2j+1, the groups are re-concatenated and mixed
    by a pointwise conv into the modulator M. The output is M * embed(x)
    elementwise.
    """

    def __init__(self, channels: int, groups: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if channels % groups != 0:
            raise ConfigError(f"channel width {channels} not divisible by group count {groups}")
        self.channels = channels
        self.groups = groups
        self.group_width = channels // groups
        self.filters = ModuleList(
            DepthwiseConv2d(self.group_width, kernel, rng=rng) for kernel in group_kernel_sizes(groups)
        )
        self.combine = PointwiseConv2d(channels, channels, rng=rng)
        self.embed = PointwiseConv2d(channels, channels, rng=rng)

    def modulator(self, x: Tensor) -> Tensor:
        parts = []
        for j, filt in enumerate(self.filters):
            chunk = narrow(x, 0, j * self.group_width, self.group_width)
            parts.append(filt(chunk))
        return self.combine(concat(parts, axis=0))

    def apply(self, feature: Tensor, modulation: Tensor) -> Tensor:
        return modulation * self.embed(feature)

    def forward(self, x: Tensor) -> Tensor:
        return self.apply(x, self.modulator(x))

    __call__ = forward


class ModulatorBlock(Module):
    """Residual pair: modulation sub-layer then per-pixel feed-forward."""

    def __init__(self, channels: int, groups: int, ffn_ratio: int, drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.drop_rate = drop_rate
        self.norm1 = LayerNorm(channels)
        self.modulate = MultiKernelModulator(channels, groups, rng=rng)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_ratio, rng=rng)

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        _, h, w = x.shape
        x = x + drop_path(self.modulate(channel_norm(x, self.norm1)), self.drop_rate, rng, training)
        tokens = to_tokens(x)
        branch = self.ffn(self.norm2(tokens))
        return x + drop_path(to_map(branch, h, w), self.drop_rate, rng, training)

    __call__ = forward


class SelfAttention(Module):
    """Multi-head scaled dot-product attention over (N, C) tokens.

    The softmax scale is 1/sqrt(C) over the full channel width, not the
    per-head width; heads are concatenated and mixed by an output projection.
    No positional encoding is applied, so the layer is permutation
    equivariant by construction.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if channels % heads != 0:
            raise ConfigError(f"head count {heads} does not divide channel width {channels}")
        self.heads = heads
        self.head_width = channels // heads
        self.scale = 1.0 / float(np.sqrt(channels))
        self.query = Linear(channels, channels, rng=rng)
        self.key = Linear(channels, channels, rng=rng)
        self.value = Linear(channels, channels, rng=rng)
        self.out = Linear(channels, channels, rng=rng)

    def _split(self, t: Tensor, n: int) -> Tensor:
        return permute(reshape(t, (n, self.heads, self.head_width)), (1, 0, 2))

    def forward(self, tokens: Tensor) -> Tensor:
        n, c = tokens.shape
        q = self._split(self.query(tokens), n)
        k = self._split(self.key(tokens), n)
        v = self._split(self.value(tokens), n)
        scores = (q @ permute(k, (0, 2, 1))) * self.scale
        mixed = softmax(scores, axis=-1) @ v
        merged = reshape(permute(mixed, (1, 0, 2)), (n, c))
        return self.out(merged)

    __call__ = forward


class AttentionBlock(Module):
    """Residual pair: self-attention then feed-forward, in token space."""

    def __init__(self, channels: int, heads: int, ffn_ratio: int, drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.drop_rate = drop_rate
        self.norm1 = LayerNorm(channels)
        self.attention = SelfAttention(channels, heads, rng=rng)
        self.norm2 = LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_ratio, rng=rng)

    def forward(self, tokens: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        tokens = tokens + drop_path(self.attention(self.norm1(tokens)), self.drop_rate, rng, training)
        return tokens + drop_path(self.ffn(self.norm2(tokens)), self.drop_rate, rng, training)

    __call__ = forward


class HybridBlock(Module):
    """Stage-3 block: a modulation sub-block feeding an attention sub-block."""

    def __init__(self, channels: int, groups: int, heads: int, ffn_ratio: int, drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.local = ModulatorBlock(channels, groups, ffn_ratio, drop_rate, rng=rng)
        self.nonlocal_ = AttentionBlock(channels, heads, ffn_ratio, drop_rate, rng=rng)

    def forward(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        _, h, w = x.shape
        x = self.local(x, training=training, rng=rng)
        tokens = self.nonlocal_(to_tokens(x), training=training, rng=rng)
        return to_map(tokens, h, w)

    __call__ = forward


class Stem(Module):
    """Two strided convolutions embedding the image at stride 4."""

    def __init__(self, width: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(3, width, kernel=3, stride=2, padding=1, rng=rng)
        self.conv2 = Conv2d(width, width, kernel=2, stride=2, padding=0, rng=rng)

    def forward(self, image: Tensor) -> Tensor:
        return self.conv2(gelu(self.conv1(image)))

    __call__ = forward


class Encoder(Module):
    """Stacks the four stages and returns all intermediate feature maps."""

    def __init__(self, widths=(64, 128, 256, 512), depths=(2, 2, 4, 1), groups: int = 4,
                 heads=(8, 16), ffn_ratios=(4, 4, 4, 2), drop_rate: float = 0.0,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        c1, c2, c3, c4 = widths
        self.widths = tuple(widths)
        self.stem = Stem(c1, rng=rng)
        self.stage1 = ModuleList(
            ModulatorBlock(c1, groups, ffn_ratios[0], drop_rate, rng=rng) for _ in range(depths[0])
        )
        self.down2 = Conv2d(c1, c2, kernel=3, stride=2, padding=1, rng=rng)
        self.stage2 = ModuleList(
            ModulatorBlock(c2, groups, ffn_ratios[1], drop_rate, rng=rng) for _ in range(depths[1])
        )
        self.down3 = Conv2d(c2, c3, kernel=3, stride=2, padding=1, rng=rng)
        self.stage3 = ModuleList(
            HybridBlock(c3, groups, heads[0], ffn_ratios[2], drop_rate, rng=rng) for _ in range(depths[2])
        )
        self.down4 = Conv2d(c3, c4, kernel=3, stride=2, padding=1, rng=rng)
        self.stage4 = ModuleList(
            AttentionBlock(c4, heads[1], ffn_ratios[3], drop_rate, rng=rng) for _ in range(depths[3])
        )

    def forward(self, image: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> FeaturePyramid:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ConfigError(f"encoder expects a (3,H,W) image, got {image.shape}")
        _, h, w = image.shape
        if h % 32 or w % 32:
            raise ConfigError(f"input extents must be divisible by 32, got {h}x{w}")

        x = self.stem(image)
        for block in self.stage1:
            x = block(x, training=training, rng=rng)
        f1 = x

        x = self.down2(f1)
        for block in self.stage2:
            x = block(x, training=training, rng=rng)
        f2 = x

        x = self.down3(f2)
        for block in self.stage3:
            x = block(x, training=training, rng=rng)
        f3 = x

        x = self.down4(f3)
        _, h4, w4 = x.shape
        tokens = to_tokens(x)
        for block in self.stage4:
            tokens = block(tokens, training=training, rng=rng)
        f4 = to_map(tokens, h4, w4)

        return FeaturePyramid((f1, f2, f3, f4))

    __call__ = forward
