"""Parameterized layers on top of the tensor core.

Modules register parameters and sub-modules automatically on attribute
assignment, giving every parameter a stable dotted name. That naming is the
contract the checkpoint format and the optimizer state rely on, so attribute
order inside ``__init__`` must stay deterministic.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ConfigError, Tensor, default_dtype, gelu, permute, reshape


class Module:
    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_children", {})[name] = value
        elif isinstance(value, ModuleList):
            self.__dict__.setdefault("_children", {})[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, param in self.__dict__.get("_params", {}).items():
            yield (prefix + name, param)
        for name, child in self.__dict__.get("_children", {}).items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def load_state(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy named arrays into parameters; shapes must match exactly."""
        for name, param in self.named_parameters(prefix):
            if name not in arrays:
                raise KeyError(f"checkpoint is missing parameter '{name}'")
            value = arrays[name]
            if tuple(value.shape) != param.shape:
                raise ValueError(
                    f"shape mismatch for parameter '{name}': checkpoint has {tuple(value.shape)}, model expects {param.shape}"
                )
            param.data = value.astype(default_dtype(), copy=True)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}


class ModuleList:
    def __init__(self, items=()):
        self._items = list(items)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, idx):
        return self._items[idx]

    def append(self, module: Module) -> None:
        self._items.append(module)

    def named_parameters(self, prefix: str = ""):
        for i, item in enumerate(self._items):
            yield from item.named_parameters(f"{prefix}{i}.")


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(default_dtype())


def _xavier_normal(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))).astype(default_dtype())


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int | None = None, bias: bool = True, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if padding is None:
            padding = (kernel - 1) // 2
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(_he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    __call__ = forward


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        if kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd, got {kernel}")
        self.weight = Tensor(_he_normal(rng, (channels, 1, kernel, kernel), kernel * kernel), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight)

    __call__ = forward


class PointwiseConv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(
            _xavier_normal(rng, (out_channels, in_channels, 1, 1), in_channels, out_channels), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_channels, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.pointwise_conv2d(x, self.weight)
        if self.bias is not None:
            out = out + reshape(self.bias, (-1, 1, 1))
        return out

    __call__ = forward


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(_xavier_normal(rng, (in_features, out_features), in_features, out_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=default_dtype()), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=default_dtype()), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=default_dtype()), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.shift, eps=self.eps)

    __call__ = forward


class FeedForward(Module):
    """Per-token two-layer expansion block: C -> ratio*C -> C with GELU."""

    def __init__(self, channels: int, ratio: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.expand = Linear(channels, ratio * channels, rng=rng)
        self.project = Linear(ratio * channels, channels, rng=rng)

    def forward(self, tokens: Tensor) -> Tensor:
        return self.project(gelu(self.expand(tokens)))

    __call__ = forward


def to_tokens(x: Tensor) -> Tensor:
    """(C,H,W) -> (H*W, C) in raster order."""
    c = x.shape[0]
    return permute(reshape(x, (c, -1)), (1, 0))


def to_map(tokens: Tensor, height: int, width: int) -> Tensor:
    """(H*W, C) -> (C,H,W), inverse of :func:`to_tokens`."""
    c = tokens.shape[1]
    return reshape(permute(tokens, (1, 0)), (c, height, width))


def channel_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer norm over the channel axis of a (C,H,W) map."""
    _, h, w = x.shape
    return to_map(norm(to_tokens(x)), h, w)


def drop_path(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Stochastic depth on one residual branch; identity when evaluating."""
    if not training or rate <= 0.0 or rng is None:
        return x
    if rng.random() < rate:
        return Tensor(np.zeros(x.shape, dtype=x.data.dtype))
    return x * (1.0 / (1.0 - rate))
