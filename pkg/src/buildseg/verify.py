"""Self-contained gradient verification for every differentiable operation.

Each registered check builds a random small instance, runs reverse mode, and
compares against the central-difference oracle at 64-bit precision. The CLI
``gradcheck`` subcommand and the acceptance suite both run this table.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, ops
from . import tensor as T
from .decoder import GaussianField, aggregate, draw_samples, uncertainty_map
from .tensor import Tensor, finite_difference_gradient, precision


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def max_relative_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(np.abs(want).max(), np.abs(got).max(), 1e-8)
    return float(np.abs(got - want).max() / scale)


def _field_from(x: Tensor) -> GaussianField:
    mean = T.narrow(x, 0, 0, 1)
    std = T.softplus(T.narrow(x, 0, 1, 1)) + 0.05
    return GaussianField(mean, std)


def _binary_mask(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.random(shape) < 0.5).astype(np.float64)


def _build_checks() -> list[tuple[str, Callable]]:
    """(name, maker) pairs; maker(rng) -> (scalar function, base array)."""

    def uniform(rng, shape, lo=-1.0, hi=1.0):
        return rng.uniform(lo, hi, size=shape)

    checks: list[tuple[str, Callable]] = []

    def register(name):
        def wrap(fn):
            checks.append((name, fn))
            return fn

        return wrap

    @register("add_mul")
    def _(rng):
        other = Tensor(uniform(rng, (3, 4)))
        return lambda x: ((x + other) * x).sum(), uniform(rng, (3, 4))

    @register("reciprocal_power")
    def _(rng):
        return lambda x: (1.0 / x + x**3).sum(), uniform(rng, (6,), 0.5, 2.0)

    @register("exp_log")
    def _(rng):
        return lambda x: (T.exp(x) + T.log(x + 3.0)).mean(), uniform(rng, (2, 5))

    @register("abs_clamp")
    def _(rng):
        return lambda x: (T.absolute(x) + T.clamp(x, -0.7, 0.7)).sum(), uniform(rng, (8,))

    @register("sigmoid_softplus_gelu")
    def _(rng):
        return lambda x: (T.sigmoid(x) * T.softplus(x) + T.gelu(x)).sum(), uniform(rng, (3, 3), -2.0, 2.0)

    @register("minmax")
    def _(rng):
        return lambda x: T.vmax(x) * 2.0 - T.vmin(x), uniform(rng, (9,))

    @register("matmul")
    def _(rng):
        other = Tensor(uniform(rng, (4, 3)))
        return lambda x: (x @ other).sum(), uniform(rng, (2, 4))

    @register("matmul_stacked")
    def _(rng):
        other = Tensor(uniform(rng, (2, 4, 3)))
        return lambda x: (x @ other).sum(), uniform(rng, (2, 3, 4))

    @register("reshape_permute_narrow_concat")
    def _(rng):
        def fn(x):
            a = T.narrow(x, 0, 0, 2)
            b = T.narrow(x, 0, 2, 2)
            return T.permute(T.concat([b, a], axis=0).reshape(2, 2, 3), (2, 0, 1)).sum()

        return fn, uniform(rng, (4, 3))

    @register("conv2d")
    def _(rng):
        w = Tensor(uniform(rng, (2, 2, 3, 3)))
        b = Tensor(uniform(rng, (2,)))
        return lambda x: ops.conv2d(x, w, b, stride=2, padding=1).sum(), uniform(rng, (2, 5, 5))

    @register("conv2d_weight")
    def _(rng):
        x = Tensor(uniform(rng, (2, 4, 4)))
        return lambda w: ops.conv2d(x, w.reshape(2, 2, 3, 3), padding=1).sum(), uniform(rng, (36,))

    @register("depthwise_conv2d")
    def _(rng):
        w = Tensor(uniform(rng, (3, 1, 5, 5)))
        return lambda x: ops.depthwise_conv2d(x, w).sum(), uniform(rng, (3, 6, 6))

    @register("depthwise_weight")
    def _(rng):
        x = Tensor(uniform(rng, (2, 5, 5)))
        return lambda w: ops.depthwise_conv2d(x, w.reshape(2, 1, 3, 3)).sum(), uniform(rng, (18,))

    @register("pointwise_conv2d")
    def _(rng):
        w = Tensor(uniform(rng, (4, 3, 1, 1)))
        return lambda x: ops.pointwise_conv2d(x, w).sum(), uniform(rng, (3, 4, 4))

    @register("linear")
    def _(rng):
        w = Tensor(uniform(rng, (4, 3)))
        b = Tensor(uniform(rng, (3,)))
        return lambda x: ops.linear(x, w, b).sum(), uniform(rng, (5, 4))

    @register("softmax")
    def _(rng):
        probe = Tensor(uniform(rng, (3, 5)))
        return lambda x: (ops.softmax(x, axis=-1) * probe).sum(), uniform(rng, (3, 5))

    @register("layer_norm")
    def _(rng):
        gain = Tensor(uniform(rng, (4,), 0.5, 1.5))
        shift = Tensor(uniform(rng, (4,)))
        probe = Tensor(uniform(rng, (3, 4)))
        return lambda x: (ops.layer_norm(x, gain, shift) * probe).sum(), uniform(rng, (3, 4))

    @register("bilinear_upsample")
    def _(rng):
        probe = Tensor(uniform(rng, (2, 8, 6)))
        return lambda x: (ops.bilinear_upsample(x, 2) * probe).sum(), uniform(rng, (2, 4, 3))

    @register("reparameterized_sample")
    def _(rng):
        frozen = rng.standard_normal((1, 3, 3))

        def fn(x):
            field = _field_from(x)
            return (field.mean + field.std * Tensor(frozen)).sum()

        return fn, uniform(rng, (2, 3, 3))

    @register("uncertainty_map_attached")
    def _(rng):
        seed = int(rng.integers(0, 2**31))
        probe = Tensor(uniform(rng, (1, 3, 3)))

        def fn(x):
            field = _field_from(x)
            samples = draw_samples(field, 4, np.random.default_rng(seed))
            return (uncertainty_map(samples) * probe).sum()

        return fn, uniform(rng, (2, 3, 3))

    @register("aggregate")
    def _(rng):
        u_l = Tensor(uniform(rng, (1, 3, 3), 0.0, 1.0))
        u_g = Tensor(uniform(rng, (1, 3, 3), 0.0, 1.0))
        f_g = Tensor(uniform(rng, (2, 3, 3)))
        return lambda x: aggregate(x, f_g, u_l, u_g).sum(), uniform(rng, (2, 3, 3))

    @register("loss_bce")
    def _(rng):
        y = _binary_mask(rng, (1, 4, 4))
        return lambda x: losses.bce_loss(x, y), uniform(rng, (1, 4, 4), -2.0, 2.0)

    @register("loss_bce_probs")
    def _(rng):
        y = _binary_mask(rng, (1, 4, 4))
        return lambda x: losses.bce_probs(T.sigmoid(x), y), uniform(rng, (1, 4, 4), -2.0, 2.0)

    @register("loss_dice")
    def _(rng):
        y = _binary_mask(rng, (1, 4, 4))
        return lambda x: losses.dice_loss(x, y), uniform(rng, (1, 4, 4), -2.0, 2.0)

    @register("loss_boundary_map")
    def _(rng):
        probe = Tensor(uniform(rng, (1, 5, 5)))
        return lambda x: (losses.boundary_map(T.sigmoid(x)) * probe).sum(), uniform(rng, (1, 5, 5), -1.5, 1.5)

    @register("loss_seg")
    def _(rng):
        y = _binary_mask(rng, (1, 4, 4))
        return lambda x: losses.seg_loss(x, y, boundary_weight=0.7), uniform(rng, (1, 4, 4), -2.0, 2.0)

    @register("loss_kl")
    def _(rng):
        return lambda x: losses.kl_standard_normal(_field_from(x)), uniform(rng, (2, 3, 3))

    @register("loss_uncertainty")
    def _(rng):
        y = _binary_mask(rng, (1, 3, 3))
        seed = int(rng.integers(0, 2**31))
        return (
            lambda x: losses.uncertainty_loss(_field_from(x), y, 0.2, np.random.default_rng(seed)),
            uniform(rng, (2, 3, 3)),
        )

    @register("loss_total")
    def _(rng):
        y = _binary_mask(rng, (1, 4, 4))
        seed = int(rng.integers(0, 2**31))
        weights = losses.LossWeights()

        def fn(x):
            logits = T.narrow(x, 0, 0, 1)
            field_l = _field_from(T.narrow(x, 0, 1, 2))
            field_g = _field_from(T.narrow(x, 0, 3, 2))
            return losses.total_loss(logits, y, field_l, field_g, weights, np.random.default_rng(seed))

        return fn, uniform(rng, (5, 4, 4))

    return checks


def run_gradient_checks(instances: int = 10, tolerance: float = 1e-4, seed: int = 0,
                        h: float = 1e-5) -> list[CheckResult]:
    """Run every check ``instances`` times; worst relative error per op."""
    results = []
    with precision(64):
        for name, maker in _build_checks():
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng(np.random.SeedSequence([seed, hash(name) & 0x7FFFFFFF, i]))
                fn, base = maker(rng)
                x = Tensor(np.asarray(base, dtype=np.float64), requires_grad=True)
                fn(x).backward()
                want = finite_difference_gradient(fn, Tensor(np.asarray(base, dtype=np.float64)), h=h)
                worst = max(worst, max_relative_error(x.grad, want))
            results.append(CheckResult(name, worst, worst < tolerance))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  {'pass' if r.passed else 'FAIL'}"
             for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return "\n".join(lines)
