"""Training objectives: overlap, pixel, boundary and distribution terms.

The segmentation loss combines dice and binary cross-entropy with a
boundary-aware cross-entropy on Laplacian edge maps. Each Gaussian branch
adds an uncertainty loss: cross-entropy of one reparameterized draw against
the downsampled target plus a KL pull toward the standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import GaussianField
from .ops import conv2d, nearest_downsample
from .tensor import Tensor, absolute, as_tensor, clamp, log, sigmoid, softplus


@dataclass
class LossWeights:
    boundary: float = 1.0  # weight of the edge cross-entropy inside the segmentation loss
    kl: float = 0.2  # weight of the KL pull inside each uncertainty loss
    global_branch: float = 0.5
    local_branch: float = 0.5

    def validate(self) -> "LossWeights":
        for name in ("boundary", "kl", "global_branch", "local_branch"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight '{name}' must be nonnegative")
        return self


def _check_binary(target: np.ndarray) -> np.ndarray:
    if not np.all((target == 0) | (target == 1)):
        raise ValueError("target mask must contain only 0 and 1")
    return target


def _target_array(target) -> np.ndarray:
    return target.data if isinstance(target, Tensor) else np.asarray(target)


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of logits against a {0,1} mask.

    Uses the softplus form softplus(z) - z*y, which never evaluates
    log(0) no matter how saturated the logits are.
    """
    logits = as_tensor(logits)
    y = _check_binary(_target_array(target))
    if y.shape != logits.shape:
        raise ValueError(f"target shape {y.shape} does not match logits shape {logits.shape}")
    y = y.astype(logits.data.dtype)
    return (softplus(logits) - logits * Tensor(y)).mean()


def bce_probs(probs: Tensor, target, eps: float = 1e-6, weight: np.ndarray | None = None) -> Tensor:
    """Cross-entropy for inputs that are already probabilities in [0,1].

    Needed by the boundary term, whose prediction map is an edge response
    rather than a logit. ``weight`` masks pixels out of the mean.
    """
    probs = as_tensor(probs)
    y = Tensor(_target_array(target).astype(probs.data.dtype))
    p = clamp(probs, eps, 1.0 - eps)
    pixel = -(y * log(p) + (1.0 - y) * log(1.0 - p))
    if weight is None:
        return pixel.mean()
    w = weight.astype(probs.data.dtype)
    return (pixel * Tensor(w)).sum() * (1.0 / max(w.sum(), 1.0))


def dice_loss(logits: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2*sum(p*y)+s) / (sum(p)+sum(y)+s) over sigmoid probabilities."""
    logits = as_tensor(logits)
    y = Tensor(_target_array(target).astype(logits.data.dtype))
    p = sigmoid(logits)
    overlap = (p * y).sum() * 2.0 + smooth
    mass = p.sum() + y.sum() + smooth
    return 1.0 - overlap / mass


_EDGE_KERNEL = np.array([[-1.0, -1.0, -1.0], [-1.0, 8.0, -1.0], [-1.0, -1.0, -1.0]])


def boundary_map(mask: Tensor) -> Tensor:
    """|Laplacian| of a [0,1] map, clamped back into [0,1].

    Zero padding means the outermost ring responds to the image border, not
    to real edges; callers are expected to mask it (see interior_weight).
    """
    mask = as_tensor(mask)
    if mask.ndim != 3 or mask.shape[0] != 1:
        raise ValueError(f"boundary_map expects (1,H,W), got {mask.shape}")
    lo, hi = mask.data.min(), mask.data.max()
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"boundary_map input must lie in [0,1], got range [{lo}, {hi}]")
    kernel = Tensor(_EDGE_KERNEL.reshape(1, 1, 3, 3).astype(mask.data.dtype))
    return clamp(absolute(conv2d(mask, kernel, stride=1, padding=1)), 0.0, 1.0)


def interior_weight(height: int, width: int) -> np.ndarray:
    """1 everywhere except a zeroed 1-pixel border."""
    w = np.zeros((1, height, width))
    w[:, 1:-1, 1:-1] = 1.0
    return w


def seg_loss(logits: Tensor, target, boundary_weight: float = 1.0, smooth: float = 1.0) -> Tensor:
    """dice + bce + boundary_weight * edge-map bce (border excluded)."""
    logits = as_tensor(logits)
    total = dice_loss(logits, target, smooth=smooth) + bce_loss(logits, target)
    if boundary_weight > 0.0:
        y = _target_array(target)
        pred_edges = boundary_map(sigmoid(logits))
        true_edges = boundary_map(Tensor(y.astype(logits.data.dtype)))
        inner = interior_weight(logits.shape[1], logits.shape[2])
        total = total + boundary_weight * bce_probs(pred_edges, true_edges, weight=inner)
    return total


def kl_standard_normal(field: GaussianField) -> Tensor:
    """Mean KL divergence of per-pixel N(mean, std^2) from N(0, 1)."""
    if field.std.data.min() <= 0.0:
        raise ValueError("kl_standard_normal needs strictly positive std")
    mu, std = field.mean, field.std
    return ((mu * mu + std * std - 1.0 - 2.0 * log(std)) * 0.5).mean()


def resize_target(target: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor downsample of a binary (1,H,W) mask."""
    _, h, w = target.shape
    if h == height and w == width:
        return target
    if h % height or w % width or h // height != w // width:
        raise ValueError(f"cannot resize {h}x{w} target to {height}x{width}: not an integer factor")
    return nearest_downsample(target, h // height)


def uncertainty_loss(field: GaussianField, target, kl_weight: float, rng: np.random.Generator) -> Tensor:
    """BCE of one reparameterized draw (as logits) plus the KL regularizer."""
    y = _check_binary(_target_array(target))
    _, h, w = field.shape
    y_small = resize_target(y, h, w)
    eps = rng.standard_normal(field.mean.shape).astype(field.mean.data.dtype)
    sample = field.mean + field.std * Tensor(eps)
    loss = bce_loss(sample, y_small)
    if kl_weight > 0.0:
        loss = loss + kl_weight * kl_standard_normal(field)
    return loss


def total_loss(logits: Tensor, target, field_local: GaussianField | None,
               field_global: GaussianField | None, weights: LossWeights,
               rng: np.random.Generator, smooth: float = 1.0) -> Tensor:
    """Segmentation loss plus the weighted branch uncertainty losses.

    The global branch draws before the local one; with a fixed rng the
    total is bit-reproducible.
    """
    weights.validate()
    loss = seg_loss(logits, target, boundary_weight=weights.boundary, smooth=smooth)
    if field_global is not None and weights.global_branch > 0.0:
        loss = loss + weights.global_branch * uncertainty_loss(field_global, target, weights.kl, rng)
    if field_local is not None and weights.local_branch > 0.0:
        loss = loss + weights.local_branch * uncertainty_loss(field_local, target, weights.kl, rng)
    return loss
