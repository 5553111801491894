"""Neural-network kernels on single (channels-first) feature maps.

All forward passes are vectorized numpy; each op carries a hand-written
adjoint so it plugs into the reverse-mode engine in :mod:`buildseg.tensor`.
Spatial layout is row-major (C, H, W) throughout; token layout is (N, C).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ConfigError, ShapeError, Tensor, _make, as_tensor


def _conv_out_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _zero_pad(arr: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return arr
    c, h, w = arr.shape
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=arr.dtype)
    out[:, pad : pad + h, pad : pad + w] = arr
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in,H,W) map with (C_out,C_in,kh,kw) filters."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out,C_in,kh,kw), got {weight.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d channel mismatch on input axis 0: input has {c_in}, weight expects {wc_in}")
    for k in (kh, kw):
        if k % 2 == 0 and k != 2:
            raise ConfigError(f"conv2d kernel extent {k} unsupported (odd sizes or the 2x2 stem case)")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")

    h_out = _conv_out_size(h, kh, stride, padding)
    w_out = _conv_out_size(w, kw, stride, padding)
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"conv2d output collapsed to {h_out}x{w_out} for input {h}x{w}, kernel {kh}x{kw}")

    xp = _zero_pad(x.data, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * kh * kw, h_out * w_out)
    w2d = weight.data.reshape(c_out, c_in * kh * kw)
    out = (w2d @ cols).reshape(c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        g2d = g.reshape(c_out, h_out * w_out)
        if weight.requires_grad:
            weight._accumulate((g2d @ cols.T).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gcols = (w2d.T @ g2d).reshape(c_in, kh, kw, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[:, i, j]
            if padding:
                gxp = gxp[:, padding : padding + h, padding : padding + w]
            x._accumulate(gxp)

    return _make(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, padding: int | None = None) -> Tensor:
    """Each channel convolved with its own k x k filter; spatial size kept."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError(f"depthwise_conv2d input must be (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if weight.ndim != 4 or weight.shape[1] != 1:
        raise ShapeError(f"depthwise_conv2d weight must be (C,1,k,k), got {weight.shape}")
    wc, _, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"depthwise_conv2d channel mismatch on axis 0: input has {c}, weight has {wc}")
    if kh != kw:
        raise ConfigError(f"depthwise_conv2d kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"depthwise_conv2d kernel size must be odd, got {kh}")
    same = (kh - 1) // 2
    if padding is None:
        padding = same
    if padding != same:
        raise ConfigError(f"depthwise_conv2d padding must be (k-1)/2 = {same} to preserve size, got {padding}")

    xp = _zero_pad(x.data, padding)
    wd = weight.data[:, 0]
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out = np.einsum("chwij,cij->chw", win, wd)

    def backward(g: np.ndarray) -> None:
        if weight.requires_grad:
            gw = np.einsum("chwij,chw->cij", win, g)
            weight._accumulate(gw[:, None])
        if x.requires_grad:
            # stride-1 same-padding makes the input adjoint a correlation of
            # the output gradient with the spatially flipped kernel
            gwin = sliding_window_view(_zero_pad(g, padding), (kh, kw), axis=(1, 2))
            x._accumulate(np.einsum("chwij,cij->chw", gwin, wd[:, ::-1, ::-1]))

    return _make(out, (x, weight), backward, "depthwise_conv2d")


def pointwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution: an independent linear map across channels per pixel."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError(f"pointwise_conv2d input must be (C,H,W), got {x.shape}")
    c_in, h, w = x.shape
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise_conv2d weight must be (C_out,C_in,1,1), got {weight.shape}")
    c_out, wc_in = weight.shape[:2]
    if wc_in != c_in:
        raise ShapeError(f"pointwise_conv2d channel mismatch on axis 0: input has {c_in}, weight expects {wc_in}")

    flat = x.data.reshape(c_in, h * w)
    w2d = weight.data.reshape(c_out, c_in)
    out = (w2d @ flat).reshape(c_out, h, w)

    def backward(g: np.ndarray) -> None:
        g2d = g.reshape(c_out, h * w)
        if weight.requires_grad:
            weight._accumulate((g2d @ flat.T).reshape(weight.shape))
        if x.requires_grad:
            x._accumulate((w2d.T @ g2d).reshape(x.shape))

    return _make(out, (x, weight), backward, "pointwise_conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of token rows: (N,C_in) @ (C_in,C_out) + (C_out,)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear inner-dimension mismatch: input axis 1 has {x.shape[1]}, weight axis 0 has {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias must be ({weight.shape[1]},), got {bias.shape}")

    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ weight.data.T)
        if weight.requires_grad:
            weight._accumulate(x.data.T @ g)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _make(out, parents, backward, "linear")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along one axis; each slice sums to one."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            x._accumulate(out * (g - inner))

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    x = as_tensor(x)
    gain = as_tensor(gain)
    shift = as_tensor(shift)
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm gain/shift must be ({c},), got {gain.shape} and {shift.shape}")

    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + shift.data

    def backward(g: np.ndarray) -> None:
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=lead))
        if shift.requires_grad:
            shift._accumulate(g.sum(axis=lead))
        if x.requires_grad:
            ghat = g * gain.data
            term = ghat - ghat.mean(axis=-1, keepdims=True) - xhat * (ghat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * term)

    return _make(out, (x, gain, shift), backward, "layer_norm")


def _interp_matrix(in_extent: int, factor: int, dtype) -> np.ndarray:
    """(out,in) weight matrix for 1-d align-corners-false interpolation."""
    out_extent = in_extent * factor
    coords = (np.arange(out_extent, dtype=np.float64) + 0.5) / factor - 0.5
    coords = np.clip(coords, 0.0, in_extent - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, in_extent - 1)
    frac = coords - lo
    mat = np.zeros((out_extent, in_extent), dtype=np.float64)
    rows = np.arange(out_extent)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat.astype(dtype)


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Scale a (C,H,W) map up by an integer factor with bilinear blending.

    Interpolation is separable, so the op is two matrix products:
    out = R @ x @ C^T with the per-axis weight matrices; the adjoint is the
    same sandwich with the matrices transposed.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample input must be (C,H,W), got {x.shape}")
    if factor < 1:
        raise ConfigError(f"bilinear_upsample factor must be >= 1, got {factor}")
    _, h, w = x.shape
    row_mat = _interp_matrix(h, factor, x.data.dtype)
    col_mat = _interp_matrix(w, factor, x.data.dtype)
    out = row_mat @ x.data @ col_mat.T

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(row_mat.T @ g @ col_mat)

    return _make(out, (x,), backward, "bilinear_upsample")


def nearest_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Plain numpy helper: pick the center sample of each factor x factor cell."""
    if factor <= 1:
        return arr
    off = factor // 2
    return arr[..., off::factor, off::factor]
