"""Differentiable layer primitives on NCHW tensors."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, get_dtype

EPS = 1e-8


class ShapeError(ValueError):
    pass


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]
    b, c = xp.shape[:2]
    # (B, C, kh, kw, Ho, Wo) so that the column index matches weight.reshape(Cout, -1)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B,Cin,H,W] with ``weight`` [Cout,Cin,kh,kw]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (B,C,H,W), got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (Cout,Cin,kh,kw), got shape {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got kh={kh}, kw={kw}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: H'={ho}, W'={wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, cout, ho, wo)
    xp_shape = xp.shape

    def backward(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = gx = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(b, cin, kh, kw, ho, wo)
            gxp = np.zeros(xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + stride * (ho - 1) + 1: stride,
                        j: j + stride * (wo - 1) + 1: stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    a = x.data
    mask = a > 0
    return Tensor._from_op(a * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(0.0, a).astype(a.dtype)
    sig = np.where(a >= 0, 1.0 / (1.0 + np.exp(-np.abs(a))),
                   np.exp(-np.abs(a)) / (1.0 + np.exp(-np.abs(a)))).astype(a.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * sig,), "softplus")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_pair(score_a: Tensor, score_b: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-pixel two-way softmax, max-subtracted. Returns (w_a, w_b) with w_a + w_b = 1."""
    if score_a.shape != score_b.shape:
        raise ShapeError(f"softmax_pair shape mismatch: {score_a.shape} vs {score_b.shape}")
    a, b = score_a.data, score_b.data
    m = np.maximum(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    z = ea + eb
    wa = ea / z
    wb = eb / z
    both = np.stack([wa, wb])

    def backward(g):
        # d wa / d a = wa*wb, d wa / d b = -wa*wb ; wb = 1 - wa
        ga, gb_ = g[0], g[1]
        k = wa * wb * (ga - gb_)
        return (k, -k)

    pair = Tensor._from_op(both, (score_a, score_b), backward, "softmax_pair")
    return pair[0], pair[1]


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        g = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(g[bounds[i]: bounds[i + 1]], 0, axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, backward, "concat")


def concat_channels(*tensors: Tensor) -> Tensor:
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels needs equal B,H,W: {ref} vs {t.shape}")
    return concat(tensors, axis=1)


def split_channels(x: Tensor, sizes) -> Tuple[Tensor, ...]:
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    return tuple(x[:, bounds[i]: bounds[i + 1]] for i in range(len(sizes)))


def add_features(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add_features needs identical shapes: {a.shape} vs {b.shape}")
    return a + b


def upsample_nearest2x(x: Tensor) -> Tensor:
    a = x.data
    out = a.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = a.shape[-2:]

    def backward(g):
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return Tensor._from_op(out, (x,), backward, "upsample2x")


def _phase_matrices(k: int) -> np.ndarray:
    """(2, 3, k) maps from a k-tap kernel on the 2x nearest-upsampled grid to a
    3-tap kernel on the source grid, one per output phase."""
    p = k // 2
    a = np.zeros((2, 3, k))
    for r in range(2):
        for d in range(k):
            off = (r + d - p) // 2
            a[r, off + 1, d] = 1.0
    return a


def upsample_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``conv2d(upsample_nearest2x(x), weight, bias, padding=k//2)`` computed at the
    source resolution: each of the four output phases is a folded 3x3 kernel."""
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (3, 5):
        raise ShapeError(f"upsample_conv2d supports 3x3 or 5x5 kernels, got {kh}x{kw}")
    fold = _phase_matrices(kh).astype(get_dtype())
    wd = weight.data
    # folded[r, s, o, c, i, j] = sum_{d,e} A[r,i,d] W[o,c,d,e] A[s,j,e]
    folded = np.einsum("rid,ocde,sje->rsocij", fold, wd, fold, optimize=True)

    def fold_backward(g):
        return (np.einsum("rid,rsocij,sje->ocde", fold, g, fold, optimize=True),)

    wf = Tensor._from_op(np.ascontiguousarray(folded).reshape(4 * cout, cin, 3, 3), (weight,),
                         lambda g: fold_backward(g.reshape(2, 2, cout, cin, 3, 3)), "fold_upconv")
    bf = None
    if bias is not None:
        bf = Tensor._from_op(np.tile(bias.data, 4), (bias,),
                             lambda g: (g.reshape(4, cout).sum(axis=0),), "tile_bias")
    y = conv2d(x, wf, bf, stride=1, padding=1)
    return pixel_shuffle2x(y)


def pixel_shuffle2x(x: Tensor) -> Tensor:
    """[B, 4C, H, W] with channel blocks ordered (r, s) -> [B, C, 2H, 2W]."""
    b, c4, h, w = x.shape
    c = c4 // 4
    out = x.data.reshape(b, 2, 2, c, h, w).transpose(0, 3, 4, 1, 5, 2).reshape(b, c, 2 * h, 2 * w)

    def backward(g):
        g = g.reshape(b, c, h, 2, w, 2).transpose(0, 3, 5, 1, 2, 4)
        return (np.ascontiguousarray(g).reshape(b, c4, h, w),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def normalize_channels(x: Tensor, eps: float = EPS) -> Tensor:
    """L2-normalise along the channel axis; ``eps`` bounds the norm away from zero."""
    norm = ((x * x).sum(axis=1, keepdims=True) + eps * eps).sqrt()
    return x / norm


def _mask_array(mask, like: Tensor) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    m = np.broadcast_to(m.astype(like.data.dtype), (like.shape[0], 1) + like.shape[2:])
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be binary")
    return m


def masked_l2_loss(pred: Tensor, gt, mask) -> Tensor:
    """Mean squared error over pixels where ``mask`` is 1."""
    m = _mask_array(mask, pred)
    n = float(m.sum())
    if n == 0:
        raise ValueError("empty supervision: mask has no valid pixels")
    diff = pred - as_tensor(gt)
    return (diff * diff * m).sum() * (1.0 / n)


def cosine_loss(pred_n: Tensor, gt_n, mask, eps: float = EPS) -> Tensor:
    """Mean over valid pixels of ``1 - <normalize(pred), gt>``."""
    m = _mask_array(mask, pred_n)
    n = float(m.sum())
    if n == 0:
        raise ValueError("empty supervision: mask has no valid pixels")
    unit = normalize_channels(pred_n, eps)
    cos = (unit * as_tensor(gt_n)).sum(axis=1, keepdims=True)
    return ((1.0 - cos) * m).sum() * (1.0 / n)
