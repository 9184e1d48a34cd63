"""Differentiable layers and losses built on the tape in :mod:`tensor`."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from datforge.errors import ShapeError
from datforge.numerics.tensor import Tensor, record

ACTIVATIONS = ("relu", "sigmoid", "softmax", "log_softmax")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid_np(x) -> np.ndarray:
    return _sigmoid(np.atleast_1d(np.asarray(x, dtype=np.float64)))


def activation(x: Tensor, kind: str) -> Tensor:
    """Apply relu, sigmoid, softmax or log_softmax (the latter two over the last axis)."""
    if x.size == 0:
        raise ShapeError("activation of an empty tensor")
    if kind == "relu":
        mask = x.data > 0
        return record(x.data * mask, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return record(s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "softmax":
        s = softmax_np(x.data)

        def backward(g):
            return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

        return record(s, (x,), backward)
    if kind == "log_softmax":
        z = x.data - x.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - lse
        s = np.exp(out)
        return record(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [N, D] and ``weight`` of shape [D, E]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")

    def backward(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record(x.data @ weight.data + bias.data, (x, weight, bias), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input via im2col."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [K,C,kh,kw], got {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d channel dimension mismatch: input C={c}, weight C={wc}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({k},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {h + 2 * padding}")
    if kw > w + 2 * padding:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {w + 2 * padding}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # [N, Ho, Wo, C, kh, kw] -> rows of receptive fields
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(k, c * kh * kw)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            # scatter in NHWC order: contiguous channel runs make the adds cheaper
            gxp = np.zeros((n, xp.shape[2], xp.shape[3], c), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[:, :, :, :, i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    return record(np.ascontiguousarray(out), (x, weight, bias), backward)


def interpolation_matrix(src: int, dst: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear resampling weights of shape [dst, src]."""
    mat = np.zeros((dst, src), dtype=dtype)
    if dst == 1 or src == 1:
        pos = np.zeros(dst)
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, src - 1)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    rows = np.arange(dst)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_interpolate(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize [N,C,H,W] maps with align-corners bilinear sampling."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_interpolate expects [N,C,H,W], got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_interpolate output size must be positive, got {out_h}x{out_w}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"bilinear_interpolate input has zero spatial extent: {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if (h, w) == (out_h, out_w):
        return record(x.data.copy(), (x,), lambda g: (g,))
    ry = interpolation_matrix(h, out_h, x.dtype)
    rx = interpolation_matrix(w, out_w, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ry, x.data, rx, optimize=True)
    return record(out, (x,), lambda g: (np.einsum("ih,ncij,jw->nchw", ry, g, rx, optimize=True),))


def cosine_map(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-location cosine similarity over the channel axis of two [N,C,H,W] maps."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_map shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise ShapeError(f"cosine_map expects [N,C,H,W], got {a.shape}")
    raw_a = np.sqrt((a.data * a.data).sum(axis=1))
    raw_b = np.sqrt((b.data * b.data).sum(axis=1))
    na = np.maximum(raw_a, eps)
    nb = np.maximum(raw_b, eps)
    dot = (a.data * b.data).sum(axis=1)
    out = dot / (na * nb)

    def grad_side(g, mine, other, n_mine, n_other, raw_mine):
        scale = (g / (n_mine * n_other))[:, None]
        grad = scale * other
        # the clamp is flat below eps, so the norm term only acts above it
        active = (raw_mine > eps)[:, None]
        grad = grad - active * (g * dot / (n_mine**3 * n_other))[:, None] * mine
        return grad

    def backward(g):
        ga = grad_side(g, a.data, b.data, na, nb, raw_a) if a.requires_grad else None
        gb = grad_side(g, b.data, a.data, nb, na, raw_b) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


# -- losses ---------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy between sigmoid(logits) and {0,1} targets."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype)
    if t.shape != x.shape:
        raise ShapeError(f"bce targets shape {t.shape} != logits shape {x.shape}")
    count = x.size
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / count

    def backward(g):
        return ((_sigmoid(x) - t) * (g / count),)

    return record(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def smooth_l1_sum(pred: Tensor, target: np.ndarray, weight: np.ndarray, beta: float = 1.0) -> Tensor:
    """Weighted sum of smooth-L1 (Huber with transition ``beta``) residuals."""
    d = pred.data - np.asarray(target, dtype=pred.dtype)
    wgt = np.asarray(weight, dtype=pred.dtype)
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss = (per * wgt).sum()

    def backward(g):
        return (g * wgt * np.where(quad, d / beta, np.sign(d)),)

    return record(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def cross_entropy_sum(logits: Tensor, labels: np.ndarray, weight: np.ndarray) -> Tensor:
    """Weighted sum of softmax cross-entropy over rows of [M, K] logits."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [M,K] logits, got {logits.shape}")
    wgt = np.asarray(weight, dtype=logits.dtype)
    labels = np.where(wgt != 0, np.asarray(labels, dtype=np.int64), 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    nll = lse - z[rows, labels]
    loss = (nll * wgt).sum()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (wgt * g)[:, None],)

    return record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-8) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    raw = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(raw, eps)
    out = x.data / norm

    def backward(g):
        active = raw > eps
        proj = (g * out).sum(axis=axis, keepdims=True)
        return ((g - active * out * proj) / norm,)

    return record(out, (x,), backward)
