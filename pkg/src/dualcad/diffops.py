"""Differentiable 2D operators with hand-written gradients.

Activations are ``(batch, channels, height, width)`` arrays. Each forward
function returns ``(output, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache. Computation stays in the input dtype, so
float64 inputs give gradient-checkable results and float32 is used for
training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

SOFTDICE_SMOOTH = 1e-5


def _check_batch(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (batch, channels, height, width), got shape {x.shape}")


def _pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ShapeError(f"padding must be 'valid' or 'same', got {padding!r}")


def _im2col(xp, kh, kw, stride, ho, wo):
    """Patch matrix (B*Ho*Wo, C*kh*kw) with rows in (b, y, x) order."""
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(-1, cols.shape[3] * kh * kw)


def _pad(x, top, bottom, left, right):
    if top or bottom or left or right:
        return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return x


def conv2d(x, w, b, stride=1, padding="same"):
    """Cross-correlation of ``x`` (B, C, H, W) with ``w`` (O, C, kh, kw) plus bias (O,)."""
    _check_batch(x)
    if w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"weight shape {w.shape} incompatible with input shape {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} incompatible with weight shape {w.shape}")
    kh, kw = w.shape[2:]
    top, bottom, ho = _pad_amounts(x.shape[2], kh, stride, padding)
    left, right, wo = _pad_amounts(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {w.shape[2:]} larger than input {x.shape[2:]} with valid padding")
    xp = _pad(x, top, bottom, left, right)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = (cols @ w.reshape(w.shape[0], -1).T).reshape(x.shape[0], ho, wo, w.shape[0])
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b.reshape(1, -1, 1, 1)
    cache = (x.shape, xp.shape, cols, w, stride, (top, bottom, left, right))
    return out, cache


def conv2d_backward(dout, cache):
    x_shape, xp_shape, cols, w, stride, (top, bottom, left, right) = cache
    o, c, kh, kw = w.shape
    bsz, _, ho, wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    if stride == 1:
        # input gradient is a correlation of the padded upstream with the flipped kernel
        wf = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        dp = _pad(dout, kh - 1 - top, kh - 1 - bottom, kw - 1 - left, kw - 1 - right)
        dcols = _im2col(dp, kh, kw, 1, x_shape[2], x_shape[3])
        dx = (dcols @ wf.reshape(c, -1).T).reshape(bsz, x_shape[2], x_shape[3], c).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw, db
    dcols = (d2 @ w.reshape(o, -1)).reshape(bsz, ho, wo, c, kh, kw)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, top : top + x_shape[2], left : left + x_shape[3]]
    return np.ascontiguousarray(dx), dw, db


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def maxpool2(x):
    """2x2 non-overlapping max pooling; ties resolve to the first raster position."""
    _check_batch(x)
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2_backward(dout, cache):
    shape, arg = cache
    bsz, c, h, w = shape
    win = np.zeros(arg.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    return win.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def upconv2(x, w, b):
    """Nearest-neighbour 2x upsampling followed by a same-padded convolution."""
    _check_batch(x)
    up = x.repeat(2, axis=2).repeat(2, axis=3)
    out, cache = conv2d(up, w, b, 1, "same")
    return out, cache


def upconv2_backward(dout, cache):
    dup, dw, db = conv2d_backward(dout, cache)
    bsz, c, h2, w2 = dup.shape
    dx = dup.reshape(bsz, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    return dx, dw, db


def concat(a, b):
    """Channel concatenation; backward is a split at ``a.shape[1]``."""
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(dout, split):
    return dout[:, :split], dout[:, split:]


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_target(pred, target):
    if pred.shape[0] != target.shape[0] or pred.shape[-2:] != target.shape[-2:]:
        raise ShapeError(f"prediction shape {pred.shape} and target shape {target.shape} differ")


def softdice_loss(probs, target, smooth=SOFTDICE_SMOOTH):
    """Soft Dice loss on foreground probabilities (B, H, W), summed over the batch.

    Returns ``(loss, d_loss/d_probs)``.
    """
    if probs.shape != target.shape:
        raise ShapeError(f"probability shape {probs.shape} and target shape {target.shape} differ")
    g = target.astype(probs.dtype)
    num = 2.0 * np.sum(probs * g) + smooth
    den = np.sum(probs) + np.sum(g) + smooth
    loss = 1.0 - num / den
    grad = -(2.0 * g * den - num) / den**2
    return float(loss), grad.astype(probs.dtype)


def softmax_crossentropy(logits, target):
    """Mean voxelwise cross entropy of two-class logits (B, 2, H, W).

    Returns ``(loss, d_loss/d_logits, probs)``.
    """
    _check_batch(logits, "logits")
    if logits.shape[1] != 2:
        raise ShapeError(f"expected 2 logit channels, got {logits.shape[1]}")
    _check_target(logits, target)
    if target.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    t = target.astype(np.intp)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    n = t.size
    loss = -picked.sum() / n
    probs = np.exp(logp)
    onehot = np.stack([t == 0, t == 1], axis=1).astype(logits.dtype)
    grad = (probs - onehot) / n
    return float(loss), grad, probs


def combined_loss(logits, target):
    """SoftDice on the foreground channel plus cross entropy, equally weighted.

    Returns ``(total, dice, ce, d_total/d_logits, probs)``.
    """
    ce, dce, probs = softmax_crossentropy(logits, target)
    p1 = probs[:, 1]
    dice, dp1 = softdice_loss(p1, target)
    # two-channel softmax: dp1/dl1 = p1 (1 - p1) = -dp1/dl0
    s = dp1 * p1 * (1.0 - p1)
    grad = dce.copy()
    grad[:, 1] += s
    grad[:, 0] -= s
    return dice + ce, dice, ce, grad, probs


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update. Returns ``(new_params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = (p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return new, state
