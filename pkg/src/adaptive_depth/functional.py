"""Layer primitives and losses with hand-written adjoints."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, add, make_result, matmul, transpose


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a [C*kh*kw, N*ho*wo] matrix, built from kh*kw strided slice copies."""
    n, c, h, w = x.shape
    xt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xt[:, :, padding : padding + h, padding : padding + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def _conv2d_backward(g, cols, wmat, x_shape, w_shape, stride, padding, need_dx=True):
    """Adjoints of a cross-correlation given the output gradient.

    ``cols`` is the [C*kh*kw, N*ho*wo] patch matrix and ``wmat`` the weight as
    [K, C*kh*kw]. Returns (dx, dw, db); dx is None when ``need_dx`` is false.
    """
    n, c, h, w = x_shape
    k, _, kh, kw = w_shape
    ho, wo = g.shape[2], g.shape[3]
    gt = g.transpose(1, 0, 2, 3).reshape(k, -1)
    dw = (gt @ cols.T).reshape(w_shape)
    db = gt.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
    dxt = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxt[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j]
    dx = dxt[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation, NCHW input and KCkk weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape}, kernel {weight.shape}")

    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = weight.data.reshape(k, -1)
    out = (wmat @ cols).reshape(k, n, ho, wo)
    if bias is not None:
        out += bias.data.reshape(k, 1, 1, 1)
    out = out.transpose(1, 0, 2, 3)

    def backward(g):
        # looked up at call time so a test can substitute the adjoint
        dx, dw, db = _conv2d_backward(g, cols, wmat, x.shape, weight.shape, stride, padding, x.requires_grad)
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear expects last dim {weight.shape[1]}, got input {x.shape}")
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


def avgpool2d(x: Tensor, kernel: int, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"avgpool2d kernel {kernel} too large for input {x.shape}")
    windows = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    out = windows.mean(axis=(-2, -1))
    scale = 1.0 / (kernel * kernel)

    def backward(g):
        dx = np.zeros_like(x.data)
        gs = g * scale
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (dx,)

    return make_result(out.astype(x.dtype), (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over spatial dims: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avgpool expects NCHW input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return make_result(out, (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W) for NCHW or (N,) for NC input.

    In training mode the running statistics are updated in place with
    ``new = (1 - momentum) * old + momentum * batch_stat``.
    """
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch_norm expects {gamma.shape[0]} channels, got input {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv_std.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def backward(gout):
        dgamma = (gout * xhat).sum(axis=axes)
        dbeta = gout.sum(axis=axes)
        dxhat = gout * g_
        if training:
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalization over the last axis."""
    d = x.shape[-1]
    if d != gamma.shape[0]:
        raise ShapeError(f"layer_norm expects last dim {gamma.shape[0]}, got input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(gout):
        lead = tuple(range(x.ndim - 1))
        dgamma = (gout * xhat).sum(axis=lead)
        dbeta = gout.sum(axis=lead)
        dxhat = gout * gamma.data
        dx = (inv_std / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


def _stable_log_softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    logp = _stable_log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def kl_divergence(
    teacher_logits: Union[Tensor, np.ndarray],
    student_logits: Tensor,
    temperature: float = 1.0,
) -> Tensor:
    """``T^2 * mean_n KL(softmax(teacher/T) || softmax(student/T))``.

    The teacher side is a constant: no gradient flows into it.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher.shape != student_logits.shape:
        raise ShapeError(
            f"kl_divergence shape mismatch: teacher {teacher.shape}, student {student_logits.shape}"
        )
    t = float(temperature)
    n = teacher.shape[0]
    log_p = _stable_log_softmax(teacher.astype(student_logits.dtype) / t)
    p = np.exp(log_p)
    log_q = _stable_log_softmax(student_logits.data / t)
    per_row = (p * (log_p - log_q)).sum(axis=-1)
    loss = t * t * per_row.mean()

    def backward(g):
        q = np.exp(log_q)
        return ((q - p) * (g * t / n),)

    return make_result(np.asarray(max(loss, 0.0), dtype=student_logits.dtype), (student_logits,), backward)
