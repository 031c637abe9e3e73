"""Central finite-difference checks of tape gradients.

Checks run in float64 so the comparison measures adjoint correctness rather
than float32 rounding of the forward pass.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .layers import BasicBlock, Linear, Module, MultiHeadAttention, SwitchableNorm, TransformerBlock
from .tensor import Tensor

TOLERANCE = 1e-3


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3) -> float:
    """Max per-element relative error between tape and central-difference gradients of scalar ``f``.

    ``x.data`` is perturbed in place and restored. Elements whose gradient is
    far below the largest one are compared against 1% of that scale instead
    of their own magnitude.
    """
    x.requires_grad = True
    x.grad = None
    out = f(x)
    out.backward()
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    x.grad = None

    numeric = np.zeros_like(analytic)
    flat = x.data.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = np.float64(f(x).data)
            flat[i] = orig - eps
            minus = np.float64(f(x).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)

    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(1e-2 * scale, 1e-12))
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def to_float64(module: Module) -> Module:
    """Cast every parameter and buffer of ``module`` to float64 in place."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    _cast_buffers(module)
    return module


def _cast_buffers(module):
    for key, value in vars(module).items():
        if key in module.buffer_names:
            if isinstance(value, list):
                setattr(module, key, [v.astype(np.float64) for v in value])
            else:
                setattr(module, key, value.astype(np.float64))
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, Module):
                _cast_buffers(item)


# -- suite ------------------------------------------------------------------
def _t(rng, *shape, away_from_zero=False):
    v = rng.normal(size=shape)
    if away_from_zero:
        v = np.sign(v) * (0.1 + np.abs(v))
    return Tensor(v, dtype=np.float64)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return T.sum(T.mul(out, Tensor(weights, dtype=np.float64)))


def _check_inputs(op, inputs, rng) -> float:
    """Check ``sum(op(*inputs) * R)`` against each input in turn."""
    probe = op(*inputs)
    weights = rng.normal(size=probe.shape)
    worst = 0.0
    for k in range(len(inputs)):
        def f(x, k=k):
            args = list(inputs)
            args[k] = x
            return _weighted(op(*args), weights)

        worst = max(worst, finite_difference_check(f, inputs[k]))
    return worst


def _check_module(loss_fn, module, rng, extra=()) -> float:
    worst = 0.0
    for x in extra:
        worst = max(worst, finite_difference_check(lambda v: loss_fn(), x))
    for _, p in module.named_parameters():
        worst = max(worst, finite_difference_check(lambda v: loss_fn(), p))
    return worst


def _composite(rng) -> float:
    """conv -> switchable norm -> relu -> residual add -> head -> CE + KL."""
    block = to_float64(BasicBlock(3, 3, switchable=True, rng=rng))
    head = to_float64(Linear(3, 5, rng=rng))
    x = _t(rng, 2, 3, 6, 6)
    labels = np.array([1, 3])
    teacher = rng.normal(size=(2, 5))

    def loss():
        h = block(x, mode=1, training=True)
        logits = head(F.global_avgpool(h))
        return T.add(F.cross_entropy(logits, labels), F.kl_divergence(teacher, logits, 2.0))

    worst = finite_difference_check(lambda v: loss(), x)
    for name, p in list(block.named_parameters()) + list(head.named_parameters()):
        if name.endswith(".0"):
            continue  # mode-0 set is unused in a mode-1 pass
        worst = max(worst, finite_difference_check(lambda v: loss(), p))
    return worst


def _switchable(rng) -> float:
    norm = to_float64(SwitchableNorm(3, "batchnorm2d"))
    x = _t(rng, 4, 3, 2, 2)
    weights = rng.normal(size=x.shape)
    worst = 0.0
    for mode in (0, 1):
        fn = lambda v, m=mode: _weighted(norm(x, m, training=True), weights)
        worst = max(worst, finite_difference_check(fn, x))
        worst = max(worst, finite_difference_check(fn, norm.gamma[mode]))
        worst = max(worst, finite_difference_check(fn, norm.beta[mode]))
    return worst


def _attention(rng) -> float:
    mha = to_float64(MultiHeadAttention(8, 2, rng=rng))
    for _, p in mha.named_parameters():
        p.data = p.data * 25.0  # make the softmax non-trivial
    x = _t(rng, 1, 4, 8)
    weights = rng.normal(size=(1, 4, 8))
    return _check_module(lambda: _weighted(mha(x), weights), mha, rng, extra=(x,))


def _transformer_block(rng) -> float:
    blk = to_float64(TransformerBlock(8, 2, 2, switchable=True, rng=rng))
    for _, p in blk.named_parameters():
        if p.ndim == 2:
            p.data = p.data * 20.0
    x = _t(rng, 2, 3, 8)
    weights = rng.normal(size=(2, 3, 8))
    return _check_module(lambda: _weighted(blk(x, 0, True), weights), blk, rng, extra=(x,))


def suite() -> dict[str, Callable[[np.random.Generator], float]]:
    """Named checks; each returns the max relative error it observed."""
    t = _t
    return {
        "add": lambda r: _check_inputs(T.add, [t(r, 3, 4), t(r, 4)], r),
        "sub": lambda r: _check_inputs(T.sub, [t(r, 3, 4), t(r, 3, 1)], r),
        "mul": lambda r: _check_inputs(T.mul, [t(r, 3, 4), t(r, 3, 4)], r),
        "div": lambda r: _check_inputs(T.div, [t(r, 3, 4), Tensor(2 + r.random((3, 4)), dtype=np.float64)], r),
        "matmul": lambda r: _check_inputs(T.matmul, [t(r, 4, 3), t(r, 3, 5)], r),
        "batched_matmul": lambda r: _check_inputs(T.matmul, [t(r, 2, 3, 4, 3), t(r, 2, 3, 3, 2)], r),
        "sum": lambda r: _check_inputs(lambda a: T.sum(a, axis=1), [t(r, 3, 4, 2)], r),
        "mean": lambda r: _check_inputs(lambda a: T.mean(a, axis=(0, 2), keepdims=True), [t(r, 3, 4, 2)], r),
        "reshape": lambda r: _check_inputs(lambda a: T.reshape(a, (6, 4)), [t(r, 3, 2, 4)], r),
        "transpose": lambda r: _check_inputs(lambda a: T.transpose(a, (2, 0, 1)), [t(r, 3, 2, 4)], r),
        "getitem": lambda r: _check_inputs(lambda a: a[:, 1], [t(r, 3, 4, 2)], r),
        "concat": lambda r: _check_inputs(lambda a, b: T.concat([a, b], axis=1), [t(r, 2, 3), t(r, 2, 2)], r),
        "relu": lambda r: _check_inputs(T.relu, [t(r, 3, 5, away_from_zero=True)], r),
        "gelu": lambda r: _check_inputs(T.gelu, [t(r, 3, 5)], r),
        "softmax": lambda r: _check_inputs(lambda a: T.softmax(a, axis=1), [t(r, 3, 5)], r),
        "log_softmax": lambda r: _check_inputs(lambda a: T.log_softmax(a, axis=-1), [t(r, 3, 5)], r),
        "conv2d": lambda r: _check_inputs(
            lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [t(r, 2, 3, 8, 8), t(r, 4, 3, 3, 3), t(r, 4)], r
        ),
        "linear": lambda r: _check_inputs(F.linear, [t(r, 2, 3, 4), t(r, 5, 4), t(r, 5)], r),
        "avgpool2d": lambda r: _check_inputs(lambda x: F.avgpool2d(x, 2), [t(r, 2, 2, 4, 4)], r),
        "global_avgpool": lambda r: _check_inputs(F.global_avgpool, [t(r, 2, 3, 4, 4)], r),
        "flatten": lambda r: _check_inputs(T.flatten, [t(r, 2, 3, 2, 2)], r),
        "batch_norm": lambda r: _check_inputs(
            lambda x, g, b: F.batch_norm(x, g, b, np.zeros(3), np.ones(3), True), [t(r, 4, 3, 2, 2), t(r, 3), t(r, 3)], r
        ),
        "batch_norm_eval": lambda r: _check_inputs(
            lambda x, g, b: F.batch_norm(x, g, b, np.full(3, 0.3), np.full(3, 2.0), False),
            [t(r, 4, 3, 2, 2), t(r, 3), t(r, 3)],
            r,
        ),
        "layer_norm": lambda r: _check_inputs(F.layer_norm, [t(r, 2, 3, 6), t(r, 6), t(r, 6)], r),
        "switchable_norm": _switchable,
        "cross_entropy": lambda r: finite_difference_check(lambda x: F.cross_entropy(x, [0, 2, 4]), t(r, 3, 5)),
        "kl_divergence": lambda r: (
            lambda teacher: finite_difference_check(lambda x: F.kl_divergence(teacher, x, 1.5), t(r, 3, 5))
        )(r.normal(size=(3, 5))),
        "attention": _attention,
        "transformer_block": _transformer_block,
        "composite": _composite,
    }


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    results = []
    for name, check in suite().items():
        rng = np.random.default_rng(seed)
        results.append((name, check(rng)))
    return results
