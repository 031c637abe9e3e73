"""Parameterized layers, including the two-set skip-aware normalization."""

from __future__ import annotations

from typing import Callable, Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor, add, gelu, matmul, relu, softmax, sub

Probe = Callable[[Tensor, Tensor], None]


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True)


class Module:
    """Minimal container: discovers parameters and buffers by attribute walk.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    numpy arrays named in the class-level ``buffer_names``. Lists of modules
    or tensors are indexed by position.
    """

    buffer_names: tuple = ()

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self._children():
            yield from _walk_params(value, prefix + key)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            name = prefix + key
            if key in self.buffer_names:
                if isinstance(value, list):
                    for i, arr in enumerate(value):
                        yield f"{name}.{i}", arr
                else:
                    yield name, value
            else:
                yield from _walk_buffers(value, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every parameter and buffer by dotted name (arrays are live views)."""
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src


def _walk_params(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_params(item, f"{name}.{i}")


def _walk_buffers(value, name):
    if isinstance(value, Module):
        yield from value.named_buffers(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_buffers(item, f"{name}.{i}")


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=False, rng=None):
        rng = rng or np.random.default_rng(0)
        fan_out = out_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_out), (out_channels, in_channels, kernel_size, kernel_size))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_channels)) if bias else None
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            F.conv_output_size(h, self.kernel_size, self.stride, self.padding),
            F.conv_output_size(w, self.kernel_size, self.stride, self.padding),
        )

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        k = self.kernel_size
        return self.out_channels * self.in_channels * k * k * ho * wo


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, std=None):
        rng = rng or np.random.default_rng(0)
        if std is None:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform(-bound, bound, (out_features, in_features))
        else:
            w = rng.normal(0.0, std, (out_features, in_features))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_features)) if bias else None
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def macs(self) -> int:
        return self.in_features * self.out_features


class BatchNorm2d(Module):
    """Single-set batch norm. Accepts and ignores a mode argument."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.num_features = num_features
        self.gamma = parameter(np.ones(num_features))
        self.beta = parameter(np.zeros(num_features))
        self.running_mean = np.zeros(num_features, dtype=DEFAULT_DTYPE)
        self.running_var = np.ones(num_features, dtype=DEFAULT_DTYPE)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, mode: int = 0, training: bool = False) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, training, self.momentum, self.eps
        )


class LayerNorm(Module):
    """Single-set layer norm. Accepts and ignores a mode argument."""

    def __init__(self, num_features, eps=1e-6):
        self.num_features = num_features
        self.gamma = parameter(np.ones(num_features))
        self.beta = parameter(np.zeros(num_features))
        self.eps = eps

    def __call__(self, x: Tensor, mode: int = 0, training: bool = False) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class SwitchableNorm(Module):
    """Normalization with exactly two parameter (and statistic) sets.

    Mode 0 is used when the owning stage runs its skippable blocks, mode 1
    when they are bypassed. Only the selected set is read or updated.
    """

    buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features, kind="batchnorm2d", momentum=0.1, eps=None):
        if kind not in ("batchnorm2d", "layernorm"):
            raise ValueError(f"unknown norm kind {kind!r}")
        self.kind = kind
        self.num_features = num_features
        self.gamma = [parameter(np.ones(num_features)) for _ in range(2)]
        self.beta = [parameter(np.zeros(num_features)) for _ in range(2)]
        if kind == "batchnorm2d":
            self.running_mean = [np.zeros(num_features, dtype=DEFAULT_DTYPE) for _ in range(2)]
            self.running_var = [np.ones(num_features, dtype=DEFAULT_DTYPE) for _ in range(2)]
            self.eps = 1e-5 if eps is None else eps
        else:
            self.running_mean = []
            self.running_var = []
            self.eps = 1e-6 if eps is None else eps
        self.momentum = momentum

    def __call__(self, x: Tensor, mode: int = 0, training: bool = False) -> Tensor:
        if mode not in (0, 1):
            raise ValueError(f"switchable norm mode must be 0 or 1, got {mode!r}")
        if self.kind == "layernorm":
            return F.layer_norm(x, self.gamma[mode], self.beta[mode], self.eps)
        return F.batch_norm(
            x,
            self.gamma[mode],
            self.beta[mode],
            self.running_mean[mode],
            self.running_var[mode],
            training,
            self.momentum,
            self.eps,
        )


def make_norm(num_features: int, kind: str, switchable: bool) -> Module:
    if switchable:
        return SwitchableNorm(num_features, kind)
    return BatchNorm2d(num_features) if kind == "batchnorm2d" else LayerNorm(num_features)


class BasicBlock(Module):
    """Two 3x3 convolutions forming the residual branch; output is shortcut + branch.

    No activation follows the addition, so a block with a zeroed branch is
    an exact identity (non-downsampling case).
    """

    def __init__(self, in_channels, out_channels, stride=1, switchable=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.uses_switchable_norm = switchable
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, rng=rng)
        self.norm1 = make_norm(out_channels, "batchnorm2d", switchable)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng)
        self.norm2 = make_norm(out_channels, "batchnorm2d", switchable)
        if stride != 1 or in_channels != out_channels:
            self.proj = Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng)
            self.proj_norm = make_norm(out_channels, "batchnorm2d", switchable)
        else:
            self.proj = None
            self.proj_norm = None

    @property
    def downsamples(self) -> bool:
        return self.proj is not None

    def branch(self, h: Tensor, mode: int, training: bool) -> Tensor:
        out = relu(self.norm1(self.conv1(h), mode, training))
        return self.norm2(self.conv2(out), mode, training)

    def shortcut(self, h: Tensor, mode: int, training: bool) -> Tensor:
        if self.proj is None:
            return h
        return self.proj_norm(self.proj(h), mode, training)

    def __call__(self, h: Tensor, mode: int = 0, training: bool = False, probe: Optional[Probe] = None) -> Tensor:
        fh = self.branch(h, mode, training)
        sc = self.shortcut(h, mode, training)
        if fh.shape != sc.shape:
            raise ShapeError(f"residual branch {fh.shape} does not match shortcut {sc.shape}")
        if probe is not None:
            probe(h, fh)
        return add(sc, fh)

    def macs(self, h: int, w: int) -> tuple[int, int, int]:
        """MACs for one sample and the output spatial size."""
        total = self.conv1.macs(h, w)
        ho, wo = self.conv1.output_hw(h, w)
        total += self.conv2.macs(ho, wo)
        if self.proj is not None:
            total += self.proj.macs(h, w)
        return total, ho, wo


class MultiHeadAttention(Module):
    def __init__(self, dim, num_heads, rng=None):
        if dim % num_heads:
            raise ValueError(f"embed dim {dim} is not divisible by {num_heads} heads")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = Linear(dim, 3 * dim, rng=rng, std=0.02)
        self.out = Linear(dim, dim, rng=rng, std=0.02)
        self._last_attention = None

    @property
    def last_attention(self) -> Optional[np.ndarray]:
        return self._last_attention

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(f"attention expects [N, T, {self.dim}] tokens, got {x.shape}")
        n, t, d = x.shape
        qkv = self.qkv(x).reshape(n, t, 3, self.num_heads, self.head_dim).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        self._last_attention = weights.data
        ctx = matmul(weights, v).transpose(0, 2, 1, 3).reshape(n, t, d)
        return self.out(ctx)

    def macs(self, tokens: int) -> int:
        d = self.dim
        return tokens * d * 3 * d + 2 * tokens * tokens * d + tokens * d * d


class TransformerBlock(Module):
    """Pre-norm encoder block: x + attn(ln1(x)), then + mlp(ln2(.))."""

    def __init__(self, dim, num_heads, mlp_ratio=2, switchable=False, rng=None):
        rng = rng or np.random.default_rng(0)
        self.uses_switchable_norm = switchable
        self.norm1 = make_norm(dim, "layernorm", switchable)
        self.attn = MultiHeadAttention(dim, num_heads, rng=rng)
        self.norm2 = make_norm(dim, "layernorm", switchable)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng=rng, std=0.02)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng=rng, std=0.02)

    downsamples = False

    def __call__(self, h: Tensor, mode: int = 0, training: bool = False, probe: Optional[Probe] = None) -> Tensor:
        a = add(h, self.attn(self.norm1(h, mode, training)))
        out = add(a, self.fc2(gelu(self.fc1(self.norm2(a, mode, training)))))
        if probe is not None:
            probe(h, sub(out.detach(), h.detach()))
        return out

    def macs(self, tokens: int) -> int:
        return self.attn.macs(tokens) + 2 * tokens * self.fc1.macs()
