"""Adaptive depth networks: stages split into mandatory and skippable sub-paths."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .layers import (
    BasicBlock,
    BatchNorm2d,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    SwitchableNorm,
    TransformerBlock,
    parameter,
)
from .tensor import Tensor, add, concat, relu

RATIOS = ("default", "more_skippable", "more_mandatory")
VIT_VARIANTS = ("default", "last_two_skippable")


@dataclass(frozen=True)
class SkipConfig:
    """Per-stage skip flags; ``True`` bypasses that stage's skippable blocks."""

    flags: tuple

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))

    @classmethod
    def parse(cls, text: str, n_stages: Optional[int] = None) -> "SkipConfig":
        text = text.strip().upper()
        if not text or set(text) - {"T", "F"}:
            raise ValueError(f"skip string {text!r} must consist of T/F characters")
        if n_stages is not None and len(text) != n_stages:
            raise ValueError(f"skip string {text!r} has length {len(text)}, network has {n_stages} stages")
        return cls(tuple(c == "T" for c in text))

    @classmethod
    def supernet(cls, n: int) -> "SkipConfig":
        return cls((False,) * n)

    @classmethod
    def basenet(cls, n: int) -> "SkipConfig":
        return cls((True,) * n)

    @property
    def num_skipped(self) -> int:
        return sum(self.flags)

    def __len__(self) -> int:
        return len(self.flags)

    def __iter__(self):
        return iter(self.flags)

    def __getitem__(self, i):
        return self.flags[i]

    def __str__(self) -> str:
        return "".join("T" if f else "F" for f in self.flags)


SkipLike = Union[SkipConfig, str, Sequence[bool], None]


def enumerate_subnets(n_r: int) -> list[SkipConfig]:
    """All 2**n_r configs grouped by number of skipped stages.

    Within a group, configs that skip earlier stages come first (TFFF before
    FTFF), which is the row order of the published sub-network table.
    """
    if n_r < 1:
        raise ValueError(f"need at least one stage, got {n_r}")
    configs = [SkipConfig(bits) for bits in itertools.product((False, True), repeat=n_r)]
    return sorted(configs, key=lambda c: (c.num_skipped, tuple(not f for f in c.flags)))


def split_stage(num_blocks: int, ratio: str = "default") -> tuple[int, int]:
    """(mandatory, skippable) block counts for a stage of ``num_blocks``."""
    if ratio == "default":
        mandatory = math.ceil(num_blocks / 2)
    elif ratio == "more_skippable":
        mandatory = max(1, num_blocks // 3)
    elif ratio == "more_mandatory":
        mandatory = num_blocks - num_blocks // 3
    else:
        raise ValueError(f"unknown ratio {ratio!r}; expected one of {RATIOS}")
    if mandatory < 1:
        raise ValueError(f"a stage of {num_blocks} blocks leaves no mandatory block")
    return mandatory, num_blocks - mandatory


class ResidualStage(Module):
    def __init__(self, mandatory: list, skippable: list):
        if not mandatory:
            raise ValueError("a residual stage needs at least one mandatory block")
        for block in skippable:
            if block.downsamples:
                raise ValueError("skippable blocks must preserve shape")
        self.mandatory = mandatory
        self.skippable = skippable

    def __call__(self, h: Tensor, skip: bool, training: bool = False, probe=None) -> Tensor:
        mode = 1 if skip else 0
        for i, block in enumerate(self.mandatory):
            h = block(h, mode, training, probe=_bind(probe, i, False))
        if not skip:
            for j, block in enumerate(self.skippable):
                h = block(h, 0, training, probe=_bind(probe, len(self.mandatory) + j, True))
        return h


def _bind(probe, index, skippable):
    if probe is None:
        return None
    return lambda h, fh: probe(index, skippable, h, fh)


class ConvStem(Module):
    def __init__(self, in_channels, width, rng):
        self.conv = Conv2d(in_channels, width, 3, 1, 1, rng=rng)
        self.norm = BatchNorm2d(width)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.norm(self.conv(x), 0, training))


class ConvHead(Module):
    def __init__(self, width, num_classes, rng):
        self.fc = Linear(width, num_classes, rng=rng)

    def __call__(self, h: Tensor, training: bool) -> Tensor:
        return self.fc(F.global_avgpool(relu(h)))


class PatchStem(Module):
    """Patch embedding (strided conv), class token and learned positions."""

    def __init__(self, in_channels, dim, patch, image_size, rng):
        self.patch = Conv2d(in_channels, dim, patch, patch, 0, bias=True, rng=rng)
        self.num_patches = (image_size // patch) ** 2
        self.cls_token = parameter(rng.normal(0.0, 0.02, (1, 1, dim)))
        self.pos_embed = parameter(rng.normal(0.0, 0.02, (1, self.num_patches + 1, dim)))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        p = self.patch(x)
        n, d = p.shape[0], p.shape[1]
        tokens = p.reshape(n, d, -1).transpose(0, 2, 1)
        cls = self.cls_token * Tensor(np.ones((n, 1, 1), dtype=self.cls_token.dtype))
        return add(concat([cls, tokens], axis=1), self.pos_embed)


class TokenHead(Module):
    def __init__(self, dim, num_classes, rng):
        self.norm = LayerNorm(dim)
        self.fc = Linear(dim, num_classes, rng=rng)

    def __call__(self, h: Tensor, training: bool) -> Tensor:
        return self.fc(self.norm(h)[:, 0])


class AdaptiveDepthNetwork(Module):
    """Stem, residual stages and a classifier head with a skip-controlled forward."""

    def __init__(self, stem, stages: list, head, input_shape: tuple, num_classes: int, config: dict):
        self.stem = stem
        self.stages = stages
        self.head = head
        self._input_shape = tuple(input_shape)
        self._num_classes = num_classes
        self._config = dict(config)

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def input_shape(self) -> tuple:
        return self._input_shape

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def config(self) -> dict:
        return dict(self._config)

    def coerce_skip(self, skip: SkipLike) -> SkipConfig:
        if skip is None:
            return SkipConfig.supernet(self.n_stages)
        if isinstance(skip, str):
            return SkipConfig.parse(skip, self.n_stages)
        if not isinstance(skip, SkipConfig):
            skip = SkipConfig(tuple(skip))
        if len(skip) != self.n_stages:
            raise ValueError(f"skip config {skip} has length {len(skip)}, network has {self.n_stages} stages")
        return skip

    def forward(self, x, skip: SkipLike = None, training: bool = False, probe=None):
        """Return ``(logits, stage_features)`` for the sub-network selected by ``skip``.

        ``probe(stage, block, is_skippable, h, fh)`` is called for every
        executed residual block with its input and residual-branch output.
        """
        skip = self.coerce_skip(skip)
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = self.stem(x, training)
        feats = []
        for s, stage in enumerate(self.stages):
            stage_probe = None if probe is None else (lambda i, sk, hh, fh, s=s: probe(s, i, sk, hh, fh))
            h = stage(h, skip[s], training, probe=stage_probe)
            feats.append(h)
        return self.head(h, training), feats

    __call__ = forward

    def blocks(self) -> Iterable[tuple[int, int, bool, Module]]:
        """(stage, block index within stage, is_skippable, block)."""
        for s, stage in enumerate(self.stages):
            for i, b in enumerate(stage.mandatory):
                yield s, i, False, b
            for j, b in enumerate(stage.skippable):
                yield s, len(stage.mandatory) + j, True, b

    # -- cost accounting ----------------------------------------------------
    def cost_table(self) -> dict:
        """Per-sample MACs: stem, head, and (mandatory, skippable) per stage."""
        kind = self._config.get("arch")
        c, h, w = self._input_shape
        if kind == "vit":
            stem = self.stem.patch.macs(h, w)
            tokens = self.stem.num_patches + 1
            stages = [
                (sum(b.macs(tokens) for b in st.mandatory), sum(b.macs(tokens) for b in st.skippable))
                for st in self.stages
            ]
            return {"stem": stem, "stages": stages, "head": self.head.fc.macs()}
        stem = self.stem.conv.macs(h, w)
        h, w = self.stem.conv.output_hw(h, w)
        stages = []
        for st in self.stages:
            mand = 0
            for b in st.mandatory:
                m, h, w = b.macs(h, w)
                mand += m
            skip_cost = 0
            for b in st.skippable:
                m, h, w = b.macs(h, w)
                skip_cost += m
            stages.append((mand, skip_cost))
        return {"stem": stem, "stages": stages, "head": self.head.fc.macs()}


def flops(net: AdaptiveDepthNetwork, skip: SkipLike = None) -> int:
    """Multiply-accumulate count for one sample through the selected sub-network."""
    skip = net.coerce_skip(skip)
    table = net.cost_table()
    total = table["stem"] + table["head"]
    for (mand, skippable), skipped in zip(table["stages"], skip):
        total += mand + (0 if skipped else skippable)
    return total


def _module_param_count(module: Module, mode: Optional[int]) -> int:
    """Parameter count; with a mode, switchable norms contribute one set."""
    total = 0
    for name, p in module.named_parameters():
        total += p.size
    if mode is None:
        return total
    for sub in _iter_modules(module):
        if isinstance(sub, SwitchableNorm):
            total -= sub.gamma[1 - mode].size + sub.beta[1 - mode].size
    return total


def _iter_modules(module):
    yield module
    for _, value in module._children():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, Module):
                yield from _iter_modules(item)


def param_count(net: AdaptiveDepthNetwork, skip: SkipLike = "whole") -> int:
    """Whole-model count (``skip="whole"``) or parameters executed by one config."""
    if isinstance(skip, str) and skip == "whole":
        return _module_param_count(net, None)
    skip = net.coerce_skip(skip)
    total = _module_param_count(net.stem, None) + _module_param_count(net.head, None)
    for stage, skipped in zip(net.stages, skip):
        mode = 1 if skipped else 0
        total += sum(_module_param_count(b, mode) for b in stage.mandatory)
        if not skipped:
            total += sum(_module_param_count(b, 0) for b in stage.skippable)
    return total


# -- builders ---------------------------------------------------------------
def build_resnet_tiny(
    num_classes: int = 10,
    stage_blocks: Sequence[int] = (3, 4, 6, 3),
    widths: Sequence[int] = (16, 32, 64, 128),
    mandatory_ratio: str = "default",
    in_channels: int = 3,
    image_size: int = 32,
    skip_aware: bool = True,
    seed: int = 0,
) -> AdaptiveDepthNetwork:
    """Basic-block ResNet with every stage split into two sub-paths.

    The first block of each stage after the first downsamples (stride 2) and
    therefore always sits in the mandatory sub-path.
    """
    if len(stage_blocks) != len(widths):
        raise ValueError("stage_blocks and widths must have the same length")
    rng = np.random.default_rng(seed)
    stem = ConvStem(in_channels, widths[0], rng)
    stages = []
    prev = widths[0]
    for s, (n_blocks, width) in enumerate(zip(stage_blocks, widths)):
        n_mand, n_skip = split_stage(n_blocks, mandatory_ratio)
        stride = 1 if s == 0 else 2
        mandatory = []
        for i in range(n_mand):
            mandatory.append(
                BasicBlock(prev, width, stride if i == 0 else 1, switchable=skip_aware, rng=rng)
            )
            prev = width
        skippable = [BasicBlock(width, width, 1, switchable=False, rng=rng) for _ in range(n_skip)]
        stages.append(ResidualStage(mandatory, skippable))
    head = ConvHead(prev, num_classes, rng)
    config = {
        "arch": "resnet",
        "num_classes": num_classes,
        "stage_blocks": list(stage_blocks),
        "widths": list(widths),
        "mandatory_ratio": mandatory_ratio,
        "in_channels": in_channels,
        "image_size": image_size,
        "skip_aware": skip_aware,
        "seed": seed,
    }
    return AdaptiveDepthNetwork(stem, stages, head, (in_channels, image_size, image_size), num_classes, config)


def build_vit_tiny(
    num_classes: int = 10,
    depth: int = 8,
    dim: int = 64,
    heads: int = 4,
    patch: int = 7,
    groups: int = 4,
    image_size: int = 28,
    in_channels: int = 1,
    variant: str = "default",
    mlp_ratio: int = 2,
    skip_aware: bool = True,
    seed: int = 0,
) -> AdaptiveDepthNetwork:
    """ViT whose encoder blocks are grouped into stages; the tail of each group is skippable."""
    if depth % groups:
        raise ValueError(f"depth {depth} is not divisible into {groups} groups")
    if variant not in VIT_VARIANTS:
        raise ValueError(f"unknown ViT variant {variant!r}; expected one of {VIT_VARIANTS}")
    per_group = depth // groups
    n_skip = 1 if variant == "default" else 2
    n_mand = per_group - n_skip
    if n_mand < 1:
        raise ValueError(f"groups of {per_group} blocks leave no mandatory block with variant {variant!r}")
    if image_size % patch:
        raise ValueError(f"image size {image_size} is not divisible by patch {patch}")
    rng = np.random.default_rng(seed)
    stem = PatchStem(in_channels, dim, patch, image_size, rng)
    stages = []
    for _ in range(groups):
        mandatory = [TransformerBlock(dim, heads, mlp_ratio, switchable=skip_aware, rng=rng) for _ in range(n_mand)]
        skippable = [TransformerBlock(dim, heads, mlp_ratio, switchable=False, rng=rng) for _ in range(n_skip)]
        stages.append(ResidualStage(mandatory, skippable))
    head = TokenHead(dim, num_classes, rng)
    config = {
        "arch": "vit",
        "num_classes": num_classes,
        "depth": depth,
        "dim": dim,
        "heads": heads,
        "patch": patch,
        "groups": groups,
        "image_size": image_size,
        "in_channels": in_channels,
        "variant": variant,
        "mlp_ratio": mlp_ratio,
        "skip_aware": skip_aware,
        "seed": seed,
    }
    return AdaptiveDepthNetwork(stem, stages, head, (in_channels, image_size, image_size), num_classes, config)


def build_from_config(config: dict) -> AdaptiveDepthNetwork:
    """Rebuild a network from the dict stored in ``net.config``."""
    config = dict(config)
    arch = config.pop("arch")
    if arch == "resnet":
        return build_resnet_tiny(**config)
    if arch == "vit":
        return build_vit_tiny(**config)
    raise ValueError(f"unknown architecture {arch!r}")


def stage_layout(net: AdaptiveDepthNetwork) -> list[tuple[int, int]]:
    return [(len(st.mandatory), len(st.skippable)) for st in net.stages]
