"""Dataset/model factories and the ablation and comparison experiments built on them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import (
    LabeledImageSet,
    channel_stats,
    load_cifar10_dir,
    load_mnist_dir,
    split_dataset,
    synthetic_shapes,
)
from .evaluation import evaluate
from .network import AdaptiveDepthNetwork, SkipConfig, build_resnet_tiny, build_vit_tiny, enumerate_subnets
from .training import TrainRecipe, train

logger = logging.getLogger(__name__)

MODELS = ("resnet_tiny", "vit_tiny")
DATASETS = ("mnist", "cifar10", "synthetic")


@dataclass
class DataSpec:
    name: str = "synthetic"
    data_dir: Optional[str] = None
    synthetic_n: int = 1000
    synthetic_classes: int = 10
    image_size: Optional[int] = None
    channels: Optional[int] = None
    noise: float = 0.25
    seed: int = 0


@dataclass
class DataBundle:
    train: LabeledImageSet
    val: LabeledImageSet
    stats: tuple
    num_classes: int
    channels: int
    image_size: int


def load_data(spec: DataSpec, model: str = "resnet_tiny") -> DataBundle:
    """Native train/test splits for MNIST and CIFAR-10; seeded 80/20 split for synthetic."""
    if spec.name == "mnist":
        if not spec.data_dir:
            raise FileNotFoundError("--data-dir is required for mnist")
        train_set, val_set = load_mnist_dir(spec.data_dir)
    elif spec.name == "cifar10":
        if not spec.data_dir:
            raise FileNotFoundError("--data-dir is required for cifar10")
        train_set, val_set = load_cifar10_dir(spec.data_dir)
    elif spec.name == "synthetic":
        size = spec.image_size or (28 if model == "vit_tiny" else 32)
        channels = spec.channels or (1 if model == "vit_tiny" else 3)
        full = synthetic_shapes(spec.synthetic_n, spec.synthetic_classes, size, spec.seed, channels, spec.noise)
        train_set, val_set = split_dataset(full, 0.2, spec.seed)
    else:
        raise ValueError(f"unknown dataset {spec.name!r}; expected one of {DATASETS}")
    _, c, h, _ = train_set.images.shape
    return DataBundle(train_set, val_set, channel_stats(train_set), train_set.num_classes, c, h)


@dataclass
class ModelSpec:
    model: str = "resnet_tiny"
    ratio: str = "default"
    stage_blocks: Sequence[int] = (3, 4, 6, 3)
    widths: Sequence[int] = (16, 32, 64, 128)
    depth: int = 8
    dim: int = 64
    heads: int = 4
    groups: int = 4
    skip_aware: bool = True


def build_model(spec: ModelSpec, data: DataBundle, seed: int = 0) -> AdaptiveDepthNetwork:
    if spec.model == "resnet_tiny":
        return build_resnet_tiny(
            data.num_classes,
            tuple(spec.stage_blocks),
            tuple(spec.widths),
            spec.ratio,
            in_channels=data.channels,
            image_size=data.image_size,
            skip_aware=spec.skip_aware,
            seed=seed,
        )
    if spec.model == "vit_tiny":
        patch = 7 if data.image_size % 7 == 0 else data.image_size // 4
        variant = "last_two_skippable" if spec.ratio == "more_skippable" else "default"
        return build_vit_tiny(
            data.num_classes,
            spec.depth,
            spec.dim,
            spec.heads,
            patch,
            spec.groups,
            image_size=data.image_size,
            in_channels=data.channels,
            variant=variant,
            skip_aware=spec.skip_aware,
            seed=seed,
        )
    raise ValueError(f"unknown model {spec.model!r}; expected one of {MODELS}")


def train_model(model: ModelSpec, data: DataBundle, recipe: TrainRecipe, **kwargs):
    net = build_model(model, data, recipe.seed)
    result = train(net, data.train, recipe, data.val, data.stats, **kwargs)
    return net, result


def train_vanilla_twin(model: ModelSpec, data: DataBundle, recipe: TrainRecipe):
    """Same architecture with single-set norms, trained on the super-net only."""
    return train_model(replace(model, skip_aware=False), data, replace(recipe, distill_strategy="vanilla"))


def prefix_configs(n: int) -> list[SkipConfig]:
    """FFFF, TFFF, TTFF, ... TTTT: the column set of the strategy comparison table."""
    return [SkipConfig((True,) * k + (False,) * (n - k)) for k in range(n + 1)]


# -- ablation grids -----------------------------------------------------------
def table3_grid(model: ModelSpec, data: DataBundle, recipe: TrainRecipe) -> list[dict]:
    """{self-distillation on/off} x {skip-aware norms on/off}."""
    rows = []
    for distill in (False, True):
        for aware in (False, True):
            r = replace(recipe, distill_strategy="ours" if distill else "none")
            net, _ = train_model(replace(model, skip_aware=aware), data, r)
            n = net.n_stages
            rows.append(
                {
                    "grid": "table3",
                    "self_distillation": int(distill),
                    "skip_aware_norms": int(aware),
                    "seed": recipe.seed,
                    "acc_" + str(SkipConfig.supernet(n)): evaluate(net, SkipConfig.supernet(n), data.val, data.stats),
                    "acc_" + str(SkipConfig.basenet(n)): evaluate(net, SkipConfig.basenet(n), data.val, data.stats),
                }
            )
    return rows


TABLE4_ROWS = (
    ("ours", "FFFF/TTTT"),
    ("student_random", "FFFF/Random"),
    ("teacher_random", "Random/TTTT"),
    ("both_random", "Random/Random"),
)


def _label(text: str, n: int) -> str:
    return text.replace("FFFF", "F" * n).replace("TTTT", "T" * n)


def table4_grid(model: ModelSpec, data: DataBundle, recipe: TrainRecipe, seeds: Sequence[int]) -> list[dict]:
    """Teacher/student sampling strategies, one row per (strategy, seed)."""
    rows = []
    for strategy, label in TABLE4_ROWS:
        for seed in seeds:
            net, _ = train_model(model, data, replace(recipe, distill_strategy=strategy, seed=seed))
            teacher, student = _label(label, net.n_stages).split("/")
            row = {"grid": "table4", "strategy": strategy, "teacher": teacher, "student": student, "seed": seed}
            for cfg in prefix_configs(net.n_stages):
                row["acc_" + str(cfg)] = evaluate(net, cfg, data.val, data.stats)
            rows.append(row)
    return rows


def strategy_means(rows: Sequence[dict]) -> dict:
    """Mean accuracy per strategy and column over seeds."""
    out: dict = {}
    for row in rows:
        bucket = out.setdefault(row["strategy"], {})
        for key, value in row.items():
            if key.startswith("acc_"):
                bucket.setdefault(key, []).append(value)
    return {s: {k: float(np.mean(v)) for k, v in cols.items()} for s, cols in out.items()}


def skipping_contrast(adn: AdaptiveDepthNetwork, vanilla: AdaptiveDepthNetwork, data: DataBundle) -> list[dict]:
    """Accuracy lost when dropping skippable blocks, ADN versus the vanilla twin, per config."""
    n = adn.n_stages
    adn_full = evaluate(adn, SkipConfig.supernet(n), data.val, data.stats)
    van_full = evaluate(vanilla, SkipConfig.supernet(n), data.val, data.stats)
    rows = []
    for cfg in enumerate_subnets(n):
        a = evaluate(adn, cfg, data.val, data.stats)
        v = evaluate(vanilla, cfg, data.val, data.stats)
        rows.append({"skip": str(cfg), "adn_drop": adn_full - a, "vanilla_drop": van_full - v, "adn": a, "vanilla": v})
    return rows
