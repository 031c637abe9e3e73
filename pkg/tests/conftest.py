import numpy as np
import pytest

from adaptive_depth.data import channel_stats, split_dataset, synthetic_shapes
from adaptive_depth.network import build_resnet_tiny, build_vit_tiny


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_resnet():
    """Factory for a cheap 4-stage network on 16x16 inputs."""

    def make(num_classes=4, skip_aware=True, seed=0, ratio="default", stage_blocks=(2, 2, 2, 2)):
        return build_resnet_tiny(
            num_classes,
            stage_blocks=stage_blocks,
            widths=(8, 8, 16, 16),
            mandatory_ratio=ratio,
            image_size=16,
            skip_aware=skip_aware,
            seed=seed,
        )

    return make


@pytest.fixture
def small_vit():
    def make(num_classes=4, seed=0, variant="default"):
        return build_vit_tiny(num_classes, depth=8, dim=16, heads=2, patch=4, groups=4, image_size=16,
                              in_channels=3, variant=variant, seed=seed)

    return make


@pytest.fixture(scope="session")
def shapes16():
    """Easy 4-class synthetic set at 16x16, split 80/20, with normalization stats."""
    full = synthetic_shapes(200, num_classes=4, size=16, seed=3, noise=0.1)
    train, val = split_dataset(full, 0.2, seed=3)
    return train, val, channel_stats(train)
