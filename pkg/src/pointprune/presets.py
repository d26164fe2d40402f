"""Canonical network/dataset/training configurations.

``default`` is the full-size desk configuration (512-point clouds, block
widths 32/64/128); ``study`` is the lighter configuration the experiment
drivers use so that multi-seed pruning studies finish in minutes on a CPU.
Dataset splits derive their generator seeds from one user seed through the
SplitMix64 stream: output 0 seeds the train split, 1 the test split, 2 the
held-out scoring split.
"""

from __future__ import annotations

from dataclasses import dataclass

from .network import BlockSpec, HeadSpec, NetworkSpec
from .pointcloud import splitmix64

NUM_CLASSES = 8


@dataclass
class Recipe:
    points_per_cloud: int
    train_samples: int
    test_samples: int
    score_samples: int
    epochs: int
    batch_size: int
    learning_rate: float
    finetune_epochs: int


def default_network_spec() -> NetworkSpec:
    return NetworkSpec(
        blocks=[
            BlockSpec(centroids=128, radius=0.3, group_size=16, mlp_widths=[32, 32]),
            BlockSpec(centroids=32, radius=0.6, group_size=16, mlp_widths=[64, 64]),
            BlockSpec(centroids=8, radius=1.4, group_size=8, mlp_widths=[128, 128]),
        ],
        head=HeadSpec(hidden=64, classes=NUM_CLASSES),
    )


def study_network_spec() -> NetworkSpec:
    return NetworkSpec(
        blocks=[
            BlockSpec(centroids=48, radius=0.4, group_size=12, mlp_widths=[32, 32]),
            BlockSpec(centroids=16, radius=0.8, group_size=12, mlp_widths=[40, 40]),
            BlockSpec(centroids=8, radius=1.6, group_size=8, mlp_widths=[56, 56]),
        ],
        head=HeadSpec(hidden=32, classes=NUM_CLASSES),
    )


DEFAULT_RECIPE = Recipe(
    points_per_cloud=512,
    train_samples=800,
    test_samples=256,
    score_samples=256,
    epochs=60,
    batch_size=32,
    learning_rate=1e-2,
    finetune_epochs=20,
)

STUDY_RECIPE = Recipe(
    points_per_cloud=192,
    train_samples=480,
    test_samples=240,
    score_samples=256,
    epochs=60,
    batch_size=32,
    learning_rate=1e-2,
    finetune_epochs=15,
)

PRESETS = {"default": (default_network_spec, DEFAULT_RECIPE),
           "study": (study_network_spec, STUDY_RECIPE)}


def split_seeds(seed: int) -> dict[str, int]:
    train_seed, test_seed, score_seed = splitmix64(seed, 3)
    return {"train": train_seed, "test": test_seed, "score": score_seed}
