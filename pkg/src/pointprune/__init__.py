"""Structured channel pruning for point-based set-abstraction classifiers."""

from .pointcloud import (
    PointCloud,
    SampleResult,
    Grouping,
    SHAPE_CLASSES,
    generate_dataset,
    farthest_point_sample,
    ball_query_group,
    save_dataset,
    load_dataset,
)
from .network import (
    BlockSpec,
    HeadSpec,
    NetworkSpec,
    NetworkState,
    LayerTrace,
    FlopsReport,
    init_network,
    forward,
    train,
    evaluate,
    save_checkpoint,
    load_checkpoint,
    count_flops,
)

__all__ = [
    "PointCloud", "SampleResult", "Grouping", "SHAPE_CLASSES",
    "generate_dataset", "farthest_point_sample", "ball_query_group",
    "save_dataset", "load_dataset",
    "BlockSpec", "HeadSpec", "NetworkSpec", "NetworkState", "LayerTrace",
    "FlopsReport", "init_network", "forward", "train", "evaluate",
    "save_checkpoint", "load_checkpoint", "count_flops",
]
