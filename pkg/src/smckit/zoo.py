"""The toy backbone and task heads used by the experiments."""

from __future__ import annotations

from smckit.datagen import SIZE
from smckit.layers import Conv2d, Dense, Flatten, Layer, MaxPool2x2, ReLU
from smckit.linalg import RngStream
from smckit.model import ModelGraph

INPUT_SHAPE = (1, SIZE, SIZE)
FEATURE_WIDTH = 32
HEAD = "head"

# split after any of these; block5 is the last feature layer and always stays special
SPLIT_CANDIDATES = ("block1", "block2", "block3", "block4")
ALL_BLOCKS = SPLIT_CANDIDATES + ("block5",)


def toy_classifier(num_classes: int, seed: int) -> ModelGraph:
    """Two conv stages and two dense layers ahead of a linear head.

    12x12x1 -> conv 8 -> conv 16, pool -> conv 16, pool -> 144 -> 64 -> 32 -> head.
    """
    layers: list[Layer] = [
        Conv2d("conv1", 1, 8),
        ReLU("relu1"),
        Conv2d("conv2", 8, 16),
        ReLU("relu2"),
        MaxPool2x2("pool1"),
        Conv2d("conv3", 16, 16),
        ReLU("relu3"),
        MaxPool2x2("pool2"),
        Flatten("flatten"),
        Dense("fc1", 144, 64),
        ReLU("relu4"),
        Dense("fc2", 64, FEATURE_WIDTH),
        ReLU("relu5"),
        Dense(HEAD, FEATURE_WIDTH, num_classes),
    ]
    blocks = [
        ("block1", ["conv1", "relu1"]),
        ("block2", ["conv2", "relu2", "pool1"]),
        ("block3", ["conv3", "relu3", "pool2", "flatten"]),
        ("block4", ["fc1", "relu4"]),
        ("block5", ["fc2", "relu5"]),
    ]
    return ModelGraph.build(layers, INPUT_SHAPE, RngStream(seed).child("init"), blocks=blocks)


def head_layers(task: str, in_features: int, num_classes: int = 0, hidden: int = 64, prefix: str = "head_new") -> list[Layer]:
    """Layer list for a new task head reading ``in_features`` concatenated features."""
    if task == "classification":
        return [Dense(prefix, in_features, num_classes)]
    out = {"segmentation": SIZE * SIZE, "detection": 4}.get(task)
    if out is None:
        raise ValueError(f"unknown task {task!r}")
    return [Dense(f"{prefix}.0", in_features, hidden), ReLU(f"{prefix}.1"), Dense(f"{prefix}.2", hidden, out)]
