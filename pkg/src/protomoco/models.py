"""Small encoders and the two-layer projection head.

Parameters live in a flat :class:`ParameterSet` with ``encoder.*`` and
``head.*`` names; forward passes are plain functions of those weights, so
the query and key networks share one implementation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from protomoco.autodiff import (
    DimensionError,
    ParameterSet,
    Tensor,
    avgpool2d,
    conv2d,
    he_init,
    matmul,
    mul,
    relu,
    reshape,
    sub,
)


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of the feature extractor and its projection head.

    ``kind="conv"`` stacks valid convolutions, each followed by ReLU and
    average pooling, then a dense layer to ``dim_h``; with ``global_pool``
    the last pooling averages the whole feature map. ``kind="mlp"``
    flattens the image and applies dense -> ReLU -> dense.
    ``input_norm="center"`` maps pixels from [0, 1] to [-2, 2] first.
    """

    kind: str = "conv"
    channels: int = 1
    image_size: int = 32
    filters: tuple[int, ...] = (16, 32)
    kernels: tuple[int, ...] = (3, 4)
    pool: int = 2
    global_pool: bool = True
    input_norm: str = "center"
    mlp_hidden: int = 128
    dim_h: int = 64
    head_hidden: int = 128
    dim_z: int = 32

    def __post_init__(self) -> None:
        if self.kind not in ("conv", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if len(self.filters) != len(self.kernels):
            raise ValueError("filters and kernels must have the same length")
        if self.input_norm not in ("none", "center"):
            raise ValueError(f"unknown input_norm {self.input_norm!r}")
        self.feature_shape()

    def feature_shape(self) -> tuple[int, int, int]:
        """Shape of the last pooled feature map (conv) or the flat input (mlp)."""
        c, size = self.channels, self.image_size
        if self.kind == "mlp":
            return (c, size, size)
        for f, k, window in zip(self.filters, self.kernels, self.pool_windows()):
            if k > size:
                raise DimensionError(f"kernel {k} larger than feature map {size}")
            size = size - k + 1
            window = size if window is None else window
            if size % window:
                raise DimensionError(
                    f"feature map {size}×{size} is not divisible by pool window {window}; "
                    f"adjust encoder.kernels or data.image_size")
            size //= window
            c = f
        return (c, size, size)

    def pool_windows(self) -> list[int | None]:
        """Pool window per conv layer; ``None`` means the whole feature map."""
        windows: list[int | None] = [self.pool] * len(self.filters)
        if self.global_pool and windows:
            windows[-1] = None
        return windows

    def param_shapes(self) -> dict[str, tuple[tuple[int, ...], int]]:
        """Name -> (shape, fan_in) for every parameter, in canonical order."""
        shapes: dict[str, tuple[tuple[int, ...], int]] = {}
        if self.kind == "conv":
            c = self.channels
            for i, (f, k) in enumerate(zip(self.filters, self.kernels), start=1):
                shapes[f"encoder.conv{i}"] = ((f, c, k, k), c * k * k)
                c = f
            flat = int(np.prod(self.feature_shape()))
            shapes["encoder.dense"] = ((flat, self.dim_h), flat)
        else:
            flat = int(np.prod(self.feature_shape()))
            shapes["encoder.fc1"] = ((flat, self.mlp_hidden), flat)
            shapes["encoder.fc2"] = ((self.mlp_hidden, self.dim_h), self.mlp_hidden)
        shapes["head.W1"] = ((self.dim_h, self.head_hidden), self.dim_h)
        shapes["head.W2"] = ((self.head_hidden, self.dim_z), self.head_hidden)
        return shapes


def init_params(cfg: EncoderConfig, seed: int) -> ParameterSet:
    """He-initialized encoder and head weights."""
    weights = {}
    for index, (name, (shape, fan_in)) in enumerate(cfg.param_shapes().items()):
        weights[name] = he_init(shape, fan_in, (seed, index))
    return ParameterSet(weights)


def check_compatible(cfg: EncoderConfig, arrays: Mapping[str, np.ndarray], prefix: str = "encoder.") -> None:
    """Raise DimensionError unless ``arrays`` fit the configured architecture."""
    for name, (shape, _) in cfg.param_shapes().items():
        if not name.startswith(prefix):
            continue
        if name not in arrays:
            raise DimensionError(f"checkpoint lacks parameter {name!r} (expected shape {shape})")
        if tuple(arrays[name].shape) != shape:
            raise DimensionError(
                f"checkpoint parameter {name!r} has shape {tuple(arrays[name].shape)}, "
                f"configured encoder expects {shape}")


def embed(weights: Mapping[str, Tensor], x: Tensor, cfg: EncoderConfig) -> Tensor:
    """Encoder output h for a batch ``x`` of shape N×C×H×W."""
    n = x.shape[0]
    if cfg.input_norm == "center":
        x = mul(sub(x, 0.5), 4.0)
    if cfg.kind == "mlp":
        flat = reshape(x, (n, -1))
        return matmul(relu(matmul(flat, weights["encoder.fc1"])), weights["encoder.fc2"])
    feat = x
    for i, window in enumerate(cfg.pool_windows(), start=1):
        feat = relu(conv2d(feat, weights[f"encoder.conv{i}"]))
        feat = avgpool2d(feat, feat.shape[-1] if window is None else window)
    return matmul(reshape(feat, (n, -1)), weights["encoder.dense"])


@dataclass
class ProjectionHead:
    """z = W2ᵀ·relu(W1ᵀ·h), written for row vectors as relu(h @ W1) @ W2; no biases."""

    W1: Tensor
    W2: Tensor

    def __post_init__(self) -> None:
        if self.W1.ndim != 2 or self.W2.ndim != 2 or self.W1.shape[1] != self.W2.shape[0]:
            raise DimensionError(f"head shapes {self.W1.shape} and {self.W2.shape} do not chain")

    @classmethod
    def from_weights(cls, weights: Mapping[str, Tensor]) -> "ProjectionHead":
        return cls(weights["head.W1"], weights["head.W2"])


def project(h: Tensor, head: ProjectionHead) -> Tensor:
    """Apply the projection head to one vector (dim_h) or a batch (N×dim_h)."""
    single = h.ndim == 1
    rows = reshape(h, (1, -1)) if single else h
    if rows.shape[1] != head.W1.shape[0]:
        raise DimensionError(f"input dim {rows.shape[1]} does not match head W1 {head.W1.shape}")
    z = matmul(relu(matmul(rows, head.W1)), head.W2)
    return reshape(z, (-1,)) if single else z


def forward(weights: Mapping[str, Tensor], x: Tensor, cfg: EncoderConfig) -> Tensor:
    """Encoder followed by the projection head."""
    return project(embed(weights, x, cfg), ProjectionHead.from_weights(weights))
