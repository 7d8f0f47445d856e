"""Boundary predict network: maps one pooled boundary-area feature to a
per-category side displacement.

Four mirrored heads (left/right/up/bottom) share an architecture but not
weights. Each head runs two 3x3 convs, builds a spatial attention map with
a grouped 3x3 conv + 1x1 conv + softmax along the boundary-parallel axis,
collapses that axis by an attention-weighted sum, then finishes with two
1x3 convs over the remaining axis and a fully-connected output layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = [
    "SIDES",
    "BpnConfig",
    "SideHeadParams",
    "BpnParams",
    "init_side_head",
    "init_bpn_params",
    "orient_feature",
    "bpn_attention",
    "bpn_forward",
]

SIDES = ("left", "right", "up", "bottom")


@dataclass(frozen=True)
class BpnConfig:
    channels: int = 32
    pooled_size: int = 7
    num_categories: int = 5
    attention_groups: int = 4

    def __post_init__(self):
        if self.pooled_size < 3:
            raise ValueError(f"pooled size must be >= 3, got {self.pooled_size}")
        if self.channels % self.attention_groups:
            raise ValueError(
                f"channels ({self.channels}) must divide evenly into "
                f"attention groups ({self.attention_groups})"
            )
        if self.num_categories < 1:
            raise ValueError(f"need at least one category, got {self.num_categories}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Centered uniform with 1/sqrt(fan_in) bounds."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


@dataclass
class SideHeadParams:
    """Parameters of one boundary head, in forward order."""

    conv1_w: Parameter
    conv1_b: Parameter
    conv2_w: Parameter
    conv2_b: Parameter
    attn_group_w: Parameter
    attn_group_b: Parameter
    attn_point_w: Parameter
    attn_point_b: Parameter
    col1_w: Parameter
    col1_b: Parameter
    col2_w: Parameter
    col2_b: Parameter
    fc_w: Parameter
    fc_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [getattr(self, f.name) for f in self.__dataclass_fields__.values()]  # type: ignore[attr-defined]


@dataclass
class BpnParams:
    """The four mirrored side heads."""

    sides: dict[str, SideHeadParams] = field(default_factory=dict)

    def parameters(self) -> list[Parameter]:
        out = []
        for side in SIDES:
            out.extend(self.sides[side].parameters())
        return out


def init_side_head(
    config: BpnConfig,
    rng: np.random.Generator,
    prefix: str,
    dtype=np.float32,
) -> SideHeadParams:
    """Random head with a zero-initialized output layer, so a fresh head
    predicts zero displacement for every category."""
    d, k, g = config.channels, config.pooled_size, config.attention_groups

    def p(name, arr):
        return Parameter(arr, name=f"{prefix}.{name}")

    return SideHeadParams(
        conv1_w=p("conv1.w", uniform_init(rng, (d, d, 3, 3), d * 9, dtype)),
        conv1_b=p("conv1.b", np.zeros(d, dtype=dtype)),
        conv2_w=p("conv2.w", uniform_init(rng, (d, d, 3, 3), d * 9, dtype)),
        conv2_b=p("conv2.b", np.zeros(d, dtype=dtype)),
        attn_group_w=p("attn_group.w", uniform_init(rng, (g, d // g, 3, 3), (d // g) * 9, dtype)),
        attn_group_b=p("attn_group.b", np.zeros(g, dtype=dtype)),
        attn_point_w=p("attn_point.w", uniform_init(rng, (1, g, 1, 1), g, dtype)),
        attn_point_b=p("attn_point.b", np.zeros(1, dtype=dtype)),
        col1_w=p("col1.w", uniform_init(rng, (d, d, 3), d * 3, dtype)),
        col1_b=p("col1.b", np.zeros(d, dtype=dtype)),
        col2_w=p("col2.w", uniform_init(rng, (d, d, 3), d * 3, dtype)),
        col2_b=p("col2.b", np.zeros(d, dtype=dtype)),
        fc_w=p("fc.w", np.zeros((d * k, config.num_categories), dtype=dtype)),
        fc_b=p("fc.b", np.zeros(config.num_categories, dtype=dtype)),
    )


def init_bpn_params(
    config: BpnConfig,
    rng: np.random.Generator,
    prefix: str = "bpn",
    dtype=np.float32,
) -> BpnParams:
    return BpnParams(
        sides={side: init_side_head(config, rng, f"{prefix}.{side}", dtype) for side in SIDES}
    )


def orient_feature(feature: Tensor, side: str) -> Tensor:
    """Rotate a pooled feature so the boundary-parallel direction lands on
    the axis the head sums over.

    Left/right areas have a vertical boundary, already parallel to the row
    axis; up/bottom features get their two spatial axes swapped. The
    operation is its own inverse.
    """
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    if side in ("left", "right"):
        return feature
    if feature.data.ndim == 3:
        return T.transpose(feature, (0, 2, 1))
    if feature.data.ndim == 4:
        return T.transpose(feature, (0, 1, 3, 2))
    raise ValueError(f"expected a 3-d or 4-d pooled feature, got shape {feature.shape}")


def _trunk(feature: Tensor, head: SideHeadParams, config: BpnConfig) -> Tensor:
    x = T.relu(T.conv2d(feature, head.conv1_w, head.conv1_b, pad=1))
    return T.relu(T.conv2d(x, head.conv2_w, head.conv2_b, pad=1))


def _attention(trunk: Tensor, head: SideHeadParams, config: BpnConfig) -> Tensor:
    a = T.conv2d(trunk, head.attn_group_w, head.attn_group_b, pad=1, groups=config.attention_groups)
    a = T.conv2d(a, head.attn_point_w, head.attn_point_b)
    return T.softmax(a, axis=2)


def bpn_attention(feature: Tensor, head: SideHeadParams, config: BpnConfig) -> Tensor:
    """The (N,1,k,k) attention map; every boundary-parallel column sums to 1."""
    return _attention(_trunk(feature, head, config), head, config)


def bpn_forward(
    feature: Tensor,
    side: str,
    params: BpnParams,
    config: BpnConfig,
) -> Tensor:
    """Predict per-category side displacements from an oriented pooled
    feature of shape (N, d, k, k). Returns (N, num_categories)."""
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    d, k = config.channels, config.pooled_size
    if feature.data.ndim != 4 or feature.shape[1:] != (d, k, k):
        raise T.ShapeError(
            f"expected pooled feature (N, {d}, {k}, {k}), got {feature.shape}"
        )
    head = params.sides[side]
    x = _trunk(feature, head, config)
    attn = _attention(x, head, config)
    weighted = T.mul(x, attn)
    columns = T.tsum(weighted, axis=2)  # collapse boundary-parallel axis -> (N, d, k)
    v = T.relu(T.conv1d(columns, head.col1_w, head.col1_b, pad=1))
    v = T.relu(T.conv1d(v, head.col2_w, head.col2_b, pad=1))
    flat = T.reshape(v, (v.shape[0], d * k))
    return T.linear(flat, head.fc_w, head.fc_b)
