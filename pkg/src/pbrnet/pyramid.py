"""Feature pyramid representation, scale-based level assignment, the
one-level-down demotion rule used between refinement stages, and RoI Align.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxgeom import Box, DegenerateBoxError
from .tensor import Tensor, _accum, _result

__all__ = [
    "K_MIN",
    "K_MAX",
    "LevelAssignment",
    "DESK_SCALE_ASSIGNMENT",
    "PAPER_SCALE_ASSIGNMENT",
    "FeaturePyramid",
    "assign_level",
    "refine_level",
    "roi_align",
    "roi_align_batch",
]

K_MIN = 2
K_MAX = 5


@dataclass(frozen=True)
class LevelAssignment:
    """Canonical-scale rule mapping a box to its pyramid level."""

    k0: int = 2
    s0: float = 32.0

    def __post_init__(self):
        if not K_MIN <= self.k0 <= K_MAX:
            raise ValueError(f"canonical level must lie in [{K_MIN}, {K_MAX}], got {self.k0}")
        if not self.s0 > 0:
            raise ValueError(f"canonical scale must be > 0, got {self.s0}")


DESK_SCALE_ASSIGNMENT = LevelAssignment(k0=2, s0=32.0)
PAPER_SCALE_ASSIGNMENT = LevelAssignment(k0=4, s0=224.0)


def assign_level(box: Box, assignment: LevelAssignment = DESK_SCALE_ASSIGNMENT) -> int:
    """Pyramid level for a box: floor(k0 + log2(scale/s0)), clamped to [2, 5]."""
    k = math.floor(assignment.k0 + math.log2(box.scale / assignment.s0))
    return min(max(k, K_MIN), K_MAX)


def refine_level(k: int) -> int:
    """One level finer for the next refinement stage; the finest level stays."""
    if not K_MIN <= k <= K_MAX:
        raise ValueError(f"pyramid level must lie in [{K_MIN}, {K_MAX}], got {k}")
    return max(k - 1, K_MIN)


@dataclass
class FeaturePyramid:
    """Per-level feature maps, level k holding a (N, d, H_k, W_k) tensor of
    stride 2^k. All levels share the channel and batch dimensions."""

    levels: dict[int, Tensor]
    img_w: int
    img_h: int

    def __post_init__(self):
        if sorted(self.levels) != list(range(K_MIN, K_MAX + 1)):
            raise ValueError(f"pyramid must hold levels {K_MIN}..{K_MAX}, got {sorted(self.levels)}")
        channels = {t.shape[1] for t in self.levels.values()}
        if len(channels) != 1:
            raise ValueError(f"pyramid levels disagree on channel count: {channels}")
        for k, t in self.levels.items():
            expect = (math.ceil(self.img_h / 2 ** k), math.ceil(self.img_w / 2 ** k))
            if t.shape[2:] != expect:
                raise ValueError(f"level {k} has spatial shape {t.shape[2:]}, expected {expect}")

    @property
    def channels(self) -> int:
        return next(iter(self.levels.values())).shape[1]

    @staticmethod
    def stride(k: int) -> int:
        return 2 ** k


def _sample_geometry(rois: np.ndarray, stride: float, out_size: int, sampling: int,
                     height: int, width: int, num_images: int):
    """Bilinear gather indices and weights for a batch of rois.

    rois is (M, 5) float64: (image index, x1, y1, x2, y2) in image pixels.
    Returns flat gather indices (M, S, 4) into an (N*H*W,) map and matching
    weights, where S = out_size^2 * sampling^2 samples per roi. Samples
    falling outside the map get weight zero.
    """
    m = rois.shape[0]
    k, s = out_size, sampling
    img = rois[:, 0].astype(np.int64)
    if (img < 0).any() or (img >= num_images).any():
        raise ValueError("roi image index out of range")
    fx1 = rois[:, 1] / stride
    fy1 = rois[:, 2] / stride
    bw = (rois[:, 3] / stride - fx1) / k
    bh = (rois[:, 4] / stride - fy1) / k
    if (bw <= 0).any() or (bh <= 0).any():
        raise DegenerateBoxError("roi with non-positive extent")

    frac = (np.arange(s) + 0.5) / s
    pos = (np.arange(k)[:, None] + frac[None, :]).reshape(-1)  # (k*s,) bin-relative offsets
    sx = fx1[:, None] + pos[None, :] * bw[:, None]  # (M, k*s)
    sy = fy1[:, None] + pos[None, :] * bh[:, None]

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    lx = sx - x0
    ly = sy - y0

    def axis_terms(i0, frac_, limit):
        valid0 = (i0 >= 0) & (i0 < limit)
        valid1 = (i0 + 1 >= 0) & (i0 + 1 < limit)
        w0 = np.where(valid0, 1.0 - frac_, 0.0)
        w1 = np.where(valid1, frac_, 0.0)
        return (np.clip(i0, 0, limit - 1), w0), (np.clip(i0 + 1, 0, limit - 1), w1)

    xt = axis_terms(x0, lx, width)   # ((M,k*s) idx, weight) x 2
    yt = axis_terms(y0, ly, height)

    # combine y-samples (rows) and x-samples (cols) into per-sample neighbors
    idx = np.empty((m, k * s, k * s, 4), dtype=np.int64)
    wts = np.empty((m, k * s, k * s, 4), dtype=np.float64)
    base = img[:, None, None] * (height * width)
    for n, (yi, xi) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        iy, wy = yt[yi]
        ix, wx = xt[xi]
        idx[..., n] = base + iy[:, :, None] * width + ix[:, None, :]
        wts[..., n] = wy[:, :, None] * wx[:, None, :]
    return idx.reshape(m, -1, 4), wts.reshape(m, -1, 4)


def roi_align_batch(
    feature: Tensor,
    rois: np.ndarray,
    stride: float,
    out_size: int = 7,
    sampling: int = 2,
) -> Tensor:
    """RoI Align over an (N, C, H, W) feature tensor.

    Boxes map to feature coordinates by plain division by the stride; each
    of out_size^2 bins averages sampling^2 bilinear samples taken at the
    regular interior offsets of the bin. Gradients flow to the feature map.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 5)
    n, c, h, w = feature.shape
    m = rois.shape[0]
    k, s = out_size, sampling
    idx, wts = _sample_geometry(rois, stride, k, s, h, w, n)
    flat = feature.data.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    wcast = wts.astype(feature.dtype, copy=False)
    # (C, M, samples, 4) -> weighted neighbor sum -> bin average
    gathered = flat[:, idx]
    vals = np.einsum("cmsn,msn->cms", gathered, wcast)
    # samples are laid out (row_bin, row_sub, col_bin, col_sub)
    vals = vals.reshape(c, m, k, s, k, s).mean(axis=(3, 5))
    out = vals.transpose(1, 0, 2, 3).copy()

    def backward(g):
        # g: (M, C, k, k); each bin gradient spreads evenly over its samples
        gbin = (g.transpose(1, 0, 2, 3) / (s * s)).astype(np.float64)
        gsample = np.repeat(np.repeat(gbin.reshape(c, m, k, 1, k, 1), s, axis=3), s, axis=5)
        contrib = gsample.reshape(c, m, -1)[:, :, :, None] * wts  # (C, M, samples, 4)
        contrib = contrib.reshape(c, -1)
        flat_idx = idx.reshape(-1)
        gfeat = np.empty((c, n * h * w), dtype=np.float64)
        for ci in range(c):
            gfeat[ci] = np.bincount(flat_idx, weights=contrib[ci], minlength=n * h * w)
        gfeat = gfeat.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        _accum(feature, gfeat.astype(feature.dtype, copy=False))

    return _result(out, (feature,), backward)


def roi_align(
    level: Tensor,
    box: Box,
    stride: float,
    out_size: int = 7,
    sampling: int = 2,
) -> Tensor:
    """RoI Align of a single box on a single (C, H, W) feature map."""
    if level.data.ndim != 3:
        raise ValueError(f"expected a (C,H,W) feature map, got shape {level.shape}")
    batched = roi_align_batch(
        level.reshape((1,) + level.shape),
        np.array([[0.0, box.x1, box.y1, box.x2, box.y2]]),
        stride,
        out_size=out_size,
        sampling=sampling,
    )
    return batched.reshape(batched.shape[1:])
