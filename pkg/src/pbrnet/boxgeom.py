"""Axis-aligned box geometry: IoU, NMS, delta transforms, and the
boundary-area side parameterization used by the refinement stages.

Everything here is pure and double precision. Boxes are (x1, y1, x2, y2)
in image pixel coordinates with x1 < x2 and y1 < y2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Box",
    "BoundaryAreas",
    "Sigma",
    "RefineConfig",
    "DegenerateBoxError",
    "shrink_factor",
    "boundary_areas",
    "encode_sigma",
    "clamp_sigma",
    "decode_box",
    "encode_delta",
    "decode_delta",
    "iou",
    "iou_matrix",
    "nms",
    "clip_to_image",
    "boxes_to_array",
]

_EPS = 1e-9


class DegenerateBoxError(ValueError):
    """A box or boundary area collapsed to zero extent."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in pixel coordinates, corners (x1,y1)-(x2,y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self.as_tuple()}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBoxError(f"box must have positive extent, got {self.as_tuple()}")

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def scale(self) -> float:
        """sqrt(w*h), the canonical object scale."""
        return math.sqrt(self.w * self.h)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class BoundaryAreas:
    """The four flank regions of a box plus the realized center line of each.

    `left`/`right` have width c*w of the source box, `up`/`bottom` height c*h.
    `m_l`..`m_b` are the center-line coordinates along each area's normal
    axis; they equal the source box sides unless edge truncation slid the
    area inward.
    """

    left: Box
    right: Box
    up: Box
    bottom: Box
    m_l: float
    m_r: float
    m_u: float
    m_b: float


class Sigma(NamedTuple):
    """Relative side displacements, in units of the boundary-area extent."""

    l: float
    r: float
    u: float
    b: float


@dataclass(frozen=True)
class RefineConfig:
    """Stage plan for iterative refinement.

    clamp_q=None disables target truncation (the "no truncation" ablation);
    schedule=None selects the default shrink factors 1/2^t.
    """

    num_stages: int = 3
    clamp_q: float | None = 0.5
    schedule: tuple[float, ...] | None = None
    side_norm: float = 0.2

    def __post_init__(self):
        if self.num_stages < 1:
            raise ValueError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.clamp_q is not None and not self.clamp_q > 0:
            raise ValueError(f"clamp_q must be > 0 or None, got {self.clamp_q}")
        if not self.side_norm > 0:
            raise ValueError(f"side_norm must be > 0, got {self.side_norm}")
        if self.schedule is not None:
            if len(self.schedule) != self.num_stages - 1:
                raise ValueError(
                    f"schedule must have num_stages-1={self.num_stages - 1} entries, "
                    f"got {len(self.schedule)}"
                )
            for c in self.schedule:
                if not 0.0 < c <= 1.0:
                    raise ValueError(f"shrink factors must lie in (0, 1], got {c}")

    def shrink(self, t: int) -> float:
        """Shrink factor for refinement step t (1-based)."""
        if self.schedule is not None:
            if not 1 <= t <= len(self.schedule):
                raise ValueError(f"refinement step {t} outside schedule of length {len(self.schedule)}")
            return self.schedule[t - 1]
        return shrink_factor(t)


def shrink_factor(t: int) -> float:
    """Default boundary-area shrink factor 1/2^t for refinement step t >= 1."""
    if t < 1:
        raise ValueError(f"refinement step index must be >= 1, got {t}")
    return 0.5 ** t


def _slide_span(lo: float, hi: float, limit: float) -> tuple[float, float]:
    # Slide [lo, hi] inside [0, limit] without changing its length.
    if lo < 0.0:
        return 0.0, hi - lo
    if hi > limit:
        return limit - (hi - lo), limit
    return lo, hi


def boundary_areas(box: Box, c: float, img_w: float, img_h: float) -> BoundaryAreas:
    """Extract the four boundary areas of `box` for shrink factor `c`.

    Each area is centered on one side of the box and spans c*w (left/right)
    or c*h (up/bottom) along that side's normal axis, full extent along the
    other. Areas that would cross an image edge are slid inward, preserving
    their extent; the recorded center lines are the realized midpoints.
    """
    if not 0.0 < c <= 1.0:
        raise ValueError(f"shrink factor must lie in (0, 1], got {c}")
    if box.x1 < -_EPS or box.y1 < -_EPS or box.x2 > img_w + _EPS or box.y2 > img_h + _EPS:
        raise ValueError(f"box {box.as_tuple()} lies outside the {img_w}x{img_h} image")
    cw = c * box.w
    ch = c * box.h
    if cw <= _EPS or ch <= _EPS:
        raise DegenerateBoxError(f"boundary areas degenerate: c*w={cw}, c*h={ch}")

    lx1, lx2 = _slide_span(box.x1 - 0.5 * cw, box.x1 + 0.5 * cw, img_w)
    rx1, rx2 = _slide_span(box.x2 - 0.5 * cw, box.x2 + 0.5 * cw, img_w)
    uy1, uy2 = _slide_span(box.y1 - 0.5 * ch, box.y1 + 0.5 * ch, img_h)
    by1, by2 = _slide_span(box.y2 - 0.5 * ch, box.y2 + 0.5 * ch, img_h)

    return BoundaryAreas(
        left=Box(lx1, box.y1, lx2, box.y2),
        right=Box(rx1, box.y1, rx2, box.y2),
        up=Box(box.x1, uy1, box.x2, uy2),
        bottom=Box(box.x1, by1, box.x2, by2),
        m_l=0.5 * (lx1 + lx2),
        m_r=0.5 * (rx1 + rx2),
        m_u=0.5 * (uy1 + uy2),
        m_b=0.5 * (by1 + by2),
    )


def encode_sigma(areas: BoundaryAreas, box: Box, c: float, target: Box) -> Sigma:
    """Relative displacements of `target`'s sides from the area center lines.

    Each component is (target side - center line) / (c * extent of `box`),
    so a displacement of one full area half-width is 0.5.
    """
    if not c > 0:
        raise ValueError(f"shrink factor must be > 0, got {c}")
    cw = c * box.w
    ch = c * box.h
    if cw <= _EPS or ch <= _EPS:
        raise DegenerateBoxError(f"cannot encode against degenerate box: c*w={cw}, c*h={ch}")
    return Sigma(
        l=(target.x1 - areas.m_l) / cw,
        r=(target.x2 - areas.m_r) / cw,
        u=(target.y1 - areas.m_u) / ch,
        b=(target.y2 - areas.m_b) / ch,
    )


def clamp_sigma(sigma: Sigma, q: float) -> tuple[Sigma, tuple[bool, bool, bool, bool]]:
    """Clamp each component to [-q, q]; also report which components clipped."""
    if not q > 0:
        raise ValueError(f"clamp range must be > 0, got {q}")
    clamped = Sigma(*(min(max(v, -q), q) for v in sigma))
    clipped = tuple(v != w for v, w in zip(sigma, clamped))
    return clamped, clipped


def decode_box(
    areas: BoundaryAreas,
    box: Box,
    c: float,
    sigma: Sigma,
    img_w: float,
    img_h: float,
) -> Box:
    """Inverse of :func:`encode_sigma`: move each side off its center line.

    Extreme displacements can cross sides over; the result is re-ordered to
    (min, max) and clipped to the image. A box that collapses to zero extent
    raises DegenerateBoxError.
    """
    cw = c * box.w
    ch = c * box.h
    x1 = areas.m_l + cw * sigma.l
    x2 = areas.m_r + cw * sigma.r
    y1 = areas.m_u + ch * sigma.u
    y2 = areas.m_b + ch * sigma.b
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    x1 = min(max(x1, 0.0), img_w)
    x2 = min(max(x2, 0.0), img_w)
    y1 = min(max(y1, 0.0), img_h)
    y2 = min(max(y2, 0.0), img_h)
    if x2 - x1 <= _EPS or y2 - y1 <= _EPS:
        raise DegenerateBoxError(f"decoded box degenerate: ({x1}, {y1}, {x2}, {y2})")
    return Box(x1, y1, x2, y2)


def encode_delta(
    proposal: Box,
    target: Box,
    norm: tuple[float, float] = (0.1, 0.2),
) -> tuple[float, float, float, float]:
    """Standard center/log-size regression offsets from proposal to target.

    Returns (dx, dy, dw, dh) where dx = ((cx* - cx) / w) / norm_xy and
    dw = ln(w*/w) / norm_wh.
    """
    sxy, swh = norm
    if not (sxy > 0 and swh > 0):
        raise ValueError(f"normalization factors must be > 0, got {norm}")
    if target.w <= 0 or target.h <= 0:
        raise DegenerateBoxError(f"target has non-positive dimensions: {target.as_tuple()}")
    dx = ((target.cx - proposal.cx) / proposal.w) / sxy
    dy = ((target.cy - proposal.cy) / proposal.h) / sxy
    dw = math.log(target.w / proposal.w) / swh
    dh = math.log(target.h / proposal.h) / swh
    return (dx, dy, dw, dh)


def decode_delta(
    proposal: Box,
    delta: Sequence[float],
    norm: tuple[float, float] = (0.1, 0.2),
) -> Box:
    """Exact inverse of :func:`encode_delta`."""
    sxy, swh = norm
    dx, dy, dw, dh = delta
    cx = proposal.cx + dx * sxy * proposal.w
    cy = proposal.cy + dy * sxy * proposal.h
    w = proposal.w * math.exp(dw * swh)
    h = proposal.h * math.exp(dh * swh)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N,4) / (M,4) float arrays of xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(
    detections: Sequence[tuple[Box, float, int]],
    iou_thresh: float,
) -> list[tuple[Box, float, int]]:
    """Greedy per-category non-maximum suppression.

    Highest-scored detections are kept first; a detection is dropped when it
    overlaps an already-kept detection of the same category above
    `iou_thresh`. The result is sorted by descending score (ties keep input
    order).
    """
    for _, score, _ in detections:
        if not math.isfinite(score):
            raise ValueError(f"detection scores must be finite, got {score}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    kept: list[tuple[Box, float, int]] = []
    for i in order:
        box, score, cat = detections[i]
        if all(k_cat != cat or iou(box, k_box) <= iou_thresh for k_box, _, k_cat in kept):
            kept.append((box, score, cat))
    return kept


def clip_to_image(box: Box, img_w: float, img_h: float) -> Box:
    """Clamp a box to [0, img_w] x [0, img_h].

    Raises DegenerateBoxError when nothing of the box remains inside.
    """
    x1 = min(max(box.x1, 0.0), img_w)
    y1 = min(max(box.y1, 0.0), img_h)
    x2 = min(max(box.x2, 0.0), img_w)
    y2 = min(max(box.y2, 0.0), img_h)
    if x2 - x1 <= _EPS or y2 - y1 <= _EPS:
        raise DegenerateBoxError(f"box {box.as_tuple()} fully clipped by {img_w}x{img_h} image")
    return Box(x1, y1, x2, y2)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (N,4) float64 array."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
