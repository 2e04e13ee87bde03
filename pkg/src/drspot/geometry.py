"""Quadrilateral box helpers. Boxes are four ``(x, y)`` corners in pixel units."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from shapely.geometry import Polygon

Quad = Sequence[Sequence[float]]


def check_quad(points: Quad, what: str = "box") -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.shape != (4, 2):
        raise ValueError(f"{what} must have exactly 4 (x, y) points, got shape {arr.shape}")
    return arr


def rect_to_quad(x0: float, y0: float, x1: float, y1: float) -> list[list[float]]:
    """Clockwise corners starting top-left."""
    return [[float(x0), float(y0)], [float(x1), float(y0)], [float(x1), float(y1)], [float(x0), float(y1)]]


def quad_to_rect(points: Quad) -> tuple[float, float, float, float]:
    arr = np.asarray(points, dtype=np.float64)
    return float(arr[:, 0].min()), float(arr[:, 1].min()), float(arr[:, 0].max()), float(arr[:, 1].max())


def _polygon(points: Quad) -> Polygon:
    poly = Polygon(np.asarray(points, dtype=np.float64))
    return poly if poly.is_valid else poly.buffer(0)


def quad_area(points: Quad) -> float:
    return float(_polygon(points).area)


def centroid(points: Quad) -> tuple[float, float]:
    arr = np.asarray(points, dtype=np.float64)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def _rect_overlap(a: Quad, b: Quad) -> tuple[float, float, float] | None:
    ra, rb = quad_to_rect(a), quad_to_rect(b)
    arr_a, arr_b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    axis_aligned = all(
        len(np.unique(arr[:, 0])) <= 2 and len(np.unique(arr[:, 1])) <= 2 for arr in (arr_a, arr_b)
    )
    if not axis_aligned:
        return None
    iw = max(0.0, min(ra[2], rb[2]) - max(ra[0], rb[0]))
    ih = max(0.0, min(ra[3], rb[3]) - max(ra[1], rb[1]))
    area_a = (ra[2] - ra[0]) * (ra[3] - ra[1])
    area_b = (rb[2] - rb[0]) * (rb[3] - rb[1])
    return iw * ih, area_a, area_b


def quad_iou(a: Quad, b: Quad) -> float:
    fast = _rect_overlap(a, b)
    if fast is not None:
        inter, area_a, area_b = fast
    else:
        pa, pb = _polygon(a), _polygon(b)
        inter, area_a, area_b = pa.intersection(pb).area, pa.area, pb.area
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def quad_ioa(inner: Quad, outer: Quad) -> float:
    """Intersection area divided by the area of ``inner``."""
    fast = _rect_overlap(inner, outer)
    if fast is not None:
        inter, area_in, _ = fast
    else:
        pa, pb = _polygon(inner), _polygon(outer)
        inter, area_in = pa.intersection(pb).area, pa.area
    return float(inter / area_in) if area_in > 0 else 0.0
