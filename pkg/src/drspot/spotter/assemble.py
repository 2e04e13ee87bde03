"""Character-to-text-line assembly."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import centroid, check_quad, quad_ioa, quad_iou
from ..glyphgen import class_to_char

OVERLAPS = ("ioa", "iou")


@dataclass
class CharDetection:
    box: list
    class_id: int
    score: float
    char: str = ""

    def __post_init__(self):
        check_quad(self.box, "character box")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if not self.char:
            self.char = class_to_char(self.class_id)


@dataclass
class SpotPrediction:
    text_box: list
    text: str
    char_dets: list = field(default_factory=list)


def _long_axis(box) -> int:
    q = np.asarray(box, dtype=np.float64)
    width = np.linalg.norm(q[1] - q[0])
    height = np.linalg.norm(q[3] - q[0])
    return 0 if width >= height else 1


def assemble_text(char_dets, text_boxes, iou_threshold: float = 0.3, overlap: str = "ioa") -> list[SpotPrediction]:
    """Group characters into lines and read them along each line's long axis.

    Each character goes to the line with the largest overlap if that overlap
    exceeds ``iou_threshold``; otherwise it is dropped. ``overlap="iou"`` is
    plain intersection-over-union; the default ``"ioa"`` divides by the
    character area, which stays meaningful for lines much larger than a glyph.
    Ties go to the lower line index.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    if overlap not in OVERLAPS:
        raise ValueError(f"overlap must be one of {OVERLAPS}, got {overlap!r}")
    boxes = [getattr(t, "box", t) for t in text_boxes]
    score = quad_ioa if overlap == "ioa" else quad_iou
    groups: list[list[CharDetection]] = [[] for _ in boxes]
    for det in char_dets:
        best, best_val = None, iou_threshold
        for li, tb in enumerate(boxes):
            val = score(det.box, tb)
            if val > best_val:
                best, best_val = li, val
        if best is not None:
            groups[best].append(det)
    out = []
    for tb, members in zip(boxes, groups):
        axis = _long_axis(tb)
        ordered = sorted(members, key=lambda d: (centroid(d.box)[axis], centroid(d.box)[1 - axis]))
        out.append(SpotPrediction(tb, "".join(d.char for d in ordered), ordered))
    return out
