"""Tensorized datasets and jittered ground-truth proposals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from ..glyphgen import GlyphSample, char_to_class, read_dataset

PROPOSAL_KINDS = ("text_line", "character")
PROPOSAL_SOURCES = ("ground_truth_jittered", "external")


@dataclass
class Proposal:
    """Candidate region as four corner points in pixel coordinates."""

    box: list
    kind: str = "character"
    source: str = "ground_truth_jittered"

    def __post_init__(self):
        from ..geometry import check_quad, quad_area

        check_quad(self.box, "proposal box")
        if quad_area(self.box) <= 0:
            raise ValueError("proposal box must have positive area")
        if self.kind not in PROPOSAL_KINDS or self.source not in PROPOSAL_SOURCES:
            raise ValueError(f"bad proposal kind/source: {self.kind!r}/{self.source!r}")


def _rect(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return np.concatenate([p.min(0), p.max(0)])


@dataclass
class SpotDataset:
    """Images (N, 1, H, W) uint8 with per-image rect arrays ``(x0, y0, x1, y1)``."""

    images: torch.Tensor
    char_rects: list
    char_labels: list
    line_rects: list
    line_texts: list
    line_ignore: list
    difficulty: list

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return int(self.images.shape[-1]), int(self.images.shape[-2])

    @classmethod
    def from_samples(cls, samples: Sequence[GlyphSample]) -> "SpotDataset":
        if not samples:
            raise ValueError("dataset is empty")
        shapes = {s.image.shape for s in samples}
        if len(shapes) != 1:
            raise ValueError(f"all images must share one size, got {sorted(shapes)}")
        images = torch.from_numpy(np.stack([s.image for s in samples]))[:, None]
        return cls(
            images=images,
            char_rects=[np.array([_rect(c.points) for c in s.chars]).reshape(-1, 4) for s in samples],
            char_labels=[np.array([char_to_class(c.char) for c in s.chars], dtype=np.int64) for s in samples],
            line_rects=[np.array([_rect(t.points) for t in s.text_lines]).reshape(-1, 4) for s in samples],
            line_texts=[[t.text for t in s.text_lines] for s in samples],
            line_ignore=[[t.ignore for t in s.text_lines] for s in samples],
            difficulty=[s.meta.get("difficulty") for s in samples],
        )

    @classmethod
    def load(cls, path, limit: Optional[int] = None) -> "SpotDataset":
        samples = read_dataset(path)
        return cls.from_samples(samples[:limit] if limit else samples)

    def subset(self, idx: Sequence[int]) -> "SpotDataset":
        idx = list(idx)
        pick = lambda xs: [xs[i] for i in idx]  # noqa: E731
        return SpotDataset(self.images[idx], pick(self.char_rects), pick(self.char_labels), pick(self.line_rects),
                           pick(self.line_texts), pick(self.line_ignore), pick(self.difficulty))


def image_tensor(images: torch.Tensor) -> torch.Tensor:
    """uint8 ink-on-black rasters -> float in [0, 1]."""
    return images.to(torch.float32) / 255.0


def jitter_rects(rects: np.ndarray, rng: np.random.Generator, amount: float, size: tuple[int, int]) -> np.ndarray:
    """Random scale and translation of up to ``amount`` of each side, clipped to the image."""
    if len(rects) == 0 or amount == 0:
        return rects.copy()
    w = rects[:, 2] - rects[:, 0]
    h = rects[:, 3] - rects[:, 1]
    cx = (rects[:, 0] + rects[:, 2]) / 2 + rng.uniform(-amount, amount, len(rects)) * w
    cy = (rects[:, 1] + rects[:, 3]) / 2 + rng.uniform(-amount, amount, len(rects)) * h
    w = w * rng.uniform(1 - amount, 1 + amount, len(rects))
    h = h * rng.uniform(1 - amount, 1 + amount, len(rects))
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return clip_rects(out, size)


def clip_rects(rects: np.ndarray, size: tuple[int, int], min_side: float = 2.0) -> np.ndarray:
    width, height = size
    out = rects.copy()
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, width)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, height)
    out[:, 2] = np.maximum(out[:, 2], np.minimum(out[:, 0] + min_side, width))
    out[:, 0] = np.minimum(out[:, 0], out[:, 2] - min_side)
    out[:, 3] = np.maximum(out[:, 3], np.minimum(out[:, 1] + min_side, height))
    out[:, 1] = np.minimum(out[:, 1], out[:, 3] - min_side)
    return out


def rect_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IOU (len(a), len(b)) of axis-aligned rects."""
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    area = lambda r: (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])  # noqa: E731
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def sample_negatives(
    positives: np.ndarray, rng: np.random.Generator, size: tuple[int, int], max_iou: float = 0.3, tries: int = 20
) -> np.ndarray:
    """One off-target crop per positive, sized like it, with IOU below ``max_iou`` to every positive."""
    width, height = size
    out = []
    for r in positives:
        w, h = r[2] - r[0], r[3] - r[1]
        best, best_iou = None, np.inf
        for _ in range(tries):
            x0 = rng.uniform(-0.25 * w, width - 0.75 * w)
            y0 = rng.uniform(-0.25 * h, height - 0.75 * h)
            cand = clip_rects(np.array([[x0, y0, x0 + w, y0 + h]]), size)
            iou = rect_iou(cand, positives).max()
            if iou < best_iou:
                best, best_iou = cand[0], iou
            if iou < max_iou:
                break
        out.append(best)
    return np.array(out).reshape(-1, 4)


@dataclass
class ProposalBatch:
    """Flattened RoIs for a minibatch; ``*_targets`` are the source ground-truth rects."""

    char_rects: torch.Tensor
    char_index: torch.Tensor
    char_labels: torch.Tensor
    char_targets: torch.Tensor
    line_rects: torch.Tensor
    line_index: torch.Tensor
    line_labels: torch.Tensor
    line_targets: torch.Tensor


def make_proposals(
    data: SpotDataset,
    idx: Sequence[int],
    rng: np.random.Generator,
    jitter: float,
    background_class: int,
    negatives: bool = True,
) -> ProposalBatch:
    size = data.image_size
    cr, ci, cl, ct, lr, li, ll, lt = ([] for _ in range(8))
    for b, i in enumerate(idx):
        chars, labels, lines = data.char_rects[i], data.char_labels[i], data.line_rects[i]
        char_parts = [(jitter_rects(chars, rng, jitter, size), labels, chars)]
        line_parts = [(jitter_rects(lines, rng, jitter, size), np.ones(len(lines), np.int64), lines)]
        if negatives and len(chars):
            neg = sample_negatives(chars, rng, size)
            char_parts.append((neg, np.full(len(neg), background_class, np.int64), neg))
        if negatives and len(lines):
            lneg = sample_negatives(lines, rng, size)
            line_parts.append((lneg, np.zeros(len(lneg), np.int64), lneg))
        for rects, lab, tgt in char_parts:
            cr.append(rects), cl.append(lab), ct.append(tgt), ci.append(np.full(len(rects), b, np.int64))
        for rects, lab, tgt in line_parts:
            lr.append(rects), ll.append(lab), lt.append(tgt), li.append(np.full(len(rects), b, np.int64))
    f = lambda xs: torch.tensor(np.concatenate(xs).reshape(-1, 4), dtype=torch.float32)  # noqa: E731
    g = lambda xs: torch.tensor(np.concatenate(xs), dtype=torch.int64)  # noqa: E731
    return ProposalBatch(f(cr), g(ci), g(cl), f(ct), f(lr), g(li), g(ll), f(lt))
