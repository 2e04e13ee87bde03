"""Recognition and detection metrics: Levenshtein distance, 1-NED, P/R/F, A/B report."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .geometry import Quad, quad_area, quad_iou

MATCH_IOU = 0.5
DIFFICULTIES = ("simple", "medium", "hard")


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalized_distance(pred: str, gt: str) -> float:
    longest = max(len(pred), len(gt))
    if longest == 0:
        return 0.0
    return levenshtein(pred, gt) / longest


@dataclass
class PredLine:
    text: str
    points: Quad


@dataclass
class GtLine:
    text: str
    points: Quad
    ignore: bool = False


@dataclass
class EvalRecord:
    """Predicted and ground-truth text lines of one image."""

    preds: list[PredLine]
    gts: list[GtLine]
    difficulty: Optional[str] = None


def _greedy_match(
    preds: Sequence[Quad], gts: Sequence[Quad], iou_threshold: float
) -> list[tuple[int, int]]:
    """One-to-one matching by descending IOU.

    Ties break on larger prediction area, then prediction coordinates, then
    ground-truth index, so the result does not depend on prediction order.
    """
    cands = []
    for pi, p in enumerate(preds):
        p_key = tuple(round(v, 9) for pt in p for v in pt)
        p_area = quad_area(p)
        for gi, g in enumerate(gts):
            iou = quad_iou(p, g)
            if iou >= iou_threshold and iou > 0:
                cands.append((-iou, -p_area, p_key, gi, pi))
    cands.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, _, _, gi, pi in cands:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pi, gi))
    return pairs


def line_distances(record: EvalRecord, iou_threshold: float = MATCH_IOU) -> list[float]:
    """Normalized edit distance per scored line of one image.

    Matched pairs score ``L / max(len)``; unmatched ground truth and unmatched
    predictions score 1. Lines matched to ignored ground truth, and ignored
    ground truth itself, are not scored.
    """
    pairs = _greedy_match([p.points for p in record.preds], [g.points for g in record.gts], iou_threshold)
    matched_p = {pi for pi, _ in pairs}
    matched_g = {gi for _, gi in pairs}
    out = []
    for pi, gi in pairs:
        gt = record.gts[gi]
        if not gt.ignore:
            out.append(normalized_distance(record.preds[pi].text, gt.text))
    for gi, gt in enumerate(record.gts):
        if gi not in matched_g and not gt.ignore:
            out.append(1.0 if gt.text else 0.0)
    for pi, pred in enumerate(record.preds):
        if pi not in matched_p:
            out.append(1.0 if pred.text else 0.0)
    return out


def one_minus_ned(records: Sequence[EvalRecord], iou_threshold: float = MATCH_IOU) -> float:
    """``1 - mean(L(T, T_hat) / max(|T|, |T_hat|))`` over all scored lines."""
    dists = [d for r in records for d in line_distances(r, iou_threshold)]
    if not dists:
        return 1.0
    return 1.0 - sum(dists) / len(dists)


def image_fully_correct(record: EvalRecord, iou_threshold: float = MATCH_IOU) -> bool:
    """Every non-ignored ground-truth line is matched with the exact text."""
    pairs = _greedy_match([p.points for p in record.preds], [g.points for g in record.gts], iou_threshold)
    by_gt = {gi: pi for pi, gi in pairs}
    for gi, gt in enumerate(record.gts):
        if gt.ignore:
            continue
        if gi not in by_gt or record.preds[by_gt[gi]].text != gt.text:
            return False
    return True


@dataclass
class DetectionCounts:
    tp: int = 0
    n_pred: int = 0
    n_gt: int = 0

    def __add__(self, other: "DetectionCounts") -> "DetectionCounts":
        return DetectionCounts(self.tp + other.tp, self.n_pred + other.n_pred, self.n_gt + other.n_gt)

    def prf(self) -> tuple[float, float, float]:
        p = self.tp / self.n_pred if self.n_pred else 0.0
        r = self.tp / self.n_gt if self.n_gt else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return p, r, f


def detection_counts(
    pred_boxes: Sequence[Quad],
    gt_boxes: Sequence[Quad],
    iou_threshold: float = MATCH_IOU,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> DetectionCounts:
    ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gt_boxes)
    pairs = _greedy_match(pred_boxes, gt_boxes, iou_threshold)
    tp = sum(1 for _, gi in pairs if not ignore[gi])
    on_ignored = sum(1 for _, gi in pairs if ignore[gi])
    return DetectionCounts(tp=tp, n_pred=len(pred_boxes) - on_ignored, n_gt=sum(1 for i in ignore if not i))


def detection_prf(
    pred_boxes: Sequence[Quad],
    gt_boxes: Sequence[Quad],
    iou_threshold: float = MATCH_IOU,
    gt_ignore: Optional[Sequence[bool]] = None,
) -> tuple[float, float, float]:
    """Precision, recall and F-measure; zero denominators give 0."""
    return detection_counts(pred_boxes, gt_boxes, iou_threshold, gt_ignore).prf()


def dataset_metrics(records: Sequence[EvalRecord], iou_threshold: float = MATCH_IOU) -> dict[str, float]:
    total = DetectionCounts()
    for r in records:
        total = total + detection_counts(
            [p.points for p in r.preds], [g.points for g in r.gts], iou_threshold, [g.ignore for g in r.gts]
        )
    p, r_, f = total.prf()
    return {"1-NED": one_minus_ned(records, iou_threshold), "P": p, "R": r_, "F": f}


@dataclass
class GeneralizationReport:
    ned_a: float
    ned_b: float
    gap: float
    det_a: dict[str, float]
    det_b: dict[str, float]
    ned_by_difficulty_a: dict[str, float]
    ned_by_difficulty_b: dict[str, float]
    fully_recognized_a: int
    fully_recognized_b: int
    a_right_b_wrong: int
    b_error_difficulty: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_markdown(self) -> str:
        head = (
            "| set | Detection F | 1-NED | 1-NED simple | 1-NED medium | 1-NED hard | N1 | N2 |"
            " B-error simple | B-error medium | B-error hard |\n"
            "|---|---|---|---|---|---|---|---|---|---|---|\n"
        )
        rows = []
        for name, ned, det, by_diff, n1 in (
            ("A", self.ned_a, self.det_a, self.ned_by_difficulty_a, self.fully_recognized_a),
            ("B", self.ned_b, self.det_b, self.ned_by_difficulty_b, self.fully_recognized_b),
        ):
            diffs = " | ".join(f"{by_diff.get(d, float('nan')):.3f}" for d in DIFFICULTIES)
            errs = " | ".join(str(self.b_error_difficulty.get(d, 0)) if name == "B" else "" for d in DIFFICULTIES)
            rows.append(f"| {name} | {det['F']:.3f} | {ned:.3f} | {diffs} | {n1} | {self.a_right_b_wrong} | {errs} |")
        return head + "\n".join(rows) + "\n"


def _ned_by_difficulty(records: Sequence[EvalRecord]) -> dict[str, float]:
    out = {}
    for d in DIFFICULTIES:
        subset = [r for r in records if r.difficulty == d]
        if subset:
            out[d] = one_minus_ned(subset)
    return out


def generalization_report(records_a: Sequence[EvalRecord], records_b: Sequence[EvalRecord]) -> GeneralizationReport:
    """Compare content-paired A/B test records (same index = same content)."""
    if len(records_a) != len(records_b):
        raise ValueError(f"A and B sets must be paired, got {len(records_a)} and {len(records_b)} records")
    ok_a = [image_fully_correct(r) for r in records_a]
    ok_b = [image_fully_correct(r) for r in records_b]
    errors = Counter(rb.difficulty for ra, rb, a, b in zip(records_a, records_b, ok_a, ok_b) if a and not b)
    ned_a, ned_b = one_minus_ned(records_a), one_minus_ned(records_b)
    return GeneralizationReport(
        ned_a=ned_a,
        ned_b=ned_b,
        gap=ned_a - ned_b,
        det_a=dataset_metrics(records_a),
        det_b=dataset_metrics(records_b),
        ned_by_difficulty_a=_ned_by_difficulty(records_a),
        ned_by_difficulty_b=_ned_by_difficulty(records_b),
        fully_recognized_a=sum(ok_a),
        fully_recognized_b=sum(ok_b),
        a_right_b_wrong=sum(1 for a, b in zip(ok_a, ok_b) if a and not b),
        b_error_difficulty={str(k): v for k, v in errors.items()},
    )


def font_generalization_report(checkpoint, test_a, test_b, **predict_kwargs) -> GeneralizationReport:
    """Evaluate a trained spotter on paired A/B manifests."""
    from .spotter.inference import load_spotter, predict_records

    model = load_spotter(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    records_a = predict_records(model, test_a, **predict_kwargs)
    records_b = predict_records(model, test_b, **predict_kwargs)
    return generalization_report(records_a, records_b)
