"""Multi-task spotting loss: character and text-line classification plus box regression."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F

TERMS = ("crb_cls", "crb_bbox", "tdb_cls", "tdb_bbox")


def smooth_l1(delta: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise smooth-L1: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - 0.5 beta`` outside."""
    a = delta.abs()
    return torch.where(a < beta, 0.5 * a**2 / beta, a - 0.5 * beta)


def _box_term(deltas: torch.Tensor, targets: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    if not positive.any():
        return deltas.sum() * 0.0
    return smooth_l1(deltas[positive] - targets[positive]).sum(-1).mean()


def spotting_loss(
    char_logits: torch.Tensor,
    char_deltas: torch.Tensor,
    char_labels: torch.Tensor,
    char_targets: torch.Tensor,
    text_logits: Optional[torch.Tensor] = None,
    text_deltas: Optional[torch.Tensor] = None,
    text_labels: Optional[torch.Tensor] = None,
    text_targets: Optional[torch.Tensor] = None,
    background_class: Optional[int] = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Sum of the enabled terms and a per-term breakdown.

    Box terms only cover positive proposals: characters whose label differs
    from ``background_class`` (default: last logit) and text proposals with
    label 1. The text-branch terms are skipped when ``text_logits`` is None.
    """
    bg = char_logits.shape[1] - 1 if background_class is None else background_class
    terms = {
        "crb_cls": F.cross_entropy(char_logits, char_labels),
        "crb_bbox": _box_term(char_deltas, char_targets, char_labels != bg),
    }
    if text_logits is not None:
        terms["tdb_cls"] = F.cross_entropy(text_logits, text_labels)
        terms["tdb_bbox"] = _box_term(text_deltas, text_targets, text_labels == 1)
    total = sum(terms.values())
    report = {k: v.item() for k, v in terms.items()}
    report["total"] = sum(report.values())
    return total, report
