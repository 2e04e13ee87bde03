"""Checkpoint I/O and batched prediction."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from ..evalkit import EvalRecord, GtLine, PredLine
from ..geometry import rect_to_quad
from .assemble import CharDetection, SpotPrediction, assemble_text
from .config import TrainConfig
from .data import SpotDataset, image_tensor, jitter_rects
from .model import DRSpotter, decode_boxes, extract_roi, rects_to_quads

CHECKPOINT_FORMAT = "drspot-checkpoint"
CHECKPOINT_VERSION = 1
EVAL_SEED = 7919
PROPOSERS = ("gt", "cc")


def save_checkpoint(model: DRSpotter, path, stage: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    state = model.state_dict()
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "stage": stage,
        "fusion_enabled": model.fusion_enabled,
        "config": model.cfg.to_dict(),
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "state": state,
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            torch.save(blob, fh)
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"checkpoint write failed for {path}: {exc}") from exc
    return path


def read_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a spotter checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')} (expected {CHECKPOINT_VERSION})")
    for k, v in blob["state"].items():
        if list(v.shape) != blob["shapes"].get(k):
            raise ValueError(f"checkpoint tensor {k} has shape {list(v.shape)}, metadata says {blob['shapes'].get(k)}")
    return blob


def load_state_compatible(model: DRSpotter, state: dict, prefixes: Sequence[str] = ("",)) -> list[str]:
    """Copy tensors under ``prefixes`` that the model also has; return the model names left untouched.

    Tensors the model lacks (e.g. another variant's fusion layers) are
    skipped; a shape mismatch on a shared name is an error.
    """
    own = model.state_dict()
    state = {k: v for k, v in state.items() if k.startswith(tuple(prefixes))}
    for k, v in state.items():
        if k in own and own[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)}, model {tuple(own[k].shape)}")
    shared = {k: v for k, v in state.items() if k in own}
    model.load_state_dict(shared, strict=False)
    return sorted(set(own) - set(shared))


def load_spotter(path) -> DRSpotter:
    blob = read_checkpoint(path)
    model = DRSpotter(TrainConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state"])
    model.fusion_enabled = bool(blob["fusion_enabled"])
    model.eval()
    return model


def cc_proposals(image: np.ndarray, threshold: int = 64, min_pixels: int = 4, pad: float = 1.0):
    """Connected-component character boxes and one enclosing line box per image."""
    from scipy import ndimage

    labels, n = ndimage.label(image > threshold)
    rects = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        ys, xs = sl
        if (ys.stop - ys.start) * (xs.stop - xs.start) < min_pixels:
            continue
        rects.append([xs.start - pad, ys.start - pad, xs.stop + pad, ys.stop + pad])
    rects = _merge_columns(np.array(rects, dtype=np.float64).reshape(-1, 4))
    lines = rects[:, :2].min(0).tolist() + rects[:, 2:].max(0).tolist() if len(rects) else []
    return rects, np.array(lines, dtype=np.float64).reshape(-1, 4)


def _merge_columns(rects: np.ndarray) -> np.ndarray:
    """Merge components whose x-extents overlap by more than half the narrower one."""
    if len(rects) == 0:
        return rects
    rects = rects[np.argsort(rects[:, 0], kind="stable")]
    out = [rects[0].copy()]
    for r in rects[1:]:
        cur = out[-1]
        overlap = min(cur[2], r[2]) - max(cur[0], r[0])
        if overlap > 0.5 * min(cur[2] - cur[0], r[2] - r[0]):
            cur[:2] = np.minimum(cur[:2], r[:2])
            cur[2:] = np.maximum(cur[2:], r[2:])
        else:
            out.append(r.copy())
    return np.array(out)


def _test_proposals(data: SpotDataset, i: int, jitter: float, seed: int, proposer: str):
    if proposer == "cc":
        return cc_proposals(data.images[i, 0].numpy())
    rng = np.random.default_rng([seed, i])
    size = data.image_size
    return jitter_rects(data.char_rects[i], rng, jitter, size), jitter_rects(data.line_rects[i], rng, jitter, size)


@torch.no_grad()
def predict_spots(
    model: DRSpotter,
    data: SpotDataset,
    batch_size: int = 32,
    jitter: Optional[float] = None,
    seed: int = EVAL_SEED,
    proposer: str = "gt",
    text_score: float = 0.5,
) -> list[list[SpotPrediction]]:
    """Per-image spotting output from teacher-forced (jittered ground truth) or CC proposals."""
    if proposer not in PROPOSERS:
        raise ValueError(f"proposer must be one of {PROPOSERS}, got {proposer!r}")
    jitter = model.cfg.jitter if jitter is None else jitter
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(data), batch_size):
            idx = list(range(start, min(start + batch_size, len(data))))
            props = [_test_proposals(data, i, jitter, seed, proposer) for i in idx]
            out.extend(_predict_batch(model, data, idx, props, text_score))
    finally:
        model.train(was_training)
    return out


def _predict_batch(model, data, idx, props, text_score):
    feats = model.backbone(image_tensor(data.images[idx]))
    cr = [torch.tensor(c, dtype=torch.float32).reshape(-1, 4) for c, _ in props]
    lr = [torch.tensor(t, dtype=torch.float32).reshape(-1, 4) for _, t in props]
    ci = torch.cat([torch.full((len(c),), b) for b, c in enumerate(cr)]).long()
    li = torch.cat([torch.full((len(t),), b) for b, t in enumerate(lr)]).long()
    cr, lr = torch.cat(cr), torch.cat(lr)
    char_prob = torch.zeros(0, model.cfg.alphabet_size + 1)
    char_boxes = torch.zeros(0, 4)
    if len(cr):
        f_c, h = model.char_features(feats, rects_to_quads(cr), ci)
        logits, deltas = model.recognize(h, f_c)
        char_prob = F.softmax(logits, dim=1)
        char_boxes = decode_boxes(cr, deltas)
    text_prob = torch.zeros(0)
    text_boxes = torch.zeros(0, 4)
    if len(lr):
        t_logits, t_deltas = model.text_head(extract_roi(feats, rects_to_quads(lr), li, model.cfg.text_roi))
        text_prob = F.softmax(t_logits, dim=1)[:, 1]
        text_boxes = decode_boxes(lr, t_deltas)
    bg = model.background_class
    results = []
    for b in range(len(idx)):
        dets = []
        for r in torch.nonzero(ci == b).flatten().tolist():
            score, cls = char_prob[r].max(0)
            if int(cls) == bg:
                continue
            dets.append(CharDetection(rect_to_quad(*char_boxes[r].tolist()), int(cls), float(score)))
        lines = [rect_to_quad(*text_boxes[r].tolist()) for r in torch.nonzero(li == b).flatten().tolist()
                 if float(text_prob[r]) >= text_score]
        results.append(assemble_text(dets, lines, model.cfg.iou_threshold))
    return results


def to_eval_records(data: SpotDataset, spots: Sequence[Sequence[SpotPrediction]]) -> list[EvalRecord]:
    records = []
    for i, preds in enumerate(spots):
        gts = [GtLine(t, rect_to_quad(*r), ig) for t, r, ig in zip(data.line_texts[i], data.line_rects[i].tolist(), data.line_ignore[i])]
        records.append(EvalRecord([PredLine(p.text, p.text_box) for p in preds], gts, data.difficulty[i]))
    return records


def predict_records(model: DRSpotter, data: Union[SpotDataset, str, Path], **kwargs) -> list[EvalRecord]:
    if not isinstance(data, SpotDataset):
        data = SpotDataset.load(data)
    return to_eval_records(data, predict_spots(model, data, **kwargs))
