"""Three-stage training: detector, then landmarks alone, then fused recognition."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from ..evalkit import dataset_metrics
from ..gpm import gpm_loss, soft_argmax
from ..transforms import sample_transforms
from .config import TrainConfig
from .data import SpotDataset, image_tensor, jitter_rects, make_proposals
from .inference import load_state_compatible, predict_records, read_checkpoint, save_checkpoint
from .losses import spotting_loss
from .model import DRSpotter, encode_boxes, extract_roi, rects_to_quads

STAGE_NAMES = {1: "detector", 2: "landmarks", 3: "fusion"}
# modules whose weights are final after each stage; resuming copies only these
STAGE_MODULES = {1: ("backbone.", "text_head.", "char_head."), 2: ("backbone.", "text_head.", "char_head.", "gpm."), 3: ("",)}


@dataclass
class TrainResult:
    checkpoints: dict = field(default_factory=dict)
    log_path: Optional[Path] = None
    metrics: dict = field(default_factory=dict)
    model: Optional[DRSpotter] = None


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def stage_lr(base: float, epoch: int, decay_epochs) -> float:
    """Learning rate for 0-based ``epoch``: divided by 10 once each listed (1-based) epoch has passed."""
    return base * 0.1 ** sum(1 for d in decay_epochs if epoch >= d)


def _set_trainable(model: DRSpotter, stage: int) -> list:
    """Freeze/unfreeze per stage; frozen modules also go to eval mode so BN buffers stay put."""
    groups = {
        1: [model.backbone, model.text_head, model.char_head],
        2: [model.gpm],
        3: [model.backbone, model.text_head, model.char_head] + ([model.grm] if model.grm is not None else []),
    }[stage]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    params = []
    for m in groups:
        m.train()
        for p in m.parameters():
            p.requires_grad_(True)
            params.append(p)
    return params


def _epochs(cfg: TrainConfig, stage: int) -> int:
    return {1: cfg.epochs_stage1, 2: cfg.epochs_stage2, 3: cfg.epochs_stage3}[stage]


def _check_finite(loss: torch.Tensor, stage: int, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at stage {stage}, epoch {epoch + 1}, step {step}: {loss.item()}")


def detection_step(model: DRSpotter, data: SpotDataset, idx, rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    """Spotting loss on one minibatch of jittered proposals."""
    cfg = model.cfg
    props = make_proposals(data, idx, rng, cfg.jitter, model.background_class)
    feats = model.backbone(image_tensor(data.images[list(idx)]))
    f_c, h = model.char_features(feats, rects_to_quads(props.char_rects), props.char_index)
    char_logits, char_deltas = model.recognize(h, f_c)
    text_logits, text_deltas = model.text_head(
        extract_roi(feats, rects_to_quads(props.line_rects), props.line_index, cfg.text_roi)
    )
    return spotting_loss(
        char_logits, char_deltas, props.char_labels, encode_boxes(props.char_rects, props.char_targets),
        text_logits, text_deltas, props.line_labels, encode_boxes(props.line_rects, props.line_targets),
        background_class=model.background_class,
    )


def landmark_step(model: DRSpotter, data: SpotDataset, idx, rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    """Unsupervised landmark loss on character patches from the frozen backbone."""
    cfg = model.cfg
    rects, index = [], []
    for b, i in enumerate(idx):
        r = jitter_rects(data.char_rects[i], rng, cfg.jitter, data.image_size)
        rects.append(r)
        index.extend([b] * len(r))
    with torch.no_grad():
        feats = model.backbone(image_tensor(data.images[list(idx)]))
        h = extract_roi(feats, rects_to_quads(torch.tensor(np.concatenate(rects), dtype=torch.float32)),
                        torch.tensor(index), cfg.patch_size)
    return landmark_loss(model, h, rng)


def landmark_loss(model: DRSpotter, h: torch.Tensor, rng: np.random.Generator) -> tuple[torch.Tensor, dict]:
    """Alignment plus ``lambda`` times diversity for patches ``h`` and random warps of them."""
    cfg = model.cfg
    ts = sample_transforms(cfg.transform_ranges(), h.shape[0], rng)
    return gpm_loss(model.gpm, h, ts, cfg.lam, cfg.use_align, cfg.use_div)


def evaluate(model: DRSpotter, data: Optional[SpotDataset]) -> dict:
    if data is None or len(data) == 0:
        return {}
    return dataset_metrics(predict_records(model, data))


def _run_stage(model, stage, data, val, rng, log: Callable[[dict], None]) -> dict:
    cfg = model.cfg
    params = _set_trainable(model, stage)
    model.fusion_enabled = stage == 3
    base_lr = cfg.lr_stage2 if stage == 2 else cfg.lr
    opt = torch.optim.SGD(params, lr=base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    step_fn = landmark_step if stage == 2 else detection_step
    metrics: dict = {}
    n = len(data)
    for epoch in range(_epochs(cfg, stage)):
        lr = stage_lr(base_lr, epoch, cfg.decay_epochs)
        for g in opt.param_groups:
            g["lr"] = lr
        t0 = time.time()
        order = rng.permutation(n)
        sums: dict = {}
        steps = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size].tolist()
            loss, terms = step_fn(model, data, idx, rng)
            _check_finite(loss, stage, epoch, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            steps += 1
        metrics = evaluate(model, val) if stage != 2 else {}
        _set_trainable(model, stage)
        record = {"stage": stage, "epoch": epoch + 1, "lr": lr, "loss": {k: v / max(steps, 1) for k, v in sums.items()}}
        record.update(metrics)
        log(record, seconds=time.time() - t0)
    return metrics


def train_three_stage(
    cfg: TrainConfig,
    train_data: SpotDataset,
    val_data: Optional[SpotDataset],
    out_dir,
    resume_from=None,
    echo: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Run the configured stages, writing ``stage{n}.pt`` and ``metrics.jsonl`` under ``out_dir``.

    ``resume_from`` names a checkpoint of an earlier stage, possibly produced by
    another variant; stages up to and including its stage are skipped. Stage 2
    is a no-op when landmarks are unused, so every variant sees the same
    number of detector epochs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    set_determinism(cfg.seed)
    model = DRSpotter(cfg)
    done = 0
    if resume_from is not None:
        blob = read_checkpoint(resume_from)
        done = int(blob["stage"])
        load_state_compatible(model, blob["state"], STAGE_MODULES[done])
    log_path = out / "metrics.jsonl"
    mode = "a" if done else "w"
    result = TrainResult(log_path=log_path, model=model)
    # wall-clock times go to a separate file so the metric log stays bit-reproducible
    with open(log_path, mode, encoding="utf-8") as fh, open(out / "timing.jsonl", mode, encoding="utf-8") as th:

        def log(record: dict, seconds: float = 0.0) -> None:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            th.write(json.dumps({"stage": record["stage"], "epoch": record["epoch"], "seconds": round(seconds, 3)}) + "\n")
            if echo:
                echo(json.dumps(record, sort_keys=True))

        for stage in cfg.stages:
            if stage <= done:
                continue
            rng = np.random.default_rng([cfg.seed, stage])
            if stage == 3:
                model.reset_classifier()
            if stage == 2 and not cfg.gpm_active:
                log({"stage": 2, "epoch": 0, "skipped": "landmarks unused by this variant"})
            else:
                result.metrics = _run_stage(model, stage, train_data, val_data, rng, log)
            model.fusion_enabled = stage == 3
            model.eval()
            result.checkpoints[stage] = save_checkpoint(model, out / f"stage{stage}.pt", stage)
    return result


def landmark_probe(model: DRSpotter, data: SpotDataset, n_images: int = 50) -> torch.Tensor:
    """Soft-argmax landmarks (N, K, 2) of the first ``n_images`` ground-truth characters' patches."""
    model.eval()
    with torch.no_grad():
        idx = list(range(min(n_images, len(data))))
        feats = model.backbone(image_tensor(data.images[idx]))
        rects = np.concatenate([data.char_rects[i] for i in idx])
        index = torch.tensor([b for b, i in enumerate(idx) for _ in data.char_rects[i]])
        h = extract_roi(feats, rects_to_quads(torch.tensor(rects, dtype=torch.float32)), index, model.cfg.patch_size)
        return soft_argmax(model.gpm(h))
