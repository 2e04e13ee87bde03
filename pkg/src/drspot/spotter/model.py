"""Desk-scale spotter: small backbone, quadrilateral RoI sampling, detection and recognition heads."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..gpm import LandmarkNet, extract_landmark_features, soft_argmax
from ..grm import GraphReasoning
from .config import TrainConfig

BOX_STD = (0.1, 0.1, 0.2, 0.2)


@contextmanager
def seeded(*parts: int):
    """Run a block under a torch seed derived from ``parts``; global RNG state is restored after."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(np.random.default_rng(list(parts)).integers(2**63 - 1)))
        yield


def _conv_bn(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU())


class Backbone(nn.Module):
    """Four conv blocks, overall stride 4."""

    stride = 4

    def __init__(self, channels: Sequence[int] = (16, 32, 64), out_channels: int = 32, in_channels: int = 1):
        super().__init__()
        c1, c2, c3 = channels
        self.blocks = nn.Sequential(
            _conv_bn(in_channels, c1, 1),
            _conv_bn(c1, c2, 2),
            _conv_bn(c2, c3, 2),
            _conv_bn(c3, out_channels, 1),
        )
        self.out_channels = out_channels

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"image size {h}x{w} must be a multiple of the backbone stride {self.stride}")
        return self.blocks(image)


def backbone_forward(image: torch.Tensor, backbone: Backbone) -> torch.Tensor:
    return backbone(image)


def roi_sample_points(boxes: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bin-center sample points (R, out_h*out_w, 2) in image pixels for quads (R, 4, 2).

    The sampling grid spans the parallelogram ``p0 + a (p1 - p0) + b (p3 - p0)``,
    which is the box itself for rectangles.
    """
    p0, p1, p3 = boxes[:, 0], boxes[:, 1], boxes[:, 3]
    a = (torch.arange(out_w, dtype=boxes.dtype, device=boxes.device) + 0.5) / out_w
    b = (torch.arange(out_h, dtype=boxes.dtype, device=boxes.device) + 0.5) / out_h
    bb, aa = torch.meshgrid(b, a, indexing="ij")
    aa, bb = aa.reshape(1, -1, 1), bb.reshape(1, -1, 1)
    return p0[:, None] + aa * (p1 - p0)[:, None] + bb * (p3 - p0)[:, None]


def extract_roi(
    features: torch.Tensor, boxes: torch.Tensor, batch_index: torch.Tensor, out_size, stride: int = Backbone.stride
) -> torch.Tensor:
    """Bilinear RoI pooling of quads (R, 4, 2) from ``features`` (B, C, h, w).

    Feature cell ``j`` is centered at image coordinate ``stride * (j + 0.5)``.
    Returns (R, C, out_h, out_w).
    """
    out_h, out_w = (out_size, out_size) if isinstance(out_size, int) else out_size
    if boxes.numel() == 0:
        return features.new_zeros((0, features.shape[1], out_h, out_w))
    b, c, h, w = features.shape
    lo = boxes.amin(dim=1)
    hi = boxes.amax(dim=1)
    if ((hi - lo) <= 0).any():
        raise ValueError("RoI boxes must have positive width and height")
    outside = (hi[:, 0] <= 0) | (hi[:, 1] <= 0) | (lo[:, 0] >= w * stride) | (lo[:, 1] >= h * stride)
    if outside.any():
        raise ValueError(f"{int(outside.sum())} RoI box(es) lie fully outside the {w * stride}x{h * stride} feature extent")
    pts = roi_sample_points(boxes.to(features.dtype), out_h, out_w)
    # pixel p lies at feature index p / stride - 0.5, i.e. normalized 2 p / (stride * size) - 1
    scale = pts.new_tensor([2.0 / (stride * w), 2.0 / (stride * h)])
    grid = pts * scale - 1
    parts, order = [], []
    # one call per image avoids copying the feature map per RoI
    for i in torch.unique(batch_index).tolist():
        sel = torch.nonzero(batch_index == i).flatten()
        g = grid[sel].reshape(1, -1, out_h * out_w, 2)
        sampled = F.grid_sample(features[i : i + 1], g, mode="bilinear", padding_mode="zeros", align_corners=False)
        parts.append(sampled[0].transpose(0, 1))
        order.append(sel)
    out = torch.cat(parts)[torch.argsort(torch.cat(order))]
    return out.reshape(-1, c, out_h, out_w)


class CharHead(nn.Module):
    """Character classifier and box regressor on a (D, g, g) feature map."""

    def __init__(self, channels: int, grid: int, num_classes: int, hidden: int = 256, extra_in: int = 0):
        super().__init__()
        self.conv = _conv_bn(channels, 64, 2)
        flat = 64 * ((grid + 1) // 2) ** 2
        self.fc = nn.Linear(flat, hidden)
        self.extra = nn.Linear(extra_in, hidden, bias=False) if extra_in else None
        if self.extra is not None:
            nn.init.zeros_(self.extra.weight)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.box = nn.Linear(hidden, 4)

    def forward(self, feat: torch.Tensor, extra: Optional[torch.Tensor] = None):
        x = self.fc(self.conv(feat).flatten(1))
        if self.extra is not None and extra is not None:
            x = x + self.extra(extra)
        x = F.relu(x)
        return self.cls(x), self.box(x)


class TextHead(nn.Module):
    """Text / non-text classifier and box regressor on line RoIs."""

    def __init__(self, channels: int, roi: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi * roi, hidden)
        self.cls = nn.Linear(hidden, 2)
        self.box = nn.Linear(hidden, 4)

    def forward(self, feat: torch.Tensor):
        x = F.relu(self.fc1(feat.flatten(1)))
        return self.cls(x), self.box(x)


class DRSpotter(nn.Module):
    """Backbone + text detection branch + character recognition branch with GPM/GRM."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        d, k = cfg.D, cfg.K
        # each component draws its init from its own seed, so variants share identical stage-1 weights
        with seeded(cfg.seed, 1):
            self.backbone = Backbone(cfg.backbone_channels, d)
        with seeded(cfg.seed, 2):
            self.text_head = TextHead(d, cfg.text_roi)
        with seeded(cfg.seed, 3):
            extra = k * d if cfg.fusion == "concat" else 0
            self.char_head = CharHead(d, cfg.fc_size, cfg.alphabet_size, cfg.head_hidden, extra_in=extra)
        with seeded(cfg.seed, 4):
            self.gpm = LandmarkNet(d, k, cfg.gpm_hidden)
        self.grm = None
        if cfg.fusion == "graph":
            with seeded(cfg.seed, 5):
                self.grm = GraphReasoning(d, cfg.fc_size, k if cfg.use_landmarks else 0)
        self.fusion_enabled = False

    def reset_classifier(self, tag: int = 6) -> None:
        """Re-draw the character classification layer (stage-3 start)."""
        with seeded(self.cfg.seed, tag):
            self.char_head.cls.reset_parameters()

    @property
    def background_class(self) -> int:
        return self.cfg.alphabet_size

    def char_features(self, features, boxes, batch_index):
        """RoI features ``F_c`` (fc_size grid) and, if fusion is on, the patch ``H``."""
        f_c = extract_roi(features, boxes, batch_index, self.cfg.fc_size)
        h = None
        if self.fusion_enabled and self.cfg.gpm_active:
            h = extract_roi(features, boxes, batch_index, self.cfg.patch_size)
        return f_c, h

    def recognize(self, h: Optional[torch.Tensor], f_c: torch.Tensor):
        return recognize_character(h, f_c, self.gpm, self.grm, self.char_head, self.cfg.fusion if self.fusion_enabled else "none")


def recognize_character(
    h: Optional[torch.Tensor],
    f_c: torch.Tensor,
    gpm: Optional[LandmarkNet],
    grm: Optional[GraphReasoning],
    head: CharHead,
    fusion: str = "graph",
):
    """Class logits (R, A+1) and box deltas (R, 4) for character RoIs.

    ``fusion="none"`` is the baseline path ``head(F_c)``; the others fuse
    landmark information from ``h`` into ``F_c`` before the head.
    """
    if fusion == "none":
        return head(f_c)
    if fusion == "graph" and (grm is None or grm.num_landmarks == 0):
        return head(grm(f_c) if grm is not None else f_c)
    if any(p.requires_grad for p in gpm.parameters()):
        maps = gpm(h)
    else:
        # frozen landmark net: treat its maps as fixed, gradients still reach h through sampling
        with torch.no_grad():
            maps = gpm(h)
    if fusion == "sum":
        prior = F.interpolate(maps, size=f_c.shape[-2:], mode="bilinear", align_corners=False).mean(dim=1, keepdim=True)
        return head(f_c + prior)
    coords = soft_argmax(maps)
    h_k = extract_landmark_features(h, coords)
    if fusion == "concat":
        return head(f_c, extra=h_k.flatten(1))
    if fusion == "graph":
        return head(grm(f_c, h_k))
    raise ValueError(f"unknown fusion {fusion!r}")


def encode_boxes(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Regression targets from axis-aligned extents (x0, y0, x1, y1) of both."""
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    px, py = proposals[:, 0] + 0.5 * pw, proposals[:, 1] + 0.5 * ph
    gw, gh = targets[:, 2] - targets[:, 0], targets[:, 3] - targets[:, 1]
    gx, gy = targets[:, 0] + 0.5 * gw, targets[:, 1] + 0.5 * gh
    std = proposals.new_tensor(BOX_STD)
    return torch.stack([(gx - px) / pw, (gy - py) / ph, torch.log(gw / pw), torch.log(gh / ph)], dim=1) / std


def decode_boxes(proposals: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    d = deltas * deltas.new_tensor(BOX_STD)
    pw, ph = proposals[:, 2] - proposals[:, 0], proposals[:, 3] - proposals[:, 1]
    px, py = proposals[:, 0] + 0.5 * pw, proposals[:, 1] + 0.5 * ph
    cx, cy = px + d[:, 0] * pw, py + d[:, 1] * ph
    w, h = pw * torch.exp(d[:, 2].clamp(max=4.0)), ph * torch.exp(d[:, 3].clamp(max=4.0))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def rects_to_quads(rects: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = rects.unbind(-1)
    return torch.stack([torch.stack([x0, y0], -1), torch.stack([x1, y0], -1), torch.stack([x1, y1], -1), torch.stack([x0, y1], -1)], dim=-2)


def quads_to_rects(quads: torch.Tensor) -> torch.Tensor:
    lo, hi = quads.amin(dim=-2), quads.amax(dim=-2)
    return torch.cat([lo, hi], dim=-1)
