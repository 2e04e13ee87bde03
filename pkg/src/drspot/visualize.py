"""Landmark overlays: character crops with one marker per landmark at its hard-argmax cell."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .gpm import hard_argmax
from .spotter.data import SpotDataset, image_tensor
from .spotter.model import DRSpotter, extract_roi, rects_to_quads


def landmark_palette(k: int) -> list[tuple[int, int, int]]:
    return [tuple(int(255 * c) for c in colorsys.hsv_to_rgb(i / k, 0.9, 1.0)) for i in range(k)]


@torch.no_grad()
def character_landmarks(model: DRSpotter, data: SpotDataset, index: int) -> np.ndarray:
    """Hard-argmax landmark positions (n_chars, K, 2), normalized to each character box."""
    model.eval()
    feats = model.backbone(image_tensor(data.images[index : index + 1]))
    rects = torch.tensor(data.char_rects[index], dtype=torch.float32).reshape(-1, 4)
    if len(rects) == 0:
        return np.zeros((0, model.cfg.K, 2))
    h = extract_roi(feats, rects_to_quads(rects), torch.zeros(len(rects), dtype=torch.long), model.cfg.patch_size)
    return hard_argmax(model.gpm(h)).numpy()


def draw_landmarks(crop: np.ndarray, coords: np.ndarray, scale: int = 4, radius: int = 2) -> Image.Image:
    """Upscale a grayscale crop and mark each normalized coordinate with its palette color."""
    img = Image.fromarray(crop).convert("RGB")
    img = img.resize((max(1, img.width * scale), max(1, img.height * scale)), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for (x, y), color in zip(coords, landmark_palette(len(coords))):
        px = min(max(x * img.width, radius), img.width - 1 - radius)
        py = min(max(y * img.height, radius), img.height - 1 - radius)
        draw.ellipse([px - radius, py - radius, px + radius, py + radius], outline=color, fill=color)
    return img


def landmark_overlays(model: DRSpotter, data: SpotDataset, out_dir, scale: int = 4) -> list[Path]:
    """Write ``img{i}_char{j}.png`` per ground-truth character; PNG keeps it lossless."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(len(data)):
        coords = character_landmarks(model, data, i)
        image = data.images[i, 0].numpy()
        for j, (rect, pts) in enumerate(zip(data.char_rects[i], coords)):
            x0, y0, x1, y1 = np.round(rect).astype(int)
            crop = image[max(y0, 0) : max(y1, y0 + 1), max(x0, 0) : max(x1, x0 + 1)]
            path = out / f"img{i:04d}_char{j:02d}.png"
            draw_landmarks(crop, pts, scale).save(path, format="PNG")
            paths.append(path)
    return paths
