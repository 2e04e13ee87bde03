"""Landmark equivariance check: train the landmark net alone on glyph patches.

Patches are rendered glyphs turned into a fixed multi-scale feature stack
(Gaussian blurs at several widths, each max-normalized), standing in for
backbone features. The net is trained with the unsupervised landmark loss and
compared against its untrained initialization on held-out glyphs and
held-out transforms.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .glyphgen import make_style_pool, make_templates, render_glyph
from .gpm import DEFAULT_K, DEFAULT_LAMBDA, LandmarkNet, gpm_loss, landmark_displacement, landmarks_in_distinct_cells
from .transforms import TransformRanges, sample_transforms


@dataclass
class LandmarkExperimentConfig:
    n_train: int = 500
    n_test: int = 100
    alphabet_size: int = 50
    glyph_px: int = 48
    patch_size: int = 70
    sigmas: tuple = (0.0, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0)
    K: int = DEFAULT_K
    lam: float = DEFAULT_LAMBDA
    hidden: int = 32
    batch_size: int = 20
    lr: float = 1e-3
    max_epochs: int = 60
    time_budget: float = 600.0
    seed: int = 0
    ranges: dict = field(default_factory=lambda: asdict(TransformRanges()))


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable zero-padded Gaussian blur of (N, 1, H, W)."""
    if sigma == 0:
        return x
    r = int(3 * sigma)
    k = torch.exp(-torch.arange(-r, r + 1, dtype=x.dtype) ** 2 / (2 * sigma**2))
    k = k / k.sum()
    x = F.conv2d(F.pad(x, (r, r, 0, 0)), k.view(1, 1, 1, -1))
    return F.conv2d(F.pad(x, (0, 0, r, r)), k.view(1, 1, -1, 1))


def glyph_patches(cfg: LandmarkExperimentConfig) -> torch.Tensor:
    """(n_train + n_test, len(sigmas), S, S) feature patches of random glyphs in random styles."""
    templates = make_templates(cfg.alphabet_size, seed=cfg.seed)
    pool = make_style_pool({"simple": 8, "medium": 11, "hard": 6}, seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 5])
    rasters = []
    for _ in range(cfg.n_train + cfg.n_test):
        t = templates[int(rng.integers(len(templates)))]
        s = pool[int(rng.integers(len(pool)))]
        raster, _ = render_glyph(t, s, cfg.glyph_px, int(rng.integers(2**31)))
        rasters.append(raster)
    x = torch.tensor(np.stack(rasters), dtype=torch.float32)[:, None] / 255.0
    x = F.interpolate(x, size=(cfg.patch_size, cfg.patch_size), mode="bilinear", align_corners=False)
    feats = torch.cat([gaussian_blur(x, s) for s in cfg.sigmas], dim=1)
    return feats / feats.flatten(2).amax(-1)[..., None, None].clamp_min(1e-6)


def _measure(net, patches, transforms) -> dict:
    net.eval()
    with torch.no_grad():
        disp = landmark_displacement(net, patches, transforms).mean().item()
        distinct = landmarks_in_distinct_cells(net(patches)).float().mean().item()
    net.train()
    return {"displacement": disp, "distinct_fraction": distinct}


def run_landmark_experiment(cfg: LandmarkExperimentConfig = LandmarkExperimentConfig()) -> dict:
    """Train under the time budget; returns untrained/trained displacement and the distinct-cell fraction."""
    torch.manual_seed(cfg.seed)
    patches = glyph_patches(cfg)
    train, test = patches[: cfg.n_train], patches[cfg.n_train :]
    ranges = TransformRanges(**{k: tuple(v) for k, v in cfg.ranges.items()})
    held_out = sample_transforms(ranges, len(test), np.random.default_rng([cfg.seed, 99]))
    net = LandmarkNet(patches.shape[1], cfg.K, cfg.hidden)
    before = _measure(net, test, held_out)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 7])
    t0 = time.time()
    epochs = 0
    history = []
    while epochs < cfg.max_epochs and time.time() - t0 < cfg.time_budget:
        order = rng.permutation(len(train))
        terms_sum = np.zeros(2)
        for i in range(0, len(train), cfg.batch_size):
            batch = train[order[i : i + cfg.batch_size]]
            loss, terms = gpm_loss(net, batch, sample_transforms(ranges, len(batch), rng), cfg.lam)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            terms_sum += (terms["align"], terms["div"])
        epochs += 1
        history.append((terms_sum / -(-len(train) // cfg.batch_size)).tolist())
    after = _measure(net, test, held_out)
    return {
        "untrained_displacement": before["displacement"],
        "trained_displacement": after["displacement"],
        "displacement_reduction": 1 - after["displacement"] / before["displacement"],
        "untrained_distinct_fraction": before["distinct_fraction"],
        "distinct_fraction": after["distinct_fraction"],
        "epochs": epochs,
        "seconds": time.time() - t0,
        "loss_history": history,
    }
