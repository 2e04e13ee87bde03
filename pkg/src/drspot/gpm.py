"""Geometric prior: unsupervised landmark detection on character feature patches.

A three-layer convolutional net turns a ``(D, S, S)`` feature patch into ``K``
spatial probability maps at half resolution. Landmarks are the soft-argmax of
each map and landmark features are bilinear samples of the patch at those
points. Training needs no labels: the maps of a patch and of a randomly
warped copy must agree under the warp (alignment loss) while distinct
channels must occupy distinct pooled cells (diversity loss).

Map coordinates use normalized cell centers ``(j + 0.5) / S``. Patch sampling
uses the corner-aligned convention ``j / (S - 1)`` so that grid points map
exactly onto stored features.
"""

from __future__ import annotations

from typing import Callable, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .transforms import (
    Transform,
    TransformRanges,
    affine_stack,
    bilinear_sample,
    cell_centers,
    sample_transforms,
    warp_patch,
)

DEFAULT_LAMBDA = 50.0
DEFAULT_K = 16
MASS_TOLERANCE = 1e-3


class LandmarkNet(nn.Module):
    """3x3 conv (stride 2) -> BN -> ReLU -> 3x3 conv -> BN -> ReLU -> 3x3 conv -> spatial softmax."""

    def __init__(self, in_channels: int, num_landmarks: int = DEFAULT_K, hidden: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.num_landmarks = num_landmarks
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(hidden)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(hidden)
        self.conv3 = nn.Conv2d(hidden, num_landmarks, 3, stride=1, padding=1)

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if h.dim() != 4 or h.shape[1] != self.in_channels or h.shape[2] != h.shape[3]:
            raise ValueError(
                f"expected patch (batch, channels={self.in_channels}, S, S), got {tuple(h.shape)}"
            )
        x = F.relu(self.bn1(self.conv1(h)))
        x = F.relu(self.bn2(self.conv2(x)))
        return self.conv3(x)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return spatial_softmax(self.logits(h))


def spatial_softmax(logits: torch.Tensor) -> torch.Tensor:
    b, k, h, w = logits.shape
    return F.softmax(logits.reshape(b, k, h * w), dim=-1).reshape(b, k, h, w)


def landmark_net_forward(h: torch.Tensor, net: LandmarkNet) -> torch.Tensor:
    """Landmark maps ``(B, K, S/2, S/2)`` for patches ``(B, D, S, S)``."""
    return net(h)


def _batched(m: torch.Tensor) -> torch.Tensor:
    if m.dim() == 3:
        return m.unsqueeze(0)
    if m.dim() != 4:
        raise ValueError(f"landmark map must be (K, S, S) or (B, K, S, S), got {tuple(m.shape)}")
    return m


def soft_argmax(m: torch.Tensor) -> torch.Tensor:
    """Expected normalized ``(x, y)`` per channel: ``(B, K, 2)`` (or ``(K, 2)``)."""
    single = m.dim() == 3
    m = _batched(m)
    b, k, h, w = m.shape
    if h != w:
        raise ValueError(f"landmark map must be square, got {h}x{w}")
    centers = cell_centers(h, dtype=m.dtype, device=m.device)
    coords = m.reshape(b, k, h * w) @ centers
    return coords[0] if single else coords


def hard_argmax(m: torch.Tensor) -> torch.Tensor:
    """Normalized cell center of each channel's maximum; visualization only."""
    single = m.dim() == 3
    m = _batched(m)
    b, k, h, w = m.shape
    idx = m.reshape(b, k, -1).argmax(dim=-1)
    coords = torch.stack([(idx % w).to(m.dtype), (idx // w).to(m.dtype)], dim=-1)
    coords = (coords + 0.5) / h
    return coords[0] if single else coords


def extract_landmark_features(h: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Bilinear features of ``h`` (B, D, S, S) at normalized ``coords`` (B, K, 2) -> (B, K, D)."""
    single = h.dim() == 3
    if single:
        h, coords = h.unsqueeze(0), coords.unsqueeze(0)
    size = h.shape[-1]
    feats = bilinear_sample(h, coords * (size - 1))
    return feats[0] if single else feats


def _transformed_centers(size: int, ts, batch: int, dtype, device) -> tuple[torch.Tensor, torch.Tensor]:
    centers = cell_centers(size, dtype=dtype, device=device)
    mats = affine_stack(ts, batch, dtype=dtype, device=device)
    g_centers = torch.einsum("bij,pj->bpi", mats[:, :, :2], centers) + mats[:, None, :, 2]
    return centers, g_centers


def _pair(m: torch.Tensor, m_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    m, m_hat = _batched(m), _batched(m_hat)
    if m.shape != m_hat.shape:
        raise ValueError(f"map shapes differ: {tuple(m.shape)} vs {tuple(m_hat.shape)}")
    return m, m_hat


def alignment_loss_quadratic(m: torch.Tensor, m_hat: torch.Tensor, t: Union[Transform, Sequence[Transform]]) -> torch.Tensor:
    """Reference O((HW)^2) form: mean over channels of E[||u - g(v)||^2]."""
    m, m_hat = _pair(m, m_hat)
    b, k, s, _ = m.shape
    centers, g_centers = _transformed_centers(s, t, b, m.dtype, m.device)
    dx = centers[None, :, None, 0] - g_centers[:, None, :, 0]
    dy = centers[None, :, None, 1] - g_centers[:, None, :, 1]
    dist = dx * dx + dy * dy  # (B, P, P)
    p = m.reshape(b, k, -1)
    q = m_hat.reshape(b, k, -1)
    per_channel = ((p @ dist) * q).sum(-1)
    return per_channel.mean()


def alignment_loss(m: torch.Tensor, m_hat: torch.Tensor, t: Union[Transform, Sequence[Transform]]) -> torch.Tensor:
    """Linear-time alignment loss; requires every channel to carry unit mass."""
    m, m_hat = _pair(m, m_hat)
    b, k, s, _ = m.shape
    p = m.reshape(b, k, -1)
    q = m_hat.reshape(b, k, -1)
    for name, mass in (("M", p.sum(-1)), ("M_hat", q.sum(-1))):
        worst = (mass - 1).abs().max().item()
        if worst > MASS_TOLERANCE:
            raise ValueError(f"{name} channels must sum to 1 (max deviation {worst:.3g})")
    centers, g_centers = _transformed_centers(s, t, b, m.dtype, m.device)
    second_u = p @ (centers**2).sum(-1)
    second_v = torch.einsum("bkv,bv->bk", q, (g_centers**2).sum(-1))
    mean_u = p @ centers
    mean_v = torch.einsum("bkv,bvi->bki", q, g_centers)
    per_channel = second_u + second_v - 2 * (mean_u * mean_v).sum(-1)
    return per_channel.mean()


def pool_mass(m: torch.Tensor, pool_cell: int = 4) -> torch.Tensor:
    """Block-sum each channel over ``pool_cell`` squares, zero-padding right/bottom edges."""
    m = _batched(m)
    h, w = m.shape[-2:]
    pad_h, pad_w = (-h) % pool_cell, (-w) % pool_cell
    if pad_h or pad_w:
        m = F.pad(m, (0, pad_w, 0, pad_h))
    return F.avg_pool2d(m, pool_cell) * pool_cell**2


def diversity_loss(m: torch.Tensor, pool_cell: int = 4) -> torch.Tensor:
    """``K - sum_u max_r P(u, r)`` on mass-pooled maps, averaged over the batch."""
    pooled = pool_mass(m, pool_cell)
    k = pooled.shape[1]
    return (k - pooled.max(dim=1).values.sum(dim=(-2, -1))).mean()


def gpm_loss(
    net: Callable[[torch.Tensor], torch.Tensor],
    h: torch.Tensor,
    transforms: Sequence[Transform],
    lam: float = DEFAULT_LAMBDA,
    use_align: bool = True,
    use_div: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """``L_align + lam * L_div`` for patches ``h`` and their warped copies."""
    b = h.shape[0]
    h_hat = warp_patch(h, transforms)
    maps = net(torch.cat([h, h_hat], dim=0))
    m, m_hat = maps[:b], maps[b:]
    align = alignment_loss(m, m_hat, transforms) if use_align else m.new_zeros(())
    div = diversity_loss(m) if use_div else m.new_zeros(())
    for name, value in (("align", align), ("div", div)):
        if not torch.isfinite(value):
            raise FloatingPointError(f"non-finite {name} term: {value.item()}")
    total = align + lam * div
    return total, {"align": align.item(), "div": div.item(), "total": total.item()}


def gpm_train_step(
    h: torch.Tensor,
    net: nn.Module,
    ranges: TransformRanges,
    lam: float = DEFAULT_LAMBDA,
    rng_seed=0,
    use_align: bool = True,
    use_div: bool = True,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Sample one transform per patch, evaluate the landmark loss, backpropagate.

    Returns the loss and a name -> gradient mapping; the caller owns the
    optimizer step.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    ts = sample_transforms(ranges, h.shape[0], rng)
    net.zero_grad(set_to_none=True)
    loss, _ = gpm_loss(net, h, ts, lam, use_align, use_div)
    loss.backward()
    grads = {name: p.grad.detach().clone() for name, p in net.named_parameters() if p.grad is not None}
    return loss.detach(), grads


def landmark_displacement(net: nn.Module, h: torch.Tensor, transforms: Sequence[Transform]) -> torch.Tensor:
    """Per-sample mean ``||u_r - g(v_r)||`` between soft-argmax landmarks of ``h`` and its warp."""
    b = h.shape[0]
    with torch.no_grad():
        maps = net(torch.cat([h, warp_patch(h, transforms)], dim=0))
        u = soft_argmax(maps[:b])
        v = soft_argmax(maps[b:])
        mats = affine_stack(transforms, b, dtype=u.dtype, device=u.device)
        gv = torch.einsum("bij,bkj->bki", mats[:, :, :2], v) + mats[:, None, :, 2]
        return (u - gv).norm(dim=-1).mean(dim=-1)


def landmarks_in_distinct_cells(m: torch.Tensor, pool_cell: int = 4) -> torch.Tensor:
    """Per-sample flag: every channel's hard maximum falls in its own pooled cell."""
    m = _batched(m)
    b, k, h, w = m.shape
    idx = m.reshape(b, k, -1).argmax(-1)
    rows, cols = idx // w, idx % w
    cells_w = -(-w // pool_cell)
    cell = (rows // pool_cell) * cells_w + cols // pool_cell
    return torch.tensor([len(set(c.tolist())) == k for c in cell])
