"""Geometric perturbations for the landmark equivariance objective.

Coordinates are normalized to ``[0, 1]^2`` and ordered ``(x, y)`` with ``x``
along columns and ``y`` along rows (y grows downward). A transform rotates and
scales about the patch center ``(0.5, 0.5)`` and then translates::

    g(p) = s * R(theta) @ (p - c) + c + t

``warp_patch(H, g)`` resamples ``H`` at ``g(v)`` for every output location
``v``, so a structure found at ``u`` in ``H`` appears at ``g^-1(u)`` in the
warped patch and ``||u - g(v)||`` vanishes for equivariant landmarks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

PATCH_CENTER = 0.5


@dataclass(frozen=True)
class Transform:
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scaling: float = 1.0

    def __post_init__(self):
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0.0 and self.translation == (0.0, 0.0) and self.scaling == 1.0

    def linear(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scaling * np.array([[c, -s], [s, c]])

    def matrix(self) -> np.ndarray:
        """2x3 affine matrix ``[A | b]`` acting on normalized ``(x, y)``."""
        a = self.linear()
        center = np.full(2, PATCH_CENTER)
        b = center - a @ center + np.asarray(self.translation)
        return np.concatenate([a, b[:, None]], axis=1)

    def inverse(self) -> "Transform":
        inv_scale = 1.0 / self.scaling
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        shift = (-inv_scale * (c * tx - s * ty), -inv_scale * (s * tx + c * ty))
        return Transform(rotation=-self.rotation, translation=shift, scaling=inv_scale)


def _check_interval(name: str, interval: tuple[float, float]) -> tuple[float, float]:
    lo, hi = float(interval[0]), float(interval[1])
    if lo > hi:
        raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return lo, hi


@dataclass(frozen=True)
class TransformRanges:
    rotation_range: tuple[float, float] = (0.0, 2 * math.pi)
    translation_range: tuple[float, float] = (-0.2, 0.2)
    scaling_range: tuple[float, float] = (0.7, 1.3)

    def __post_init__(self):
        for name in ("rotation_range", "translation_range", "scaling_range"):
            object.__setattr__(self, name, _check_interval(name, getattr(self, name)))
        if self.scaling_range[0] <= 0:
            raise ValueError(f"scaling_range must lie in (0, inf), got {self.scaling_range}")

    @classmethod
    def identity(cls) -> "TransformRanges":
        return cls((0.0, 0.0), (0.0, 0.0), (1.0, 1.0))


def sample_transform(ranges: TransformRanges, rng_seed: Union[int, np.random.Generator]) -> Transform:
    """Draw each component uniformly from its interval."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    rotation = rng.uniform(*ranges.rotation_range)
    tx, ty = rng.uniform(*ranges.translation_range, size=2)
    scaling = rng.uniform(*ranges.scaling_range)
    return Transform(float(rotation), (float(tx), float(ty)), float(scaling))


def sample_transforms(ranges: TransformRanges, n: int, rng_seed) -> list[Transform]:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return [sample_transform(ranges, rng) for _ in range(n)]


def map_coords(t: Transform, coords):
    """Apply ``g`` to normalized ``(x, y)`` coordinates of shape ``(..., 2)``.

    Torch inputs stay on the autograd graph; anything else is handled as a
    float64 numpy array.
    """
    m = t.matrix()
    if isinstance(coords, torch.Tensor):
        m = torch.as_tensor(m, dtype=coords.dtype, device=coords.device)
        return coords @ m[:, :2].T + m[:, 2]
    coords = np.asarray(coords, dtype=np.float64)
    return coords @ m[:, :2].T + m[:, 2]


def affine_stack(ts: Union[Transform, Sequence[Transform]], batch: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Stack per-sample affine matrices into a ``(batch, 2, 3)`` tensor."""
    if isinstance(ts, Transform):
        ts = [ts] * batch
    if len(ts) != batch:
        raise ValueError(f"expected {batch} transforms, got {len(ts)}")
    return torch.as_tensor(np.stack([t.matrix() for t in ts]), dtype=dtype, device=device)


def bilinear_sample(feat: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Sample ``feat`` (B, C, H, W) at pixel-index points ``xy`` (B, P, 2).

    ``xy[..., 0]`` indexes columns and ``xy[..., 1]`` rows; integer points
    return the stored value exactly. Neighbors outside the map contribute
    zero. Differentiable in both ``feat`` and ``xy``. Returns (B, P, C).
    """
    b, c, h, w = feat.shape
    x, y = xy[..., 0], xy[..., 1]
    x0f, y0f = torch.floor(x), torch.floor(y)
    fx, fy = x - x0f, y - y0f
    x0, y0 = x0f.long(), y0f.long()
    flat = feat.reshape(b, c, h * w)
    out = 0
    for dx, dy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(1).expand(b, c, -1)
        vals = flat.gather(2, idx)
        out = out + vals * (wgt * inside.to(feat.dtype)).unsqueeze(1)
    return out.transpose(1, 2)


def pixel_grid(size: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """``(size*size, 2)`` pixel-index ``(x, y)`` grid in row-major order."""
    r = torch.arange(size, dtype=dtype, device=device)
    yy, xx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)


def cell_centers(size: int, dtype=torch.float64, device=None) -> torch.Tensor:
    """Normalized centers ``((j + 0.5) / size, (i + 0.5) / size)`` of a square grid."""
    return (pixel_grid(size, dtype, device) + 0.5) / size


def warp_patch(patch: torch.Tensor, t: Union[Transform, Sequence[Transform]]) -> torch.Tensor:
    """Bilinearly resample a square patch so that ``out(v) = patch(g(v))``.

    ``patch`` is ``(C, S, S)`` or ``(B, C, S, S)``; ``t`` is one transform or
    one per batch element. Samples falling outside the patch read zero.
    """
    squeeze = patch.dim() == 3
    if squeeze:
        patch = patch.unsqueeze(0)
    if patch.dim() != 4:
        raise ValueError(f"patch must be (C, S, S) or (B, C, S, S), got shape {tuple(patch.shape)}")
    b, _, h, w = patch.shape
    if h != w:
        raise ValueError(f"patch must be spatially square, got {h}x{w}")
    size = h
    mats = affine_stack(t, b, dtype=torch.float64, device=patch.device)
    a, shift = mats[:, :, :2], mats[:, :, 2]
    # pixel-space form of g: p_src = A p + (0.5 A 1 + S b - 0.5); exact for the identity
    offset = 0.5 * a.sum(dim=2) + size * shift - 0.5
    grid = pixel_grid(size, torch.float64, patch.device)
    src = torch.einsum("bij,pj->bpi", a, grid) + offset[:, None, :]
    out = bilinear_sample(patch, src.to(patch.dtype))
    out = out.transpose(1, 2).reshape(patch.shape)
    return out[0] if squeeze else out
