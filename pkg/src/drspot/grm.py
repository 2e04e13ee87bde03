"""Graph reasoning over character grid nodes and landmark nodes.

Character features ``F_c`` (a ``g x g`` grid, ``L = g*g`` positions) and
landmark features ``H_k`` (``K`` points) are projected into an interaction
space, concatenated into one node set, updated by a graph convolution
``U = (I - A) V W_r``, and the character nodes are projected back onto the
grid with the transpose of their projection weights.

All maps here are 1x1 convolutions, written as right-multiplication by
``(in, out)`` matrices on row-major ``(positions, channels)`` features.
"""

from __future__ import annotations

from typing import Optional

import torch
from torch import nn


def project(
    x: torch.Tensor, w_theta: torch.Tensor, w_psi: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Project ``x`` (B, L, C) to nodes ``Z`` (B, N, C').

    ``W_p = theta(x)^T`` (B, N, L) holds data-dependent node-assignment
    weights and ``Z = W_p @ psi(x)``. Both are returned so the reprojection
    can reuse ``W_p``.
    """
    if x.shape[-1] != w_theta.shape[0] or x.shape[-1] != w_psi.shape[0]:
        raise ValueError(
            f"channel mismatch: x has C={x.shape[-1]}, theta expects {w_theta.shape[0]}, psi expects {w_psi.shape[0]}"
        )
    w_p = (x @ w_theta).transpose(-1, -2)
    z = w_p @ (x @ w_psi)
    return z, w_p


def graph_reason(v: torch.Tensor, adjacency: torch.Tensor, w_state: torch.Tensor) -> torch.Tensor:
    """``U = (I - A) V W_r``: node-direction mixing then channel-direction update."""
    if adjacency.shape != (v.shape[-2], v.shape[-2]):
        raise ValueError(f"adjacency {tuple(adjacency.shape)} does not match {v.shape[-2]} nodes")
    u = (v - adjacency @ v) @ w_state
    if not torch.isfinite(u).all():
        raise FloatingPointError("non-finite values after graph reasoning")
    return u


def reproject(v2: torch.Tensor, w_p: torch.Tensor, w_sigma: torch.Tensor) -> torch.Tensor:
    """``Y = sigma(W_p^T @ V'')``: (B, N_c, C') nodes back to (B, L, C) positions."""
    if w_p.shape[-2] != v2.shape[-2]:
        raise ValueError(f"projection weights cover {w_p.shape[-2]} nodes, got {v2.shape[-2]}")
    return (w_p.transpose(-1, -2) @ v2) @ w_sigma


class GraphReasoning(nn.Module):
    """Fuse a ``(B, C, g, g)`` character map with ``(B, K, C)`` landmark features.

    The output is ``F_c + Y``. Adjacency and state-update weights start at
    zero, so an untrained module is the identity on ``F_c``.

    Node features are averages rather than sums over their positions. Both
    inputs are divided by the per-sample RMS of ``F_c`` before projection and
    ``Y`` is multiplied back by it. The projection is data dependent, so
    without this ``Y`` grows with the cube of the feature scale.
    """

    eps = 1e-6

    def __init__(self, channels: int, grid_size: int = 14, num_landmarks: int = 16):
        super().__init__()
        self.channels = channels
        self.grid_size = grid_size
        self.num_landmarks = num_landmarks
        positions = grid_size * grid_size
        nodes = positions + num_landmarks
        self.theta_c = nn.Parameter(torch.randn(channels, positions) / (channels * positions) ** 0.5)
        self.psi_c = nn.Parameter(torch.randn(channels, channels) / channels**0.5)
        if num_landmarks:
            self.theta_k = nn.Parameter(torch.randn(channels, num_landmarks) / (channels * num_landmarks) ** 0.5)
            self.psi_k = nn.Parameter(torch.randn(channels, channels) / channels**0.5)
        self.adjacency = nn.Parameter(torch.zeros(nodes, nodes))
        self.w_state = nn.Parameter(torch.zeros(channels, channels))
        self.w_sigma = nn.Parameter(torch.randn(channels, channels) / channels**0.5)

    def forward(self, f_c: torch.Tensor, h_k: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, c, gh, gw = f_c.shape
        if c != self.channels or gh != self.grid_size or gw != self.grid_size:
            raise ValueError(
                f"F_c must be (B, {self.channels}, {self.grid_size}, {self.grid_size}), got {tuple(f_c.shape)}"
            )
        scale = f_c.pow(2).mean(dim=(1, 2, 3), keepdim=True).add(self.eps).sqrt()
        x_c = (f_c / scale).flatten(2).transpose(1, 2)
        try:
            z_c, w_p = project(x_c, self.theta_c, self.psi_c)
            nodes = [z_c / (gh * gw)]
            if self.num_landmarks:
                if h_k is None or h_k.shape[1:] != (self.num_landmarks, self.channels):
                    got = None if h_k is None else tuple(h_k.shape)
                    raise ValueError(f"H_k must be (B, {self.num_landmarks}, {self.channels}), got {got}")
                z_k, _ = project(h_k / scale.view(b, 1, 1), self.theta_k, self.psi_k)
                nodes.append(z_k / self.num_landmarks)
        except ValueError as exc:
            raise ValueError(f"projection: {exc}") from exc
        v = torch.cat(nodes, dim=1)
        try:
            u = graph_reason(v, self.adjacency, self.w_state)
        except (ValueError, FloatingPointError) as exc:
            raise type(exc)(f"graph reasoning: {exc}") from exc
        v2 = u[:, : gh * gw]
        y = reproject(v2, w_p, self.w_sigma)
        return f_c + scale * y.transpose(1, 2).reshape(b, c, gh, gw)
