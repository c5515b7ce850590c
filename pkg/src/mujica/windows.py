"""Non-overlapping window partitioning and relative position bias."""

from __future__ import annotations

import torch
from torch import nn

__all__ = ["window_partition", "window_reverse", "RelativePositionBias"]


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split ``(B, H, W, C)`` into ``(B * H/S * W/S, S*S, C)`` windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ValueError(f"window size {window} does not divide feature size {h}x{w}")
    x = x.view(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise ValueError(f"window size {window} does not divide feature size {h}x{w}")
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // window) * (w // window))
    x = windows.reshape(b, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class RelativePositionBias(nn.Module):
    """Swin-style learnable bias indexed by the in-window offset between two tokens."""

    def __init__(self, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        nn.init.trunc_normal_(self.table, std=0.02)

        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
        coords = coords.flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
        rel = rel + (window - 1)
        index = rel[..., 0] * (2 * window - 1) + rel[..., 1]
        self.register_buffer("index", index, persistent=False)

    def forward(self) -> torch.Tensor:
        n = self.window * self.window
        return self.table[self.index.view(-1)].view(n, n, self.heads).permute(2, 0, 1)
