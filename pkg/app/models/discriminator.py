"""
Residual patch discriminator with per-block feature taps.
"""

from typing import List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, downsample: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1, bias=False)
        self.downsample = downsample

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv2(F.leaky_relu(self.conv1(F.leaky_relu(x, 0.2)), 0.2))
        out = h + self.skip(x)
        if self.downsample:
            out = F.avg_pool2d(out, 2)
        return out


class PatchDiscriminator(nn.Module):
    """
    Stem conv, residual blocks (the last one keeps resolution) and a linear
    head on the mean-pooled final features. Forward returns (scores, taps)
    with one tap per residual block.
    """

    def __init__(self, patch_size: int = 16, widths: Sequence[int] = (32, 64, 128, 256)):
        super().__init__()
        self.patch_size = patch_size
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        channels = [widths[0]] + list(widths)
        self.blocks = nn.ModuleList(
            [
                ResidualBlock(channels[i], channels[i + 1], downsample=i < len(widths) - 1)
                for i in range(len(widths))
            ]
        )
        self.head = nn.Linear(widths[-1], 1)

    def zero_head(self) -> None:
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, patches: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        h = self.stem(patches)
        taps = []
        for block in self.blocks:
            h = block(h)
            taps.append(h)
        scores = self.head(F.leaky_relu(h, 0.2).mean(dim=(-2, -1)))[..., 0]
        return scores, taps

    def tap_shapes(self) -> List[Tuple[int, int, int]]:
        shapes, size = [], self.patch_size
        for block in self.blocks:
            if block.downsample:
                size //= 2
            shapes.append((block.conv2.out_channels, size, size))
        return shapes
