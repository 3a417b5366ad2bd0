"""
Frozen, fixed-seed feature extractors used by the proxy metrics and the
optional perceptual training term.
"""

import math
from typing import List, Sequence

import torch
import torch.nn.functional as F
from torch import nn

IMAGE_WIDTHS = (16, 32, 64, 128)
VIDEO_WIDTHS = (8, 16, 32)


def _seeded_init(modules: Sequence[nn.Module], seed: int) -> None:
    generator = torch.Generator().manual_seed(seed)
    for module in modules:
        fan_in = module.weight[0].numel()
        with torch.no_grad():
            module.weight.copy_(torch.randn(module.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
            module.bias.zero_()


class FeatureExtractor(nn.Module):
    """Four-stage random conv pyramid; stage i>0 halves the resolution."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = IMAGE_WIDTHS):
        super().__init__()
        self.seed = seed
        self.widths = tuple(widths)
        layers, in_ch = [], 3
        for i, width in enumerate(self.widths):
            layers.append(nn.Conv2d(in_ch, width, 3, stride=1 if i == 0 else 2, padding=1, padding_mode="reflect"))
            in_ch = width
        self.stages = nn.ModuleList(layers)
        _seeded_init(self.stages, seed)
        self.requires_grad_(False)
        self.eval()

    @property
    def feature_dim(self) -> int:
        return sum(self.widths)

    def forward(self, images: torch.Tensor) -> List[torch.Tensor]:
        """(B, 3, H, W) in [0, 1] -> per-stage feature maps."""
        x = images * 2.0 - 1.0
        features = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), 0.2)
            features.append(x)
        return features

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        """(B, feature_dim) spatially averaged features."""
        return torch.cat([f.mean(dim=(-2, -1)) for f in self(images)], dim=1)


class VideoFeatureExtractor(nn.Module):
    """Spatiotemporal counterpart of `FeatureExtractor` over (B, 3, T, H, W) clips."""

    def __init__(self, seed: int = 0, widths: Sequence[int] = VIDEO_WIDTHS):
        super().__init__()
        self.seed = seed
        self.widths = tuple(widths)
        layers, in_ch = [], 3
        for i, width in enumerate(self.widths):
            stride = (1, 1, 1) if i == 0 else (2, 2, 2)
            layers.append(nn.Conv3d(in_ch, width, 3, stride=stride, padding=1))
            in_ch = width
        self.stages = nn.ModuleList(layers)
        _seeded_init(self.stages, seed)
        self.requires_grad_(False)
        self.eval()

    def pooled(self, clips: torch.Tensor) -> torch.Tensor:
        x = clips * 2.0 - 1.0
        pooled = []
        for stage in self.stages:
            x = F.leaky_relu(stage(x), 0.2)
            pooled.append(x.mean(dim=(-3, -2, -1)))
        return torch.cat(pooled, dim=1)


def _normalize(features: torch.Tensor) -> torch.Tensor:
    return features / (features.pow(2).sum(dim=1, keepdim=True).sqrt() + 1e-10)


def perceptual_distance(extractor: FeatureExtractor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image sum over stages of the mean squared difference of channel-normalized features."""
    total = a.new_zeros(a.shape[0])
    for fa, fb in zip(extractor(a), extractor(b)):
        total = total + (_normalize(fa) - _normalize(fb)).pow(2).flatten(start_dim=1).mean(dim=1)
    return total
