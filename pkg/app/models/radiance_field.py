"""
Hash-grid radiance field and proposal density fields.
"""

import math
from typing import List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from app.schemas.field import FieldConfig

HASH_PRIMES = (1, 2654435761, 805459861)

# corner offsets in (x, y, z) order, bit i of the corner id selects axis i
_CORNERS = [(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)]


class HashEncoding(nn.Module):
    """
    Multi-resolution hash grid over [0, 1]^3.

    Levels whose full vertex grid fits in the table are indexed densely,
    the rest with the XOR-of-primes spatial hash.
    """

    def __init__(
        self,
        levels: int,
        table_size: int,
        features: int,
        base_resolution: int,
        max_resolution: int,
        init_scale: float = 1e-4,
    ):
        super().__init__()
        self.levels = levels
        self.table_size = table_size
        self.features = features
        growth = math.exp((math.log(max_resolution) - math.log(base_resolution)) / max(levels - 1, 1))
        # epsilon keeps exact powers (base 4, max 8) from flooring one short
        self.resolutions: List[int] = [int(math.floor(base_resolution * growth**level + 1e-6)) for level in range(levels)]
        self.tables = nn.Parameter((torch.rand(levels, table_size, features) * 2.0 - 1.0) * init_scale)

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    def grid_index(self, level: int, corners: torch.Tensor) -> torch.Tensor:
        """Table row for integer vertex coordinates (..., 3) at one level."""
        n = self.resolutions[level] + 1
        if n**3 <= self.table_size:
            return corners[..., 0] + corners[..., 1] * n + corners[..., 2] * n * n
        hashed = torch.bitwise_xor(corners[..., 0] * HASH_PRIMES[0], corners[..., 1] * HASH_PRIMES[1])
        hashed = torch.bitwise_xor(hashed, corners[..., 2] * HASH_PRIMES[2])
        return torch.bitwise_and(hashed, self.table_size - 1)

    def forward(self, unit_points: torch.Tensor) -> torch.Tensor:
        """Encode points in [0, 1]^3, (..., 3) -> (..., L * F)."""
        encoded = []
        for level, resolution in enumerate(self.resolutions):
            scaled = unit_points * resolution
            base = torch.floor(scaled).clamp(0, resolution - 1)
            frac = scaled - base
            base = base.long()
            table = self.tables[level]
            value = torch.zeros(unit_points.shape[:-1] + (self.features,), dtype=table.dtype, device=table.device)
            for offset in _CORNERS:
                corner = base + torch.tensor(offset, device=base.device)
                weight = torch.ones_like(frac[..., 0])
                for axis in range(3):
                    weight = weight * (frac[..., axis] if offset[axis] else 1.0 - frac[..., axis])
                value = value + weight[..., None] * table[self.grid_index(level, corner)]
            encoded.append(value)
        return torch.cat(encoded, dim=-1)


def _direction_encoding(directions: torch.Tensor, n_frequencies: int = 2) -> torch.Tensor:
    parts = [directions]
    for k in range(n_frequencies):
        parts.append(torch.sin((2.0**k) * math.pi * directions))
        parts.append(torch.cos((2.0**k) * math.pi * directions))
    return torch.cat(parts, dim=-1)


class ProposalField(nn.Module):
    """Density-only field used to build proposal histograms."""

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.encoding = HashEncoding(
            config.proposal_levels,
            config.proposal_table_size,
            config.features,
            config.base_resolution,
            max(config.base_resolution, config.max_resolution // 2),
        )
        self.mlp = nn.Sequential(
            nn.Linear(self.encoding.out_dim, config.proposal_hidden),
            nn.ReLU(),
            nn.Linear(config.proposal_hidden, 1),
        )

    def density(self, unit_points: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.mlp(self.encoding(unit_points))[..., 0] - 1.0)


class RadianceField(nn.Module):
    """Main field: density from the hash features, colour conditioned on view direction."""

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.encoding = HashEncoding(
            config.levels, config.table_size, config.features, config.base_resolution, config.max_resolution
        )
        self.density_mlp = nn.Sequential(
            nn.Linear(self.encoding.out_dim, config.hidden),
            nn.ReLU(),
            nn.Linear(config.hidden, 1 + config.geo_features),
        )
        self.color_mlp = nn.Sequential(
            nn.Linear(config.geo_features + 15, config.hidden),
            nn.ReLU(),
            nn.Linear(config.hidden, 3),
        )

    def forward(self, unit_points: torch.Tensor, directions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = self.density_mlp(self.encoding(unit_points))
        sigma = F.softplus(hidden[..., 0] - 1.0)
        dirs = _direction_encoding(directions).expand(hidden.shape[:-1] + (15,))
        rgb = torch.sigmoid(self.color_mlp(torch.cat([hidden[..., 1:], dirs], dim=-1)))
        return sigma, rgb


class NerfModel(nn.Module):
    """Radiance field, two proposal fields and a learnable background colour."""

    def __init__(self, config: FieldConfig):
        super().__init__()
        self.config = config
        self.field = RadianceField(config)
        self.proposals = nn.ModuleList([ProposalField(config), ProposalField(config)])
        # logit 0 -> mid-gray
        self.background_logit = nn.Parameter(torch.zeros(3))

    @property
    def background(self) -> torch.Tensor:
        return torch.sigmoid(self.background_logit)

    def hash_tables(self) -> List[torch.Tensor]:
        return [self.field.encoding.tables] + [p.encoding.tables for p in self.proposals]
