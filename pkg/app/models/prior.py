"""
Toy latent diffusion inpainter: tiny autoencoder, conditional denoiser and a
named conditioning table.
"""

import math
from typing import Dict, List

import torch
import torch.nn.functional as F
from torch import nn

from app.schemas.prior import PriorConfig

DOWNSAMPLE = 4


def _conv(in_ch: int, out_ch: int, kernel: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=(kernel - 1) // 2, padding_mode="circular")


class TinyAutoencoder(nn.Module):
    """Fully convolutional, circular padding, spatial downsample 4."""

    def __init__(self, latent_channels: int = 4, width: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            _conv(3, width, 3),
            nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1, padding_mode="circular"),
            nn.SiLU(),
            nn.Conv2d(2 * width, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            _conv(latent_channels, 2 * width, 3),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv(2 * width, width, 3),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            _conv(width, width, 3),
            nn.SiLU(),
            nn.Conv2d(width, 3, 1),
        )

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images * 2.0 - 1.0)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(latents))


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class DenoiserBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(min(8, out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """
    Two-level U-shaped epsilon predictor over (noisy latent, masked latent,
    latent mask), conditioned on the timestep and a conditioning vector.
    """

    def __init__(self, latent_channels: int, widths, embed_dim: int):
        super().__init__()
        w0, w1, w2 = widths
        emb_dim = 2 * embed_dim
        self.embed_dim = embed_dim
        self.time_proj = nn.Linear(embed_dim, emb_dim)
        self.cond_proj = nn.Linear(embed_dim, emb_dim)
        self.proj_in = nn.Conv2d(2 * latent_channels + 1, w0, 3, padding=1)
        self.block0 = DenoiserBlock(w0, w0, emb_dim)
        self.down1 = nn.Conv2d(w0, w1, 3, stride=2, padding=1)
        self.block1 = DenoiserBlock(w1, w1, emb_dim)
        self.down2 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.mid = DenoiserBlock(w2, w2, emb_dim)
        self.up2 = DenoiserBlock(w2 + w1, w1, emb_dim)
        self.up1 = DenoiserBlock(w1 + w0, w0, emb_dim)
        self.proj_out = nn.Conv2d(w0, latent_channels, 3, padding=1)

    def forward(
        self,
        noisy: torch.Tensor,
        masked_latent: torch.Tensor,
        latent_mask: torch.Tensor,
        t: torch.Tensor,
        condition: torch.Tensor,
    ) -> torch.Tensor:
        h_in, w_in = noisy.shape[-2:]
        pad_h, pad_w = (-h_in) % 4, (-w_in) % 4
        x = torch.cat([noisy, masked_latent, latent_mask], dim=1)
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        emb = F.silu(self.time_proj(timestep_embedding(t, self.embed_dim)) + self.cond_proj(condition))

        h0 = self.block0(self.proj_in(x), emb)
        h1 = self.block1(self.down1(h0), emb)
        h2 = self.mid(self.down2(h1), emb)
        u1 = self.up2(torch.cat([F.interpolate(h2, size=h1.shape[-2:], mode="nearest"), h1], dim=1), emb)
        u0 = self.up1(torch.cat([F.interpolate(u1, size=h0.shape[-2:], mode="nearest"), h0], dim=1), emb)
        return self.proj_out(F.silu(u0))[..., :h_in, :w_in]


# modules that receive low-rank adapters during per-scene customization
ADAPTER_TARGETS = ["time_proj", "cond_proj", "proj_in", "proj_out", "cond_table"]


class LatentInpaintPrior(nn.Module):
    """
    Autoencoder + denoiser + conditioning table.

    Per-scene customization adds entries to `scene_tokens` (or an alias when
    the adapter rank is 0) and low-rank adapters on `ADAPTER_TARGETS`.
    """

    def __init__(self, config: PriorConfig):
        super().__init__()
        self.prior_config = config
        self.autoencoder = TinyAutoencoder(config.latent_channels, config.autoencoder_width)
        self.denoiser = Denoiser(config.latent_channels, config.widths, config.embed_dim)
        self.cond_table = nn.Embedding(len(config.tokens), config.embed_dim)
        self.tokens: List[str] = list(config.tokens)
        self.scene_tokens = nn.ParameterDict()
        self.token_aliases: Dict[str, str] = {}
        self.lora_rank = 0

    def condition_vector(self, name: str, batch: int) -> torch.Tensor:
        name = self.token_aliases.get(name, name)
        if name in self.scene_tokens:
            return self.scene_tokens[name][None].expand(batch, -1)
        if name not in self.tokens:
            raise KeyError(name)
        device = next(self.autoencoder.parameters()).device
        index = torch.full((batch,), self.tokens.index(name), dtype=torch.long, device=device)
        return self.cond_table(index)

    def known_tokens(self) -> List[str]:
        return self.tokens + list(self.scene_tokens.keys()) + list(self.token_aliases.keys())
