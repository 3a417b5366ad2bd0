"""
Inpainting prior configuration and request schemas.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from app.schemas.arrays import ArrayModel, BoolArray, Float32Array


class PriorConfig(BaseModel):
    """Sizes of the toy latent diffusion inpainter."""

    latent_channels: int = Field(4, ge=1)
    autoencoder_width: int = Field(32, ge=4)
    widths: Tuple[int, int, int] = Field((32, 64, 128), description="Denoiser channel widths per resolution")
    embed_dim: int = Field(64, ge=8)
    tokens: List[str] = Field(default_factory=lambda: ["inpaint", "texture"])
    timesteps: int = Field(1000, ge=10)
    beta_start: float = Field(1e-4, gt=0)
    beta_end: float = Field(2e-2, gt=0)

    @field_validator("widths", mode="before")
    @classmethod
    def split_widths(cls, v):
        if isinstance(v, str):
            return tuple(int(part) for part in v.split(","))
        return v

    @field_validator("tokens", mode="before")
    @classmethod
    def split_tokens(cls, v):
        if isinstance(v, str):
            return [part.strip() for part in v.split(",") if part.strip()]
        return v


class PriorManifest(BaseModel):
    """Sidecar JSON written next to a prior blob."""

    config: PriorConfig
    tokens: List[str]
    scene_tokens: List[str] = Field(default_factory=list)
    token_aliases: Dict[str, str] = Field(default_factory=dict)
    lora_rank: int = Field(0, ge=0)
    adapter_file: Optional[str] = None


class InpaintRequest(ArrayModel):
    """One inpainting call: image, mask, conditioning token, start timestep and seed."""

    image: Float32Array
    mask: BoolArray
    condition: str = "inpaint"
    t_start: int = Field(..., ge=0)
    n_ddim_steps: int = Field(20, ge=1)
    seed: int = 0
    image_id: int = 0


class TextureShift(BaseModel):
    """Oracle corruption: 3x3 blur mixed at `rho` plus a constant colour offset."""

    rho: float = Field(0.3, ge=0, le=1)
    offset: Tuple[float, float, float] = (0.02, -0.01, 0.01)

    @field_validator("offset", mode="before")
    @classmethod
    def split_offset(cls, v):
        if isinstance(v, str):
            return tuple(float(part) for part in v.split(","))
        return v


class OracleConfig(BaseModel):
    kind: Literal["oracle"] = "oracle"
    sigma_incon: float = Field(0.05, ge=0)
    shift: TextureShift = Field(default_factory=TextureShift)
