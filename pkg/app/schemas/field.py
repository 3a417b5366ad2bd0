"""
Radiance field configuration.
"""

from typing import Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FieldConfig(BaseModel):
    """Sizes of the hash-grid radiance field and its two proposal fields."""

    model_config = ConfigDict(extra="forbid")

    levels: int = Field(8, ge=2, description="Hash-grid levels L")
    table_size: int = Field(2**14, description="Entries per level T (power of two)")
    features: int = Field(2, description="Features per entry F")
    base_resolution: int = Field(16, ge=1)
    max_resolution: int = Field(256, ge=1)
    hidden: int = Field(64, ge=8, description="Width of the density and colour MLPs")
    geo_features: int = Field(15, ge=1)
    proposal_hidden: int = Field(16, ge=4)
    samples: Tuple[int, int, int] = Field((48, 48, 32), description="Proposal 1, proposal 2, final samples per ray")
    near: float = Field(0.2, gt=0)
    far: float = Field(20.0, gt=0)
    scene_scale: float = Field(2.0, gt=0, description="World units per unit of the contraction domain")
    resample_floor: float = Field(0.01, gt=0, lt=1, description="Uniform mass mixed into proposal histograms")

    @field_validator("table_size")
    @classmethod
    def validate_table_size(cls, v):
        if v < 2 or v & (v - 1):
            raise ValueError("table_size must be a power of two")
        return v

    @field_validator("features")
    @classmethod
    def validate_features(cls, v):
        if v not in (2, 4):
            raise ValueError("features must be 2 or 4")
        return v

    @field_validator("samples", mode="before")
    @classmethod
    def split_samples(cls, v):
        if isinstance(v, str):
            return tuple(int(part) for part in v.split(","))
        return v

    @model_validator(mode="after")
    def validate_bounds(self):
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")
        if min(self.samples) < 1:
            raise ValueError("sample counts must be >= 1")
        return self

    @property
    def proposal_levels(self) -> int:
        return max(2, self.levels // 2)

    @property
    def proposal_table_size(self) -> int:
        return max(2, self.table_size // 2)
