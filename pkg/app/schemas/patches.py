"""
Adversarial patch records.
"""

from typing import Literal, Tuple

from pydantic import model_validator

from app.schemas.arrays import ArrayModel, BoolArray, Float32Array


class PatchSample(ArrayModel):
    """A square crop of pixels with its mask crop and provenance."""

    pixels: Float32Array
    mask: BoolArray
    source_image_id: int
    top_left: Tuple[int, int]
    kind: Literal["rendered", "inpainted", "ground_truth"]

    @model_validator(mode="after")
    def validate_crop(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != self.pixels.shape[1] or self.pixels.shape[2] != 3:
            raise ValueError(f"patch pixels must be P x P x 3, got {self.pixels.shape}")
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError("mask crop is not aligned to the pixel crop")
        return self

    @property
    def size(self) -> int:
        return self.pixels.shape[0]
