"""
Scene, camera and dataset schemas.
"""

import math
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.arrays import ArrayModel, BoolArray, Float32Array, Float64Array


class CameraModel(ArrayModel):
    """Pinhole camera: intrinsics in pixels plus camera-to-world pose (OpenCV axes)."""

    focal: float = Field(..., description="Focal length in pixels")
    cx: float = Field(..., description="Principal point x")
    cy: float = Field(..., description="Principal point y")
    width: int = Field(..., ge=16)
    height: int = Field(..., ge=16)
    pose: Float64Array = Field(..., description="4x4 camera-to-world transform")

    @field_validator("focal")
    @classmethod
    def validate_focal(cls, v):
        if not v > 0:
            raise ValueError("focal must be > 0")
        return v

    @field_validator("pose")
    @classmethod
    def validate_pose(cls, v):
        if v.shape != (4, 4):
            raise ValueError(f"pose must be 4x4, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("pose must be finite")
        rotation = v[:3, :3]
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-6:
            raise ValueError("pose rotation block is not orthonormal")
        return v

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    def scaled(self, factor_x: float, factor_y: float, width: int, height: int) -> "CameraModel":
        """Intrinsics for a resized image of (width, height)."""
        return CameraModel(
            focal=self.focal * factor_x,
            cx=self.cx * factor_x,
            cy=self.cy * factor_y,
            width=width,
            height=height,
            pose=self.pose.copy(),
        )


class PosedImage(ArrayModel):
    """One view: pixels, inpainting mask, camera and optional ground truth."""

    image_id: int
    pixels: Float32Array
    mask: BoolArray
    camera: CameraModel
    gt_removed_pixels: Optional[Float32Array] = None
    gt_depth: Optional[Float32Array] = None
    gt_removed_depth: Optional[Float32Array] = None

    @model_validator(mode="after")
    def validate_view(self):
        h, w = self.camera.height, self.camera.width
        if self.pixels.shape != (h, w, 3):
            raise ValueError(f"pixels shape {self.pixels.shape} does not match camera {(h, w, 3)}")
        if not np.all(np.isfinite(self.pixels)) or self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixels must be finite and in [0, 1]")
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} does not match camera {(h, w)}")
        if not self.mask.any():
            raise ValueError("empty mask")
        if self.mask.all():
            raise ValueError("mask covers the whole image")
        if self.gt_removed_pixels is not None:
            if self.gt_removed_pixels.shape != self.pixels.shape:
                raise ValueError("gt_removed_pixels shape mismatch")
            if not np.array_equal(self.gt_removed_pixels[~self.mask], self.pixels[~self.mask]):
                raise ValueError("gt_removed_pixels differ from pixels outside the mask")
        for name in ("gt_depth", "gt_removed_depth"):
            depth = getattr(self, name)
            if depth is not None and depth.shape != (h, w):
                raise ValueError(f"{name} shape {depth.shape} does not match camera {(h, w)}")
        return self

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.camera.width, self.camera.height


class ObjectPrimitive(BaseModel):
    """A removable object: an axis-aligned box or a sphere resting on the ground."""

    kind: Literal["sphere", "box"]
    center: Tuple[float, float, float]
    size: float = Field(..., gt=0, description="Sphere radius or box half-extent")
    color: Tuple[float, float, float]
    stripe_frequency: float = Field(6.0, ge=0)


class SceneSpec(BaseModel):
    """Generation parameters for a procedural scene."""

    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    n_objects: int = Field(1, ge=0)
    n_train: int = Field(20, ge=4)
    n_test: int = Field(8, ge=4)
    resolution: int = Field(64, ge=16)
    orbit_radius: float = Field(4.0, ge=0)
    orbit_height: float = 1.6
    orbit_height_jitter: float = Field(0.25, ge=0)
    field_of_view_deg: float = Field(50.0, gt=0, lt=180)
    env_radius: float = Field(10.0, gt=0)
    dilation_radius: Optional[int] = Field(None, ge=0, description="Defaults to ceil(0.02 * max(H, W))")

    @property
    def effective_dilation(self) -> int:
        if self.dilation_radius is not None:
            return self.dilation_radius
        return int(math.ceil(0.02 * self.resolution))


class SceneDescriptor(BaseModel):
    """Everything needed to re-render a synthesized scene from any camera."""

    spec: SceneSpec
    objects: List[ObjectPrimitive]
    ground_colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    ground_frequency: float
    sky_colors: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    sky_frequency: float
    light_direction: Tuple[float, float, float]
    look_at: Tuple[float, float, float] = (0.0, 0.0, 0.3)


class SceneDataset(ArrayModel):
    """Ordered posed images plus split tags, generation descriptor and revision."""

    images: List[PosedImage]
    split: Dict[int, Literal["train", "test"]]
    scene_descriptor: Optional[SceneDescriptor] = None
    revision: int = Field(0, ge=0)
    long_edge: Optional[int] = Field(None, ge=16)

    @model_validator(mode="after")
    def validate_dataset(self):
        ids = [image.image_id for image in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("image_ids must be unique")
        if set(ids) != set(self.split):
            raise ValueError("split tags must cover exactly the dataset's image ids")
        for image in self.images:
            if self.split[image.image_id] == "test" and image.gt_removed_pixels is None:
                raise ValueError(f"test image {image.image_id} lacks gt_removed_pixels")
        return self

    def get(self, image_id: int) -> PosedImage:
        for image in self.images:
            if image.image_id == image_id:
                return image
        raise KeyError(image_id)

    def train_images(self) -> List[PosedImage]:
        return [image for image in self.images if self.split[image.image_id] == "train"]

    def test_images(self) -> List[PosedImage]:
        return [image for image in self.images if self.split[image.image_id] == "test"]

    @property
    def train_ids(self) -> List[int]:
        return [image.image_id for image in self.train_images()]


class ManifestEntry(BaseModel):
    """One image's record in `manifest.json`."""

    image_id: int
    split: Literal["train", "test"]
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    pose: List[float] = Field(..., min_length=16, max_length=16, description="Row-major 4x4 camera-to-world")
    has_depth: bool = False
    has_gt_removed: bool = False
    has_removed_depth: bool = False


class DatasetManifest(BaseModel):
    """Top-level `manifest.json` of a persisted dataset."""

    format_version: int = 1
    seed: Optional[int] = None
    revision: int = 0
    long_edge: Optional[int] = Field(None, ge=16)
    scene_descriptor: Optional[SceneDescriptor] = None
    entries: List[ManifestEntry]
