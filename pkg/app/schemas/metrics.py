"""
Evaluation report schemas.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

ADVISORY_METRICS = ("flow_consistency", "seam")


class CornerCrops(BaseModel):
    """Four crop windows around the extreme corners of a mask."""

    corners: List[Tuple[int, int]] = Field(..., min_length=4, max_length=4)
    windows: List[Tuple[int, int]] = Field(..., min_length=4, max_length=4, description="(top, left) per crop")
    crop_size: int
    warning: bool = False


class MetricValues(BaseModel):
    """Proxy scores for one scene (or their aggregate)."""

    psnr_masked: float
    pproxy: float
    m_pproxy: float
    fid_proxy: float
    kid_proxy: float
    cfid_proxy: float
    ckid_proxy: float
    fvd_proxy: Optional[float] = None
    flow_consistency: Optional[float] = None
    seam: float = 0.0

    @field_validator("*")
    @classmethod
    def validate_finite(cls, v):
        if v is not None and not (v == v and abs(v) != float("inf")):
            raise ValueError("metric values must be finite")
        return v


class Provenance(BaseModel):
    checkpoint_id: str
    dataset_revision: int
    extractor_seed: int
    iteration: int = 0


class MetricReport(BaseModel):
    """`report.json` written by `evaluate`."""

    scene: str = "scene"
    values: MetricValues
    provenance: Provenance
    regularized: List[str] = Field(default_factory=list, description="Scores computed with a regularized covariance")
    warnings: List[str] = Field(default_factory=list)
    advisory: List[str] = Field(default_factory=lambda: list(ADVISORY_METRICS))
    tags: Dict[str, str] = Field(default_factory=dict)


class EvalConfig(BaseModel):
    """Evaluation knobs that are not part of the checkpoint."""

    model_config = ConfigDict(extra="forbid")

    extractor_seed: int = 0
    crop_size: int = Field(16, ge=4)
    corner_mode: Literal["quadrant", "bbox"] = "quadrant"
    trajectory_frames: int = Field(30, ge=2)
    clip_stride: int = Field(5, ge=1)
    kid_block: int = Field(50, ge=2)
