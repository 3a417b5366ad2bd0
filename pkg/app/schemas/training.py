"""
Training configuration, state and metric records.
"""

from typing import Dict, Literal, Optional

from pydantic import AliasChoices, BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.field import FieldConfig


def _paper(default, **kwargs):
    return Field(default, json_schema_extra={"source": "paper"}, **kwargs)


def _desk(default, **kwargs):
    return Field(default, json_schema_extra={"source": "desk"}, **kwargs)


class TrainConfig(BaseModel):
    """
    Every knob of the three-step training loop.

    Each field is tagged `paper` (value reported for the full-scale method)
    or `desk` (chosen for 64x64 CPU runs); `--print-config` shows the tags.
    """

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    iterations: int = _desk(3000, ge=1, validation_alias=AliasChoices("K", "iterations"),
                            description="Total iterations K (30000 at full scale)")
    idu_period: int = _paper(80, ge=1, validation_alias=AliasChoices("U", "idu_period"))
    idu_batch: int = _paper(8, ge=1)

    lambda_pix: float = _paper(1.0, ge=0)
    lambda_inter: float = _paper(3.0, ge=0)
    lambda_distort: float = _paper(0.002, ge=0)
    lambda_decay: float = _paper(0.1, ge=0)
    lambda_adv: float = _paper(1.0, ge=0)
    lambda_fm: float = _paper(1.0, ge=0)
    lambda_gp: float = _paper(15.0, ge=0)
    lambda_depth: float = _desk(0.1, ge=0)
    lambda_pix_mask: float = _desk(0.0, ge=0, description="Pixel loss against inpainted pixels inside the mask")
    lambda_perc_mask: float = _desk(0.0, ge=0, description="Perceptual proxy loss inside the mask")

    t_max: int = _paper(980, ge=1)
    t_min: int = _paper(20, ge=1)
    n_ddim_steps: int = _paper(20, ge=1)
    depth_gate: int = _paper(2000, ge=0)

    ray_batch: int = _desk(1024, ge=1)
    disc_batch: int = _desk(4, ge=1, description="Discriminator patches per step")
    patch_size: int = _desk(16, ge=4)
    candidate_size: int = _desk(32, ge=4)
    n_candidates: int = _desk(0, ge=0, description="Candidate windows kept per step, 0 keeps all")
    adv_real: Literal["masked_inpainted", "unmasked"] = _desk("masked_inpainted")

    field_lr_start: float = _paper(1e-2, gt=0)
    field_lr_end: float = _paper(1e-4, gt=0)
    disc_lr: float = _paper(1e-4, gt=0)
    grad_clip: float = _desk(10.0, gt=0)
    divergence_bound: float = _desk(1e3, gt=0)

    initial_inpaint: bool = _desk(True)
    condition: str = _desk("inpaint", description="Conditioning token passed to the prior")
    depth_noise: float = _desk(0.01, ge=0)
    depth_scale: float = _desk(0.5)
    depth_shift: float = _desk(0.3)
    depth_pairs: int = _desk(512, ge=1)
    depth_window: int = _desk(32, ge=2)
    depth_min_fit: int = _desk(32, ge=2, description="Reconstruction pixels required for a view's depth alignment")
    perc_extractor_seed: int = _desk(1)

    log_every: int = _desk(10, ge=1)
    checkpoint_every: int = _desk(500, ge=0)
    snapshot_every: int = _desk(1000, ge=0)
    seed: int = _desk(0)

    field: FieldConfig = Field(default_factory=FieldConfig)

    @field_validator("adv_real", mode="before")
    @classmethod
    def normalize_adv_real(cls, v):
        # earlier configs spell the unmasked variant `unmasked_gt`
        return "unmasked" if v == "unmasked_gt" else v

    @model_validator(mode="after")
    def validate_schedule(self):
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got t_min={self.t_min}, t_max={self.t_max}")
        if self.depth_gate >= self.iterations:
            raise ValueError(f"depth_gate ({self.depth_gate}) must be below K ({self.iterations})")
        if self.candidate_size % self.patch_size:
            raise ValueError("candidate_size must be a multiple of patch_size")
        if self.field_lr_end > self.field_lr_start:
            raise ValueError("field_lr_end must not exceed field_lr_start")
        return self

    @property
    def tiles_per_candidate(self) -> int:
        return (self.candidate_size // self.patch_size) ** 2

    @classmethod
    def provenance(cls) -> Dict[str, str]:
        """Field name -> 'paper' | 'desk'."""
        tags = {}
        for name, info in cls.model_fields.items():
            extra = info.json_schema_extra or {}
            tags[name] = extra.get("source", "desk") if isinstance(extra, dict) else "desk"
        return tags


class IterationRecord(BaseModel):
    """One line of `metrics.jsonl`."""

    iteration: int
    losses: Dict[str, float]
    field_lr: float
    dataset_revision: int
    depth_active: bool = False
    idu: bool = False
    hifa_t: Optional[int] = None


class ViewAlignment(BaseModel):
    """Depth shift-scale of one train view, fitted at a given image revision."""

    revision: int = Field(..., ge=0)
    a: Optional[float] = None
    b: Optional[float] = None

    @property
    def usable(self) -> bool:
        return self.a is not None and self.b is not None


class TrainState(BaseModel):
    """Serializable training progress; the networks and optimizers live next to it on disk."""

    iteration: int = Field(0, ge=0)
    dataset_revision: int = Field(0, ge=0)
    image_revisions: Dict[int, int] = Field(default_factory=dict)
    depth_alignments: Dict[int, ViewAlignment] = Field(default_factory=dict)
    config: TrainConfig
    checkpoint_id: Optional[str] = None
