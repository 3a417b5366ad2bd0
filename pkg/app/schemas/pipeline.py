"""
Pipeline configuration and run manifest schemas.
"""

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from app.schemas.metrics import EvalConfig
from app.schemas.prior import PriorConfig, TextureShift
from app.schemas.scene import SceneSpec
from app.schemas.training import TrainConfig


class PriorStageConfig(BaseModel):
    """Which inpainting prior to build, and how to train it."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["oracle", "diffusion"] = "oracle"
    steps: int = Field(2000, ge=0, description="Denoiser training steps")
    autoencoder_steps: Optional[int] = Field(None, ge=0)
    batch_size: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0
    sigma_incon: float = Field(0.05, ge=0)
    shift: TextureShift = Field(default_factory=TextureShift)
    network: PriorConfig = Field(default_factory=PriorConfig)


class CustomizeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    rank: int = Field(4, ge=0)
    steps: int = Field(200, ge=0)
    seed: int = 0
    token: str = "scene"
    lr: float = Field(1e-3, gt=0)


class PipelineConfig(BaseModel):
    """All stage sections; flat config files address them as `scene.seed`, `train.K`, ..."""

    model_config = ConfigDict(extra="forbid")

    scene: SceneSpec = Field(default_factory=SceneSpec)
    prior: PriorStageConfig = Field(default_factory=PriorStageConfig)
    customize: CustomizeConfig = Field(default_factory=CustomizeConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


class StageRecord(BaseModel):
    """One executed or cached stage."""

    name: str
    key: str = Field(..., description="sha256 over stage name, config section, upstream keys and code version")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Upstream stage -> its output digest")
    output_dir: str
    output_digest: str
    cached: bool = False
    seconds: float = 0.0


class RunManifest(BaseModel):
    """Reproducibility record written as `manifest.json` in the run directory."""

    config: Dict[str, Any]
    stages: List[StageRecord] = Field(default_factory=list)
    seeds: Dict[str, int] = Field(default_factory=dict)
    versions: Dict[str, str] = Field(default_factory=dict)

    def stage(self, name: str) -> Optional[StageRecord]:
        for record in self.stages:
            if record.name == name:
                return record
        return None
