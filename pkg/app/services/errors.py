"""
Exception hierarchy for maldnerf services.

Every error carries a human-readable message plus structured `details` so the
CLI can render it into the error envelope without string parsing.
"""

from typing import Any, Dict


class MaldNerfError(Exception):
    """Base class for all maldnerf errors."""

    code = "maldnerf_error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = {k: v for k, v in details.items() if v is not None}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "details": self.details or None}


class ConfigError(MaldNerfError):
    """Invalid or unreadable configuration."""

    code = "config_error"


class SceneError(MaldNerfError):
    """Scene synthesis or dataset invariant violation."""

    code = "scene_error"


class EmptyMaskError(SceneError):
    code = "empty_mask"


class DegenerateOrbitError(SceneError):
    code = "degenerate_orbit"


class ImageUpdateError(SceneError):
    code = "image_update_error"


class DatasetLoadError(MaldNerfError):
    """Dataset directory is missing a file or holds a corrupt one."""

    code = "dataset_load_error"


class CheckpointError(MaldNerfError):
    code = "checkpoint_error"


class RenderError(MaldNerfError):
    """Non-finite field output during rendering."""

    code = "render_error"


class DegenerateDepthPriorError(MaldNerfError):
    code = "degenerate_depth_prior"


class PatchSamplingError(MaldNerfError):
    code = "patch_sampling_error"


class InpaintError(MaldNerfError):
    code = "inpaint_error"


class TrainingDivergedError(MaldNerfError):
    """A loss term or discriminator score left the finite/bounded range."""

    code = "training_diverged"


class MetricError(MaldNerfError):
    code = "metric_error"


class StageFailedError(MaldNerfError):
    """A pipeline stage raised; wraps the original error."""

    code = "stage_failed"


class LossInputError(MaldNerfError):
    """A loss received an empty or malformed batch."""

    code = "loss_input_error"
