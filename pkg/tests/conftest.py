"""
Shared fixtures for the maldnerf test suite.
"""

import numpy as np
import pytest
import torch

from app.schemas.field import FieldConfig
from app.schemas.scene import CameraModel, SceneSpec
from app.schemas.training import TrainConfig
from app.services.scene_forge import look_at_pose, synthesize_scene


@pytest.fixture(autouse=True)
def _seed_everything():
    """Every test starts from the same global RNG state."""
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_spec() -> SceneSpec:
    return SceneSpec(seed=3, n_objects=1, n_train=4, n_test=4, resolution=32)


@pytest.fixture(scope="session")
def small_dataset(small_spec):
    return synthesize_scene(small_spec)


@pytest.fixture(scope="session")
def desk_dataset():
    """48x48 scene large enough for 16-pixel candidate windows."""
    return synthesize_scene(SceneSpec(seed=1, n_objects=1, n_train=4, n_test=4, resolution=48))


@pytest.fixture
def camera() -> CameraModel:
    pose = look_at_pose(np.array([4.0, 0.0, 1.6]), np.array([0.0, 0.0, 0.3]))
    return CameraModel(focal=34.3, cx=16.0, cy=16.0, width=32, height=32, pose=pose)


@pytest.fixture
def tiny_field() -> FieldConfig:
    return FieldConfig(
        levels=2,
        table_size=256,
        features=2,
        base_resolution=4,
        max_resolution=16,
        hidden=16,
        geo_features=7,
        proposal_hidden=8,
        samples=(8, 8, 8),
    )


@pytest.fixture
def tiny_train_config(tiny_field) -> TrainConfig:
    return TrainConfig(
        K=8,
        U=4,
        idu_batch=2,
        depth_gate=4,
        ray_batch=64,
        disc_batch=2,
        patch_size=8,
        candidate_size=16,
        depth_pairs=32,
        depth_window=16,
        log_every=1,
        checkpoint_every=0,
        snapshot_every=0,
        field=tiny_field,
    )
