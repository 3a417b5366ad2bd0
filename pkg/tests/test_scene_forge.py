"""
Tests for procedural scene synthesis and dataset updates.
"""

import numpy as np
import pytest

from app.schemas.scene import SceneSpec
from app.services.errors import DegenerateOrbitError, EmptyMaskError, ImageUpdateError
from app.services.scene_forge import (
    camera_rays,
    describe_scene,
    dilate_mask,
    render_trajectory,
    render_view,
    synthesize_scene,
    update_image,
)


def test_synthesis_is_deterministic(small_spec, small_dataset):
    """Same spec twice gives bit-identical datasets."""
    again = synthesize_scene(small_spec)
    assert again == small_dataset


def test_zero_objects_is_an_empty_mask():
    with pytest.raises(EmptyMaskError, match="empty mask"):
        synthesize_scene(SceneSpec(seed=0, n_objects=0, n_train=4, n_test=4, resolution=16))


def test_zero_orbit_radius_is_degenerate():
    with pytest.raises(DegenerateOrbitError):
        synthesize_scene(SceneSpec(seed=0, n_train=4, n_test=4, resolution=16, orbit_radius=0.0))


def test_desk_masks_cover_between_one_and_sixty_percent():
    """Seed 7, 20 train and 8 test views at 64x64."""
    ds = synthesize_scene(SceneSpec(seed=7, n_train=20, n_test=8, resolution=64))
    assert len(ds.train_images()) == 20
    assert len(ds.test_images()) == 8
    for view in ds.train_images():
        coverage = view.mask.mean()
        assert 0.01 <= coverage <= 0.60


def test_views_carry_depth_and_removed_ground_truth(small_dataset):
    for view in small_dataset.images:
        assert view.gt_depth is not None
        assert view.gt_removed_pixels is not None
        assert np.all(view.gt_depth > 0)
        # removed and rendered pixels agree outside the dilated silhouette
        assert np.array_equal(view.gt_removed_pixels[~view.mask], view.pixels[~view.mask])


def test_test_views_are_object_free(small_dataset):
    for view in small_dataset.test_images():
        assert np.array_equal(view.pixels, view.gt_removed_pixels)


def test_train_and_test_renders_agree_outside_silhouette(small_dataset):
    """Rendering one camera with and without objects differs only on the silhouette."""
    descriptor = small_dataset.scene_descriptor
    camera = small_dataset.train_images()[0].camera
    with_objects = render_view(descriptor, camera, with_objects=True)
    without = render_view(descriptor, camera, with_objects=False)
    outside = ~with_objects["silhouette"]
    assert with_objects["silhouette"].any()
    assert np.array_equal(with_objects["pixels"][outside], without["pixels"][outside])
    assert np.array_equal(with_objects["depth"][outside], without["depth"][outside])


def test_camera_rays_are_unit_and_centered(camera):
    origins, directions = camera_rays(camera)
    assert directions.shape == (32, 32, 3)
    assert np.allclose(np.linalg.norm(directions, axis=-1), 1.0, atol=1e-6)
    assert np.allclose(origins, camera.center)
    # the central rays straddle the optical axis symmetrically
    forward = camera.pose[:3, 2]
    centre = directions[15:17, 15:17].mean(axis=(0, 1))
    assert np.dot(centre / np.linalg.norm(centre), forward) > 0.999


def test_dilate_mask_grows_by_radius():
    silhouette = np.zeros((11, 11), dtype=bool)
    silhouette[5, 5] = True
    assert dilate_mask(silhouette, 0).sum() == 1
    grown = dilate_mask(silhouette, 2)
    assert grown[5, 3] and grown[5, 7] and grown[3, 5]
    assert not grown[5, 8]
    assert not grown[3, 3]


def test_describe_scene_places_objects_on_the_ground():
    descriptor = describe_scene(SceneSpec(seed=4, n_objects=3, n_train=4, n_test=4, resolution=16))
    assert len(descriptor.objects) == 3
    for obj in descriptor.objects:
        assert obj.center[2] == pytest.approx(obj.size)


def test_render_trajectory_returns_ordered_frames(small_dataset):
    frames = render_trajectory(small_dataset.scene_descriptor, 5)
    assert len(frames) == 5
    centres = np.stack([f["camera"].center for f in frames])
    assert np.all(np.linalg.norm(np.diff(centres, axis=0), axis=1) > 0)
    for frame in frames:
        assert frame["pixels"].shape == (32, 32, 3)
        assert frame["depth"].shape == (32, 32)


def test_update_with_same_pixels_only_bumps_revision(small_dataset):
    view = small_dataset.train_images()[0]
    updated = update_image(small_dataset, view.image_id, view.pixels.copy(), view.mask)
    assert updated.revision == small_dataset.revision + 1
    assert updated.images == small_dataset.images


def test_update_replaces_masked_pixels(small_dataset):
    view = small_dataset.train_images()[1]
    new = view.pixels.copy()
    new[view.mask] = 0.5
    updated = update_image(small_dataset, view.image_id, new, view.mask)
    assert np.all(updated.get(view.image_id).pixels[view.mask] == 0.5)
    # the input snapshot is untouched
    assert np.array_equal(small_dataset.get(view.image_id).pixels, view.pixels)


def test_update_rejects_unmasked_change(small_dataset):
    view = small_dataset.train_images()[0]
    new = view.pixels.copy()
    row, col = np.argwhere(~view.mask)[0]
    new[row, col, 0] = 1.0 - new[row, col, 0]
    with pytest.raises(ImageUpdateError, match="non-mask pixels modified"):
        update_image(small_dataset, view.image_id, new, view.mask)


def test_update_rejects_unknown_id_and_wrong_mask(small_dataset):
    view = small_dataset.train_images()[0]
    with pytest.raises(ImageUpdateError):
        update_image(small_dataset, 999, view.pixels, view.mask)
    with pytest.raises(ImageUpdateError):
        update_image(small_dataset, view.image_id, view.pixels, ~view.mask)


def test_eight_updates_raise_revision_by_eight(small_dataset):
    ds = small_dataset
    for i in range(8):
        view = ds.train_images()[i % len(ds.train_images())]
        ds = update_image(ds, view.image_id, view.pixels, view.mask)
    assert ds.revision == small_dataset.revision + 8
