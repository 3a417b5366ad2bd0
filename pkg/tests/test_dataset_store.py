"""
Tests for dataset persistence.
"""

import json

import numpy as np
import pytest
from PIL import Image

from app.services.dataset_store import MANIFEST_NAME, load_dataset, save_dataset
from app.services.errors import DatasetLoadError
from app.services.scene_forge import update_image


def test_save_then_load_is_identity(small_dataset, tmp_path):
    save_dataset(small_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert loaded == small_dataset
    for a, b in zip(loaded.images, small_dataset.images):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.pixels.dtype == np.float32


def test_revision_survives_round_trip(small_dataset, tmp_path):
    view = small_dataset.train_images()[0]
    ds = update_image(small_dataset, view.image_id, view.pixels, view.mask)
    save_dataset(ds, tmp_path / "ds")
    assert load_dataset(tmp_path / "ds").revision == ds.revision


def test_layout_on_disk(small_dataset, tmp_path):
    root = tmp_path / "ds"
    save_dataset(small_dataset, root)
    first = small_dataset.images[0].image_id
    for rel in (MANIFEST_NAME, f"images/{first}.png", f"images/{first}.f32", f"masks/{first}.png", f"depth/{first}.f32"):
        assert (root / rel).is_file()
    assert (root / f"images/{first}.f32").stat().st_size == 32 * 32 * 3 * 4
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    assert len(manifest["entries"][0]["pose"]) == 16


def test_missing_mask_names_the_file(small_dataset, tmp_path):
    root = tmp_path / "ds"
    save_dataset(small_dataset, root)
    victim = small_dataset.images[2].image_id
    (root / "masks" / f"{victim}.png").unlink()
    with pytest.raises(DatasetLoadError, match=f"masks/{victim}.png"):
        load_dataset(root)


def test_truncated_raw_image_is_corrupt(small_dataset, tmp_path):
    root = tmp_path / "ds"
    save_dataset(small_dataset, root)
    raw = root / "images" / f"{small_dataset.images[0].image_id}.f32"
    raw.write_bytes(raw.read_bytes()[:100])
    with pytest.raises(DatasetLoadError, match="corrupt"):
        load_dataset(root)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetLoadError, match=MANIFEST_NAME):
        load_dataset(tmp_path)


def test_corrupt_manifest(tmp_path):
    (tmp_path / MANIFEST_NAME).write_text("{not json")
    with pytest.raises(DatasetLoadError) as excinfo:
        load_dataset(tmp_path)
    assert excinfo.value.details["file"].endswith(MANIFEST_NAME)


def test_external_import_resizes_to_long_edge(tmp_path):
    """PNG-only views are resized so the long edge matches, intrinsics follow."""
    root = tmp_path / "external"
    (root / "images").mkdir(parents=True)
    (root / "masks").mkdir()
    pixels = (np.random.default_rng(0).uniform(size=(40, 80, 3)) * 255).astype(np.uint8)
    mask = np.zeros((40, 80), dtype=np.uint8)
    mask[10:30, 20:60] = 255
    Image.fromarray(pixels).save(root / "images" / "0.png")
    Image.fromarray(mask).save(root / "masks" / "0.png")
    entry = {
        "image_id": 0,
        "split": "train",
        "focal": 50.0,
        "cx": 40.0,
        "cy": 20.0,
        "width": 80,
        "height": 40,
        "pose": np.eye(4).reshape(-1).tolist(),
    }
    (root / MANIFEST_NAME).write_text(json.dumps({"long_edge": 160, "entries": [entry]}))

    ds = load_dataset(root)
    view = ds.images[0]
    assert view.pixels.shape == (80, 160, 3)
    assert view.camera.width == 160 and view.camera.height == 80
    assert view.camera.focal == pytest.approx(100.0)
    assert view.camera.cx == pytest.approx(80.0)
    assert view.mask.mean() == pytest.approx(0.25)
