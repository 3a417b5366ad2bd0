"""
Dataset persistence.

Layout under a dataset directory:

    manifest.json
    images/{id}.png        8-bit preview
    images/{id}.f32        raw little-endian float32 H x W x 3 (authoritative)
    masks/{id}.png         0 / 255
    depth/{id}.f32         H x W
    gt_removed/{id}.f32    H x W x 3
    removed_depth/{id}.f32 H x W

Entries without an `images/{id}.f32` are treated as external images and read
from the PNG, resized so the long edge matches the manifest's `long_edge`.
"""

import json
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from pydantic import ValidationError

from app.config.logger import Logger
from app.schemas.scene import CameraModel, DatasetManifest, ManifestEntry, PosedImage, SceneDataset
from app.services.errors import DatasetLoadError

logger = Logger.get_logger(__name__)

MANIFEST_NAME = "manifest.json"


def _write_f32(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def _read_f32(path: Path, shape: Tuple[int, ...], root: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetLoadError(f"missing file {path.relative_to(root)}", file=str(path))
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise DatasetLoadError(
            f"corrupt file {path.relative_to(root)}: expected {int(np.prod(shape))} floats, found {data.size}",
            file=str(path),
        )
    return data.reshape(shape).astype(np.float32)


def _write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if array.dtype == np.bool_:
        Image.fromarray(array.astype(np.uint8) * 255, mode="L").save(path)
    else:
        Image.fromarray((np.clip(array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)).save(path)


def _read_png(path: Path, root: Path) -> Image.Image:
    if not path.is_file():
        raise DatasetLoadError(f"missing file {path.relative_to(root)}", file=str(path))
    try:
        image = Image.open(path)
        image.load()
    except OSError as e:
        raise DatasetLoadError(f"corrupt file {path.relative_to(root)}: {e}", file=str(path))
    return image


def save_dataset(ds: SceneDataset, path: Path) -> Path:
    """Write a dataset directory; returns the manifest path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for image in ds.images:
        i = image.image_id
        _write_png(root / "images" / f"{i}.png", image.pixels)
        _write_f32(root / "images" / f"{i}.f32", image.pixels)
        _write_png(root / "masks" / f"{i}.png", image.mask)
        if image.gt_depth is not None:
            _write_f32(root / "depth" / f"{i}.f32", image.gt_depth)
        if image.gt_removed_pixels is not None:
            _write_f32(root / "gt_removed" / f"{i}.f32", image.gt_removed_pixels)
        if image.gt_removed_depth is not None:
            _write_f32(root / "removed_depth" / f"{i}.f32", image.gt_removed_depth)
        cam = image.camera
        entries.append(
            ManifestEntry(
                image_id=i,
                split=ds.split[i],
                focal=cam.focal,
                cx=cam.cx,
                cy=cam.cy,
                width=cam.width,
                height=cam.height,
                pose=cam.pose.reshape(-1).tolist(),
                has_depth=image.gt_depth is not None,
                has_gt_removed=image.gt_removed_pixels is not None,
                has_removed_depth=image.gt_removed_depth is not None,
            )
        )
    manifest = DatasetManifest(
        seed=ds.scene_descriptor.spec.seed if ds.scene_descriptor else None,
        revision=ds.revision,
        long_edge=ds.long_edge,
        scene_descriptor=ds.scene_descriptor,
        entries=entries,
    )
    manifest_path = root / MANIFEST_NAME
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Saved dataset revision {ds.revision} ({len(entries)} images) to {root}")
    return manifest_path


def _read_manifest(root: Path) -> DatasetManifest:
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DatasetLoadError(f"missing file {MANIFEST_NAME}", file=str(manifest_path))
    try:
        return DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except (ValidationError, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DatasetLoadError(f"corrupt file {MANIFEST_NAME}: {e}", file=str(manifest_path))


def _import_external(
    entry: ManifestEntry, root: Path, long_edge: Optional[int]
) -> Tuple[np.ndarray, np.ndarray, CameraModel]:
    """Read an external PNG view, resizing to the manifest's long edge."""
    image = _read_png(root / "images" / f"{entry.image_id}.png", root).convert("RGB")
    mask = _read_png(root / "masks" / f"{entry.image_id}.png", root).convert("L")
    camera = CameraModel(
        focal=entry.focal,
        cx=entry.cx,
        cy=entry.cy,
        width=image.width,
        height=image.height,
        pose=np.asarray(entry.pose).reshape(4, 4),
    )
    if long_edge is not None and max(image.size) != long_edge:
        scale = long_edge / max(image.size)
        size = (max(1, round(image.width * scale)), max(1, round(image.height * scale)))
        image = image.resize(size, Image.Resampling.LANCZOS)
        mask = mask.resize(size, Image.Resampling.NEAREST)
        camera = camera.scaled(size[0] / camera.width, size[1] / camera.height, size[0], size[1])
        logger.info(f"Imported external view {entry.image_id} resized to {size[0]}x{size[1]}")
    pixels = np.asarray(image, dtype=np.float32) / 255.0
    return pixels, np.asarray(mask) > 127, camera


def load_dataset(path: Path) -> SceneDataset:
    """Load a dataset directory written by `save_dataset` (or an external manifest)."""
    root = Path(path)
    manifest = _read_manifest(root)
    images, split = [], {}
    for entry in manifest.entries:
        i = entry.image_id
        raw_path = root / "images" / f"{i}.f32"
        if raw_path.is_file():
            camera = CameraModel(
                focal=entry.focal,
                cx=entry.cx,
                cy=entry.cy,
                width=entry.width,
                height=entry.height,
                pose=np.asarray(entry.pose).reshape(4, 4),
            )
            hw = (entry.height, entry.width)
            pixels = _read_f32(raw_path, hw + (3,), root)
            mask = np.asarray(_read_png(root / "masks" / f"{i}.png", root).convert("L")) > 127
            if mask.shape != hw:
                raise DatasetLoadError(f"corrupt file masks/{i}.png: shape {mask.shape} != {hw}", file=f"masks/{i}.png")
            extras = {
                "gt_depth": _read_f32(root / "depth" / f"{i}.f32", hw, root) if entry.has_depth else None,
                "gt_removed_pixels": _read_f32(root / "gt_removed" / f"{i}.f32", hw + (3,), root)
                if entry.has_gt_removed
                else None,
                "gt_removed_depth": _read_f32(root / "removed_depth" / f"{i}.f32", hw, root)
                if entry.has_removed_depth
                else None,
            }
        else:
            pixels, mask, camera = _import_external(entry, root, manifest.long_edge)
            extras = {}
        try:
            images.append(PosedImage(image_id=i, pixels=pixels, mask=mask, camera=camera, **extras))
        except ValidationError as e:
            raise DatasetLoadError(f"invalid view {i}: {e}", file=f"images/{i}.f32", image_id=i)
        split[i] = entry.split

    try:
        ds = SceneDataset(
            images=images,
            split=split,
            scene_descriptor=manifest.scene_descriptor,
            revision=manifest.revision,
            long_edge=manifest.long_edge,
        )
    except ValidationError as e:
        raise DatasetLoadError(f"invalid dataset in {MANIFEST_NAME}: {e}", file=str(root / MANIFEST_NAME))
    logger.info(f"Loaded dataset revision {ds.revision} ({len(images)} images) from {root}")
    return ds
