"""
Tests for the versioned parameter blob format.
"""

import struct

import numpy as np
import pytest
import torch

from app.models.discriminator import PatchDiscriminator
from app.models.radiance_field import NerfModel
from app.services.checkpoint import (
    MAGIC,
    BlobHeader,
    decode_blob,
    encode_blob,
    load_module,
    load_tensors,
    save_module,
    save_tensors,
)
from app.services.errors import CheckpointError


def test_field_blob_restores_parameters(tiny_field, tmp_path):
    model = NerfModel(tiny_field)
    header = save_module(model, tmp_path / "field.bin", "field", tiny_field.levels, tiny_field.table_size, 2)
    assert header.parameter_count == sum(t.numel() for t in model.state_dict().values())

    restored = NerfModel(tiny_field)
    loaded = load_module(restored, tmp_path / "field.bin", "field")
    assert (loaded.levels, loaded.table_size, loaded.features) == (2, 256, 2)
    for name, tensor in model.state_dict().items():
        assert torch.equal(tensor, restored.state_dict()[name])


def test_header_layout(tmp_path):
    data = encode_blob(BlobHeader(kind="field", levels=8, table_size=16384, features=2), {"a": np.ones((2, 3))})
    assert data[:4] == MAGIC
    assert struct.unpack_from("<H", data, 4)[0] == 1
    assert data[6:11] == b"field"
    assert struct.unpack_from("<III", data, 22) == (8, 16384, 2)
    # payload is little-endian float32 at the end
    assert np.array_equal(np.frombuffer(data[-24:], dtype="<f4"), np.ones(6, dtype=np.float32))


def test_wrong_kind_is_rejected(tmp_path):
    save_module(PatchDiscriminator(8, widths=(8, 16)), tmp_path / "d.bin", "discriminator")
    with pytest.raises(CheckpointError, match="expected a 'field' blob"):
        load_module(PatchDiscriminator(8, widths=(8, 16)), tmp_path / "d.bin", "field")


def test_shape_mismatch_is_rejected(tmp_path):
    save_module(PatchDiscriminator(8, widths=(8, 16)), tmp_path / "d.bin", "discriminator")
    with pytest.raises(CheckpointError) as excinfo:
        load_module(PatchDiscriminator(8, widths=(8, 32)), tmp_path / "d.bin", "discriminator")
    assert "shape mismatch" in excinfo.value.message


def test_truncated_and_bad_magic(tmp_path):
    data = encode_blob(BlobHeader(kind="x"), {"w": np.arange(10, dtype=np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        decode_blob(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_blob(data[:12])
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_blob(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_blob(data + b"\0\0\0\0")


def test_unsupported_version(tmp_path):
    data = bytearray(encode_blob(BlobHeader(kind="x"), {}))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(CheckpointError, match="unsupported blob version 99"):
        decode_blob(bytes(data))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_tensors(tmp_path / "nope.bin", "adapter")


def test_plain_tensors(tmp_path):
    tensors = {"token.scene": np.linspace(0, 1, 5, dtype=np.float32), "m": np.eye(3, dtype=np.float32)}
    save_tensors(tmp_path / "t.bin", tensors, "adapter")
    loaded = load_tensors(tmp_path / "t.bin", "adapter")
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])
