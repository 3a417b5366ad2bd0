"""
Versioned binary parameter blobs.

Layout (all little-endian):

    magic      4 bytes  b"MLDN"
    version    u16
    kind       16 bytes ascii, NUL padded ("field", "discriminator", "prior", ...)
    L, T, F    3 x u32  hash-grid header (0 when not applicable)
    count      u32      number of tensors
    per tensor: name length u16, name utf-8, ndim u8, dims ndim x u32
    payload    float32 values of every tensor in declaration order
"""

import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from app.config.logger import Logger
from app.services.errors import CheckpointError

logger = Logger.get_logger(__name__)

MAGIC = b"MLDN"
FORMAT_VERSION = 1
_KIND_BYTES = 16


class TensorEntry(BaseModel):
    name: str
    shape: List[int]


class BlobHeader(BaseModel):
    """Decoded blob header."""

    kind: str
    version: int = FORMAT_VERSION
    levels: int = 0
    table_size: int = 0
    features: int = 0
    tensors: List[TensorEntry] = Field(default_factory=list)

    @property
    def parameter_count(self) -> int:
        return sum(int(np.prod(entry.shape)) for entry in self.tensors)


def encode_blob(header: BlobHeader, tensors: Dict[str, np.ndarray]) -> bytes:
    """Serialize named float arrays under `header` (tensor table is rebuilt from `tensors`)."""
    kind = header.kind.encode("ascii")
    if len(kind) > _KIND_BYTES:
        raise CheckpointError(f"kind tag too long: {header.kind}")
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        kind.ljust(_KIND_BYTES, b"\0"),
        struct.pack("<III", header.levels, header.table_size, header.features),
        struct.pack("<I", len(tensors)),
    ]
    payload = []
    for name, array in tensors.items():
        encoded = name.encode("utf-8")
        shape = np.shape(array)
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape))
        payload.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts + payload)


def decode_blob(data: bytes, source: str = "<bytes>") -> Tuple[BlobHeader, Dict[str, np.ndarray]]:
    """Parse a blob into its header and named float32 arrays."""
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"{source}: bad magic {data[:4]!r}", file=source)
        (version,) = struct.unpack_from("<H", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported blob version {version}", file=source, version=version)
        offset = 6
        kind = data[offset : offset + _KIND_BYTES].rstrip(b"\0").decode("ascii")
        offset += _KIND_BYTES
        levels, table_size, features, count = struct.unpack_from("<IIII", data, offset)
        offset += 16
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = list(struct.unpack_from(f"<{ndim}I", data, offset))
            offset += 4 * ndim
            entries.append(TensorEntry(name=name, shape=shape))
        tensors = {}
        for entry in entries:
            size = int(np.prod(entry.shape))
            chunk = data[offset : offset + 4 * size]
            if len(chunk) != 4 * size:
                raise CheckpointError(f"{source}: truncated payload at tensor '{entry.name}'", file=source)
            tensors[entry.name] = np.frombuffer(chunk, dtype="<f4").reshape(entry.shape).astype(np.float32)
            offset += 4 * size
        if offset != len(data):
            raise CheckpointError(f"{source}: {len(data) - offset} trailing bytes", file=source)
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: truncated header ({e})", file=source)
    header = BlobHeader(
        kind=kind, version=version, levels=levels, table_size=table_size, features=features, tensors=entries
    )
    return header, tensors


def save_module(
    module: torch.nn.Module, path: Path, kind: str, levels: int = 0, table_size: int = 0, features: int = 0
) -> BlobHeader:
    """Write a module's state dict as a blob."""
    state = {name: tensor.detach().cpu().numpy() for name, tensor in module.state_dict().items()}
    header = BlobHeader(
        kind=kind,
        levels=levels,
        table_size=table_size,
        features=features,
        tensors=[TensorEntry(name=n, shape=list(a.shape)) for n, a in state.items()],
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_blob(header, state))
    logger.debug(f"Saved {kind} blob ({header.parameter_count} values) to {path}")
    return header


def load_module(module: torch.nn.Module, path: Path, kind: str) -> BlobHeader:
    """Load a blob into `module`, checking kind and the tensor table."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}", file=str(path))
    header, tensors = decode_blob(path.read_bytes(), source=str(path))
    if header.kind != kind:
        raise CheckpointError(f"{path}: expected a '{kind}' blob, found '{header.kind}'", file=str(path))
    expected = module.state_dict()
    if list(expected) != list(tensors):
        raise CheckpointError(f"{path}: tensor names do not match the module", file=str(path))
    for name, target in expected.items():
        if list(target.shape) != list(tensors[name].shape):
            raise CheckpointError(
                f"{path}: shape mismatch for '{name}'",
                file=str(path),
                expected=list(target.shape),
                found=list(tensors[name].shape),
            )
    module.load_state_dict(
        {name: torch.from_numpy(tensors[name].copy()).to(expected[name].dtype) for name in expected}
    )
    return header


def save_tensors(path: Path, tensors: Dict[str, np.ndarray], kind: str) -> BlobHeader:
    """Write a plain name -> array mapping as a blob."""
    header = BlobHeader(kind=kind, tensors=[TensorEntry(name=n, shape=list(np.shape(a))) for n, a in tensors.items()])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_blob(header, tensors))
    return header


def load_tensors(path: Path, kind: str) -> Dict[str, np.ndarray]:
    """Read a blob written by `save_tensors`, checking its kind."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}", file=str(path))
    header, tensors = decode_blob(path.read_bytes(), source=str(path))
    if header.kind != kind:
        raise CheckpointError(f"{path}: expected a '{kind}' blob, found '{header.kind}'", file=str(path))
    return tensors
