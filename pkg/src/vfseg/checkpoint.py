"""Flat binary checkpoint format.

Layout, all little-endian:

    magic "VFCK" | version u16 | preset_len u16 | preset utf-8
    | tensor_count u32 | tensors...

    tensor: name_len u16 | name utf-8 | rank u8 | extents u32*rank
            | float64 data (row-major)

Tensors are written in sorted-name order so identical state always
produces identical bytes. Scalars are rank-0 tensors.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError
from .nn.params import Tensor

CKPT_MAGIC = b"VFCK"
CKPT_VERSION = 1

_HEAD = struct.Struct("<4sHH")
_COUNT = struct.Struct("<I")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<B")


def save_checkpoint(path: str | Path, preset: str, tensors: dict[str, Tensor]) -> None:
    preset_bytes = preset.encode("utf-8")
    if len(preset_bytes) > 0xFFFF:
        raise ValidationError("preset name too long")
    parts = [
        _HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(preset_bytes)),
        preset_bytes,
        _COUNT.pack(len(tensors)),
    ]
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise ValidationError(f"tensor name too long: {name!r}")
        if data.ndim > 0xFF:
            raise ValidationError(f"tensor rank {data.ndim} too large: {name!r}")
        parts.append(_NAME_LEN.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_RANK.pack(data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    blob = b"".join(parts)
    tmp = Path(path).with_suffix(Path(path).suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, source: str) -> None:
        self.blob = blob
        self.off = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise DataError(
                f"checkpoint {self.source} truncated at byte {self.off} "
                f"(needed {n} more)")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def load_checkpoint(path: str | Path,
                    expect_preset: str | None = None) -> tuple[str, dict[str, Tensor]]:
    """Read a checkpoint back; bitwise inverse of save_checkpoint."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(blob, str(path))
    magic, version, preset_len = r.unpack(_HEAD)
    if magic != CKPT_MAGIC:
        raise DataError(f"{path} is not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise DataError(f"checkpoint version {version} unsupported")
    preset = r.take(preset_len).decode("utf-8")
    if expect_preset is not None and preset != expect_preset:
        raise DataError(
            f"checkpoint is for preset {preset!r}, run is configured for {expect_preset!r}")
    (count,) = r.unpack(_COUNT)
    tensors: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = r.unpack(_NAME_LEN)
        name = r.take(name_len).decode("utf-8")
        if name in tensors:
            raise DataError(f"duplicate tensor {name!r} in checkpoint")
        (rank,) = r.unpack(_RANK)
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank))
        size = 1
        for e in extents:
            size *= e
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(extents)
        tensors[name] = data.astype(np.float64).reshape(extents)
    if r.off != len(blob):
        raise DataError(f"checkpoint has {len(blob) - r.off} trailing bytes")
    return preset, tensors


def assign_tensors(targets: dict[str, Tensor], tensors: dict[str, Tensor],
                   *, strict: bool = True, source: str = "checkpoint") -> list[str]:
    """Copy loaded tensors into live arrays in place.

    Strict mode demands an exact name match in both directions. Non-strict
    (the external-weights import path) loads the intersection, still
    enforcing shapes, and returns the names it skipped.
    """
    missing = sorted(set(targets) - set(tensors))
    extra = sorted(set(tensors) - set(targets))
    if strict and (missing or extra):
        raise DataError(
            f"{source} does not match model state "
            f"(missing {missing[:5]}, unexpected {extra[:5]})")
    skipped = missing + extra
    for name, target in targets.items():
        if name not in tensors:
            continue
        value = tensors[name]
        if tuple(value.shape) != tuple(target.shape):
            raise DataError(
                f"{source} tensor {name!r} has shape {tuple(value.shape)}, "
                f"model expects {tuple(target.shape)}")
        target[...] = value
    return skipped
