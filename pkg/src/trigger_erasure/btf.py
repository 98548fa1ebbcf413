"""BTF tensor files, named-section containers and PPM/PGM image output.

A single tensor (BTF1)::

    b"BTF1" | u8 dtype (1=f64, 2=u8) | u8 ndim | ndim x u64 extents | payload

A section container (BTFS) bundles named BTF1 blobs::

    b"BTFS" | u32 count | count x (u16 name_len | name utf-8 | u64 blob_len | blob)

All integers little-endian, no padding, payload row-major.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFile, ValidationError

MAGIC = b"BTF1"
SECTION_MAGIC = b"BTFS"
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES = {np.dtype("float64"): 1, np.dtype("uint8"): 2}


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODES.get(array.dtype)
    if code is None:
        raise ValidationError(f"BTF stores float64 or uint8, got {array.dtype}")
    if array.ndim > 255:
        raise ValidationError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPES[code]).tobytes()


def decode(blob: bytes) -> np.ndarray:
    array, used = _decode_prefix(blob, 0)
    if used != len(blob):
        raise CorruptFile(f"{len(blob) - used} trailing bytes after tensor payload")
    return array


def _decode_prefix(blob: bytes, offset: int) -> tuple[np.ndarray, int]:
    if blob[offset : offset + 4] != MAGIC:
        raise CorruptFile("bad magic, expected BTF1")
    if len(blob) < offset + 6:
        raise CorruptFile("truncated header")
    code, ndim = struct.unpack_from("<BB", blob, offset + 4)
    if code not in DTYPES:
        raise CorruptFile(f"unknown dtype code {code}")
    pos = offset + 6
    if len(blob) < pos + 8 * ndim:
        raise CorruptFile("truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
    pos += 8 * ndim
    dtype = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) < pos + nbytes:
        raise CorruptFile("truncated payload")
    array = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return array.reshape(shape).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode(array))


def load_tensor(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def encode_sections(sections: dict[str, np.ndarray]) -> bytes:
    out = [SECTION_MAGIC, struct.pack("<I", len(sections))]
    for name, array in sections.items():
        raw_name = name.encode("utf-8")
        blob = encode(array)
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<Q", len(blob)) + blob)
    return b"".join(out)


def decode_sections(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != SECTION_MAGIC:
        raise CorruptFile("bad magic, expected BTFS")
    if len(blob) < 8:
        raise CorruptFile("truncated section header")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        if len(blob) < pos + 2:
            raise CorruptFile("truncated section name")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8", errors="strict")
        pos += name_len
        if len(blob) < pos + 8:
            raise CorruptFile("truncated section length")
        (blob_len,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        if len(blob) < pos + blob_len:
            raise CorruptFile(f"section {name!r} is truncated")
        sections[name] = decode(blob[pos : pos + blob_len])
        pos += blob_len
    if pos != len(blob):
        raise CorruptFile("trailing bytes after last section")
    return sections


def save_sections(path: str | Path, sections: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_sections(sections))


def load_sections(path: str | Path) -> dict[str, np.ndarray]:
    return decode_sections(Path(path).read_bytes())


def text_section(payload: dict) -> np.ndarray:
    """JSON header stored as a uint8 tensor (keys sorted for byte stability)."""
    raw = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).copy()


def read_text_section(array: np.ndarray) -> dict:
    try:
        return json.loads(bytes(array.astype(np.uint8)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"header section is not valid JSON: {exc}") from exc


def to_u8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8 bits (the only place pixels are rounded)."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    pixels = to_u8(image)
    h, w, _ = pixels.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """One byte per cell, scaled so the grid maximum maps to 255."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max() if grid.size and grid.max() > 0 else 1.0
    cells = np.round(np.clip(grid / peak, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = cells.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + cells.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    kind, dims, _maxval, payload = parts
    w, h = (int(v) for v in dims.split())
    data = np.frombuffer(payload, dtype=np.uint8)
    return data.reshape(h, w, 3) if kind == b"P6" else data.reshape(h, w)
