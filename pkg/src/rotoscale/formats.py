"""File formats: TEN1 tensors, binary PGM/PPM images, dataset manifests.

All formats are bit-exact contracts.  TEN1 is a small binary tensor
container: ASCII magic ``TEN1``, little-endian u32 rank, u32 dims[rank],
then the payload as little-endian float64 in row-major order.  Images are
8-bit binary PGM (P5) / PPM (P6) with maxval 255; pixel data is normalized
to [0, 1] on load.  Segmentation masks reuse P5 but carry raw class
indices, so they bypass normalization.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_MAGIC = b"TEN1"
_MAX_RANK = 8


class FormatError(ValueError):
    """Malformed file contents; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_tensor(path, array) -> None:
    """Write an ndarray as a TEN1 file."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 0:
        raise ValueError("rank-0 tensors are not representable in TEN1")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.astype("<f8").tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a TEN1 file back into a float64 ndarray."""
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}", 0)
    if len(blob) < 8:
        raise FormatError("truncated header: missing rank", 4)
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank == 0 or rank > _MAX_RANK:
        raise FormatError(f"unsupported rank {rank}", 4)
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise FormatError("truncated header: missing dims", 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(dims, dtype=np.int64))
    expected = dims_end + 8 * count
    if len(blob) != expected:
        raise FormatError(
            f"payload size mismatch: file has {len(blob)} bytes, expected {expected}",
            dims_end,
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=dims_end)
    return data.reshape(dims).astype(np.float64)


def _read_pnm_header(blob: bytes, magic: bytes, path):
    """Parse 'P5'/'P6' header tokens, honoring '#' comments, and return
    (width, height, offset of first payload byte)."""
    if blob[:2] != magic:
        raise FormatError(f"{path}: bad magic {blob[:2]!r}, expected {magic!r}", 0)
    pos = 2
    tokens = []
    while len(tokens) < 3:
        if pos >= len(blob):
            raise FormatError(f"{path}: truncated header", pos)
        ch = blob[pos : pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos : pos + 1].isspace():
                pos += 1
            token = blob[start:pos]
            if not token.isdigit():
                raise FormatError(f"{path}: non-numeric header token {token!r}", start)
            tokens.append(int(token))
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after maxval", pos)
    pos += 1
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, expected 255", 2)
    return width, height, pos


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    width, height, pos = _read_pnm_header(blob, magic, path)
    count = width * height * channels
    if len(blob) - pos != count:
        raise FormatError(
            f"{path}: payload has {len(blob) - pos} bytes, expected {count}", pos
        )
    data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos)
    if channels == 1:
        return data.reshape(height, width)
    return data.reshape(height, width, channels).transpose(2, 0, 1)


def _write_pnm(path, magic: bytes, raw: np.ndarray, width: int, height: int) -> None:
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (width, height))
        fh.write(raw.tobytes(order="C"))


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, values) -> None:
    """Write a channels-first [C, H, W] (or [H, W]) image in [0, 1] as PGM/PPM."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3 or v.shape[0] not in (1, 3):
        raise ValueError(f"expected [C, H, W] with C in {{1, 3}}, got shape {v.shape}")
    c, h, w = v.shape
    if c == 1:
        _write_pnm(path, b"P5", _to_bytes(v[0]), w, h)
    else:
        _write_pnm(path, b"P6", _to_bytes(v.transpose(1, 2, 0)), w, h)


def load_image(path) -> np.ndarray:
    """Read a PGM/PPM image into channels-first float64 in [0, 1]."""
    magic = Path(path).read_bytes()[:2]
    if magic == b"P5":
        return _read_pnm(path, b"P5", 1)[None].astype(np.float64) / 255.0
    if magic == b"P6":
        return _read_pnm(path, b"P6", 3).astype(np.float64) / 255.0
    raise FormatError(f"{path}: bad magic {magic!r}, expected b'P5' or b'P6'", 0)


def save_mask(path, mask) -> None:
    """Write a class-index mask as P5 with raw (unnormalized) values."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    if m.min() < 0 or m.max() > 255:
        raise ValueError("mask class indices must fit in a byte")
    h, w = m.shape
    _write_pnm(path, b"P5", m.astype(np.uint8), w, h)


def load_mask(path) -> np.ndarray:
    """Read a P5 mask written by save_mask back into int64 class indices."""
    return _read_pnm(path, b"P5", 1).astype(np.int64)


def write_keyvalues(path, items) -> None:
    """Write a key=value text file, one entry per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in items.items():
            fh.write(f"{key}={value}\n")


def read_keyvalues(path) -> dict[str, str]:
    """Read a key=value text file; '#' lines are comments, duplicates rejected."""
    items: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in items:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        items[key] = value.strip()
    return items


def save_manifest(path, pairs) -> None:
    """Write 'image_path mask_path' lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for image_path, mask_path in pairs:
            fh.write(f"{image_path} {mask_path}\n")


def load_manifest(path) -> list[tuple[Path, Path]]:
    """Read a manifest; relative entries resolve against the manifest's directory."""
    base = Path(path).parent
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'image_path mask_path'")
        pairs.append((base / parts[0], base / parts[1]))
    return pairs
