"""EGOT / EGOD binary tensor containers, text masks, and atomic writes.

Layout (all little-endian)::

    magic      4 bytes   b"EGOT" (tensors / images / masks) or b"EGOD" (checkpoints)
    version    u32
    repeated until EOF:
        name_len   u32
        name       name_len bytes of UTF-8
        rank       u32
        dims       rank x u32
        data       prod(dims) x float32
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"EGOT"
CHECKPOINT_MAGIC = b"EGOD"
FORMAT_VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file the mode a plain open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_tensors(tensors: Mapping[str, np.ndarray], magic: bytes = TENSOR_MAGIC) -> bytes:
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            if not np.can_cast(arr.dtype, np.float32, "same_kind") and arr.dtype != np.bool_:
                raise TypeError(f"tensor {name!r} has dtype {arr.dtype}; only 32-bit reals are stored")
            arr = arr.astype(np.float32)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(buf: bytes, magic: bytes = TENSOR_MAGIC) -> dict[str, np.ndarray]:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than magic", len(buf))
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {bytes(buf[:4])!r}", 0)
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError(f"needed {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}", 4)
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        out[name] = data.reshape(dims)
    return out


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors, TENSOR_MAGIC))


def load_tensors(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), TENSOR_MAGIC)


def save_tensor(path, arr: np.ndarray, name: str = "tensor") -> None:
    save_tensors(path, {name: arr})


def load_tensor(path) -> np.ndarray:
    tensors = load_tensors(path)
    if len(tensors) != 1:
        raise ValueError(f"{path}: expected a single tensor, found {len(tensors)}")
    return next(iter(tensors.values()))


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_tensors(params, CHECKPOINT_MAGIC))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes(), CHECKPOINT_MAGIC)


def parse_text_mask(text: str) -> np.ndarray:
    """Rows of 0/1 characters separated by newlines or '/'."""
    rows = [r.strip() for r in text.replace("/", "\n").splitlines() if r.strip()]
    if not rows:
        raise ValueError("empty mask")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise ValueError(f"mask row {i} has length {len(r)}, expected {width}")
        if set(r) - {"0", "1"}:
            raise ValueError(f"mask row {i} contains characters other than 0/1")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)


def format_text_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask, bool)) + "\n"


def load_mask(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == TENSOR_MAGIC:
        arr = load_tensor(path)
        if arr.ndim == 3 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 2:
            raise ValueError(f"{path}: mask tensor must be HxW, got {arr.shape}")
        return arr > 0.5
    return parse_text_mask(raw.decode("utf-8"))


def save_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".txt":
        atomic_write_text(path, format_text_mask(mask))
    else:
        save_tensor(path, np.asarray(mask, np.float32), name="mask")
