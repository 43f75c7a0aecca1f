"""Binary tensor container, PGM export, and the text file formats.

Tensor files: magic ``STSA``, little-endian throughout.
  version 1   a single tensor: u32 version, u8 dtype (0=f32, 1=f64),
              u8 rank, u32 extent per axis, raw IEEE-754 payload.
  version 2   a named container (checkpoints): u32 version, u32 entry
              count, then per entry u16 name length, UTF-8 name, and the
              same dtype/rank/extents/payload block as version 1.

Text formats: config files are ``key = value`` lines with ``#`` comments;
fixation files are ``frame x y`` lines of 0-based integers.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"STSA"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _encode_block(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    code = _CODES_BY_KIND.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    head = struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    le = arr.astype(_DTYPE_CODES[code], copy=False)
    return head + le.tobytes()


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(
                f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def decode_block(self) -> np.ndarray:
        code, rank = struct.unpack("<BB", self.take(2, "dtype/rank"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"{self.path}: unknown dtype code {code} at byte {self.pos - 2}")
        if rank < 1:
            raise FormatError(f"{self.path}: rank must be >= 1, got {rank}")
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank, "extents"))
        if min(shape) < 1:
            raise FormatError(f"{self.path}: zero extent in shape {shape}")
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(shape))
        payload = self.take(count * dtype.itemsize, "payload")
        return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _open_reader(path) -> tuple[_Reader, int]:
    blob = Path(path).read_bytes()
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    return r, version


def write_tensor(path, arr) -> None:
    data = getattr(arr, "data", arr)
    Path(path).write_bytes(MAGIC + struct.pack("<I", 1) + _encode_block(np.asarray(data)))


def read_tensor(path) -> np.ndarray:
    r, version = _open_reader(path)
    if version != 1:
        raise FormatError(f"{path}: expected a version-1 tensor file, got version {version}")
    arr = r.decode_block()
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes at byte {r.pos}")
    return arr


def write_checkpoint(path, entries: dict) -> None:
    """Named tensor container; iteration order of ``entries`` is preserved."""
    out = [MAGIC, struct.pack("<II", 2, len(entries))]
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(_encode_block(np.asarray(getattr(arr, "data", arr))))
    Path(path).write_bytes(b"".join(out))


def read_checkpoint(path) -> dict:
    r, version = _open_reader(path)
    if version != 2:
        raise FormatError(f"{path}: expected a version-2 container, got version {version}")
    (count,) = struct.unpack("<I", r.take(4, "entry count"))
    entries = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "name length"))
        name = r.take(nlen, "name").decode("utf-8")
        entries[name] = r.decode_block()
    if r.pos != len(r.blob):
        raise FormatError(f"{path}: {len(r.blob) - r.pos} trailing bytes at byte {r.pos}")
    return entries


def write_pgm(path, grid) -> None:
    """8-bit binary PGM; values scale linearly so the map max lands on 255."""
    g = np.asarray(getattr(grid, "grid", grid), dtype=np.float64)
    if g.ndim != 2:
        raise FormatError(f"PGM export needs a 2-D map, got shape {g.shape}")
    peak = g.max()
    if peak <= 0:
        pix = np.zeros(g.shape, dtype=np.uint8)
    else:
        pix = np.floor(g / peak * 255.0 + 0.5).clip(0, 255).astype(np.uint8)
    h, w = g.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())


def write_fixations(path, per_frame_points) -> None:
    lines = []
    for frame, points in enumerate(per_frame_points):
        for x, y in points:
            lines.append(f"{frame} {x} {y}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_fixations(path, n_frames: int):
    """Per-frame fixation lists from ``frame x y`` lines."""
    out = [[] for _ in range(n_frames)]
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'frame x y', got {line!r}")
        try:
            frame, x, y = (int(p) for p in parts)
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if not 0 <= frame < n_frames:
            raise FormatError(f"{path}:{lineno}: frame {frame} out of range 0..{n_frames - 1}")
        out[frame].append((x, y))
    return out


def parse_config_text(text: str, path="<config>") -> dict:
    """``key = value`` lines into {key: (value string, line number)}."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise FormatError(f"{path}:{lineno}: empty key or value in {line!r}")
        if key in out:
            raise FormatError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = (value, lineno)
    return out


def read_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), path)
