"""IISM1 label-map files and 8-bit label PNGs.

IISM1 layout (little-endian)::

    b"IISM" | version u8 = 1 | H u32 | W u32 | C u8 | H*W class-id bytes, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .labels import NUM_CLASSES, check_labelmap

MAGIC = b"IISM"
VERSION = 1
_HEADER = struct.Struct("<4sBIIB")


def to_iism_bytes(m, num_classes: int = NUM_CLASSES) -> bytes:
    m = check_labelmap(m, num_classes)
    if m.ndim != 2:
        raise FormatError(f"IISM1 stores a single 2-D map, got shape {m.shape}")
    H, W = m.shape
    return _HEADER.pack(MAGIC, VERSION, H, W, num_classes) + np.ascontiguousarray(m).tobytes()


def from_iism_bytes(data: bytes) -> tuple[np.ndarray, int]:
    """Parse IISM1 bytes into ``(label_map, num_classes)``."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated IISM1 header")
    magic, version, H, W, C = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported IISM version {version}")
    body = data[_HEADER.size:]
    if len(body) != H * W:
        raise FormatError(f"expected {H * W} payload bytes for {H}x{W}, found {len(body)}")
    m = np.frombuffer(body, dtype=np.uint8).reshape(H, W).copy()
    return check_labelmap(m, C), C


def write_iism(path, m, num_classes: int = NUM_CLASSES) -> None:
    Path(path).write_bytes(to_iism_bytes(m, num_classes))


def read_iism(path) -> np.ndarray:
    return from_iism_bytes(Path(path).read_bytes())[0]


def write_label_png(path, m) -> None:
    from PIL import Image

    Image.fromarray(check_labelmap(m), mode="L").save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise FormatError(f"{path}: label PNG must be 8-bit single channel, got mode {img.mode}")
        # for palette PNGs the stored index is the class id
        arr = np.array(img)
    return check_labelmap(arr)


def read_labelmap(path, num_classes: int | None = None) -> np.ndarray:
    """Read an ``.iism`` or ``.png`` label map, validating ids against ``num_classes``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        m = read_label_png(path)
    else:
        m = read_iism(path)
    return check_labelmap(m, num_classes)

