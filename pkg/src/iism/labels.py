"""Discrete label space and mask primitives.

A label map is a 2-D ``uint8`` array of class ids; a one-hot mask is the
matching ``(C, H, W)`` binary array. Functions here are pure and accept
plain numpy arrays, so a "LabelMap" is simply any array that passes
:func:`check_labelmap`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import CatalogError, InvalidLogitError, LabelError


@dataclass(frozen=True)
class ClassEntry:
    index: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ClassCatalog:
    """Ordered class roster with display colors and one lesion class."""

    entries: tuple[ClassEntry, ...]
    lesion_class: int

    def __post_init__(self):
        if not self.entries:
            raise CatalogError("catalog has no classes")
        for i, e in enumerate(self.entries):
            if e.index != i:
                raise CatalogError(f"class indices must be contiguous from 0, got {e.index} at position {i}")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise CatalogError(f"duplicate class names in {names}")
        if not 0 <= self.lesion_class < len(self.entries):
            raise CatalogError(f"lesion class {self.lesion_class} not in catalog")

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def palette(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)

    def to_dict(self) -> dict:
        return {
            "classes": [{"index": e.index, "name": e.name, "color": list(e.color)} for e in self.entries],
            "lesion_class": self.lesion_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassCatalog":
        try:
            entries = tuple(ClassEntry(int(c["index"]), str(c["name"]), tuple(int(v) for v in c["color"])) for c in d["classes"])
            return cls(entries, int(d["lesion_class"]))
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"malformed catalog document: {exc}") from exc


# Index order is a project convention; the source material names the
# tissues but not their integer codes.
DEFAULT_CATALOG = ClassCatalog(
    entries=(
        ClassEntry(0, "background", (0, 0, 0)),
        ClassEntry(1, "soft_tissue", (205, 160, 120)),
        ClassEntry(2, "bone", (245, 245, 245)),
        ClassEntry(3, "csf", (40, 110, 220)),
        ClassEntry(4, "gray_matter", (128, 128, 128)),
        ClassEntry(5, "white_matter", (200, 200, 120)),
        ClassEntry(6, "infarct", (220, 30, 30)),
    ),
    lesion_class=6,
)

NUM_CLASSES = DEFAULT_CATALOG.num_classes
LESION_CLASS = DEFAULT_CATALOG.lesion_class


def check_labelmap(m, num_classes: int | None = None) -> np.ndarray:
    """Validate ``m`` as a label map and return it as a ``uint8`` array.

    Leading batch axes are allowed; the last two axes are (H, W).
    """
    arr = np.asarray(m)
    if arr.ndim < 2:
        raise LabelError(f"label map needs at least 2 dimensions, got shape {arr.shape}")
    if arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise LabelError(f"label map must be at least 1x1, got shape {arr.shape}")
    if arr.dtype.kind not in "ui":
        if arr.dtype.kind == "b":
            arr = arr.astype(np.uint8)
        else:
            raise LabelError(f"label map must hold integers, got dtype {arr.dtype}")
    if arr.size and arr.min() < 0:
        bad = tuple(int(i) for i in np.argwhere(arr < 0)[0])
        raise LabelError(f"negative label {int(arr[bad])} at pixel {bad}")
    if num_classes is not None and arr.size and arr.max() >= num_classes:
        bad = tuple(int(i) for i in np.argwhere(arr >= num_classes)[0])
        raise LabelError(f"label {int(arr[bad])} at pixel {bad} is out of range for {num_classes} classes")
    if arr.size and arr.max() > 255:
        raise LabelError("label ids above 255 are not representable")
    return arr.astype(np.uint8, copy=False)


def onehot(m, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Encode a label map (or a batch of them) as ``(..., C, H, W)`` binary channels."""
    m = check_labelmap(m, num_classes)
    classes = np.arange(num_classes, dtype=np.uint8).reshape((num_classes, 1, 1))
    return (m[..., None, :, :] == classes).astype(np.uint8)


def argmax_decode(logits) -> np.ndarray:
    """Pixel-wise argmax over the channel axis (``-3``); ties go to the lowest index."""
    if hasattr(logits, "detach"):
        logits = logits.detach().cpu().numpy()
    L = np.asarray(logits)
    if L.ndim < 3:
        raise InvalidLogitError(f"logit field needs shape (..., C, H, W), got {L.shape}")
    if not np.all(np.isfinite(L)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(L))[0])
        raise InvalidLogitError(f"non-finite logit at index {bad}")
    return np.argmax(L, axis=-3).astype(np.uint8)


def resize_nearest(m, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize with pixel-centre sampling.

    Output pixel (i, j) copies source pixel (floor((i+0.5)*H/h), floor((j+0.5)*W/w)).
    """
    if h < 1 or w < 1:
        raise LabelError(f"target size must be at least 1x1, got {h}x{w}")
    m = check_labelmap(m)
    H, W = m.shape[-2:]
    rows = ((2 * np.arange(h) + 1) * H) // (2 * h)
    cols = ((2 * np.arange(w) + 1) * W) // (2 * w)
    return m[..., rows[:, None], cols[None, :]]


def lesion_flag(m, catalog: ClassCatalog = DEFAULT_CATALOG) -> int:
    m = check_labelmap(m, catalog.num_classes)
    return int(np.any(m == catalog.lesion_class))


def colorize(m, catalog: ClassCatalog = DEFAULT_CATALOG) -> np.ndarray:
    m = check_labelmap(m)
    if m.size and m.max() >= catalog.num_classes:
        raise CatalogError(f"class {int(m.max())} present in map but missing from catalog")
    return catalog.palette()[m]


def render_png(m, catalog: ClassCatalog = DEFAULT_CATALOG) -> bytes:
    """Paint each class with its catalog color and return RGB PNG bytes."""
    from PIL import Image

    rgb = colorize(m, catalog)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_rendered_png(data: bytes, catalog: ClassCatalog = DEFAULT_CATALOG) -> np.ndarray:
    """Map a rendered RGB PNG back to class ids via the inverse palette."""
    from PIL import Image

    rgb = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
    palette = catalog.palette()
    if len({tuple(c) for c in palette}) != len(palette):
        raise CatalogError("palette colors are not unique, cannot invert")
    match = np.all(rgb[:, :, None, :] == palette[None, None, :, :], axis=-1)
    if not np.all(match.any(axis=-1)):
        raise CatalogError("image contains colors outside the catalog palette")
    return np.argmax(match, axis=-1).astype(np.uint8)
