"""Synthetic brain-like label maps.

Each slice is a set of nested, slightly wobbly ellipses (scalp, skull, CSF,
gray matter, white-matter core) with an optional elliptical infarct placed
strictly inside the parenchyma. Anatomy shrinks towards both ends of a
volume so that cranial-height slice selection has something to discard.

Randomness comes from Philox streams keyed by (seed, patient id, slice
index), so any slice can be regenerated on its own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DEFAULT_RATIOS, Manifest, SliceRecord, split_patients
from .errors import ConfigError, IngestionError
from .fileformat import write_iism
from .labels import DEFAULT_CATALOG, ClassCatalog

# class written inside each ring, outermost first
_RING_CLASSES = (1, 2, 3, 4, 5)
_PARENCHYMA = (4, 5)


@dataclass
class PhantomConfig:
    image_size: int = 64
    lesion_probability: float = 0.3
    lesion_radius_range: tuple[float, float] = (6.0, 11.0)
    # outer radius of scalp, bone, CSF, gray matter, white matter, as a fraction of the head radius
    tissue_ring_radii: tuple[float, ...] = (1.0, 0.88, 0.79, 0.72, 0.52)
    seed: int = 0
    slices_per_volume: int = 40
    second_lesion_probability: float = 0.15
    head_fraction: float = 0.46
    min_scale: float = 0.6
    wobble: float = 0.03

    def __post_init__(self):
        self.lesion_radius_range = tuple(float(v) for v in self.lesion_radius_range)
        self.tissue_ring_radii = tuple(float(v) for v in self.tissue_ring_radii)
        self.validate()

    def validate(self) -> None:
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        for name in ("lesion_probability", "second_lesion_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.lesion_radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"lesion_radius_range must satisfy 0 < lo <= hi, got {self.lesion_radius_range}")
        radii = self.tissue_ring_radii
        if len(radii) != len(_RING_CLASSES):
            raise ConfigError(f"need {len(_RING_CLASSES)} ring radii, got {len(radii)}")
        if any(b >= a for a, b in zip(radii, radii[1:])) or radii[-1] <= 0:
            raise ConfigError(f"ring radii must be positive and strictly decreasing, got {radii}")
        if self.slices_per_volume < 1:
            raise ConfigError("slices_per_volume must be >= 1")
        if not 0 < self.min_scale <= 1:
            raise ConfigError(f"min_scale must lie in (0, 1], got {self.min_scale}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "PhantomConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class PhantomVolume:
    patient_id: str
    slices: list[tuple[np.ndarray, int]] = field(default_factory=list)

    @property
    def cranial_height(self) -> int:
        return len(self.slices)


def slice_rng(seed: int, patient_id: str, slice_index: int) -> np.random.Generator:
    h = hashlib.sha256(f"{seed}:{patient_id}:{slice_index}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(h[:16], "little")))


def _ellipse_radius(size: int, cy: float, cx: float, ry: float, rx: float, theta: float = 0.0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(theta), np.sin(theta)
    u, v = c * dy + s * dx, -s * dy + c * dx
    return np.sqrt((u / ry) ** 2 + (v / rx) ** 2)


def _tissue(cfg: PhantomConfig, rng: np.random.Generator, scale: float, aspect: float) -> np.ndarray:
    n = cfg.image_size
    R = cfg.head_fraction * n * scale
    cy = n / 2 + rng.uniform(-0.02, 0.02) * n
    cx = n / 2 + rng.uniform(-0.02, 0.02) * n
    rho = _ellipse_radius(n, cy, cx, R * (1 + aspect), R * (1 - aspect))
    yy, xx = np.mgrid[0:n, 0:n]
    angle = np.arctan2(yy + 0.5 - cy, xx + 0.5 - cx)
    radii = np.array(cfg.tissue_ring_radii)
    gaps = -np.diff(radii)
    m = np.zeros((n, n), dtype=np.uint8)
    for k, (r, cls) in enumerate(zip(radii, _RING_CLASSES)):
        # jitter each boundary by less than half the neighbouring gaps so rings stay nested
        room = min(gaps[k - 1] if k > 0 else np.inf, gaps[k] if k < len(gaps) else r) * 0.3
        r = r + rng.uniform(-room, room)
        harmonic = rng.integers(2, 5)
        bump = cfg.wobble * np.sin(harmonic * angle + rng.uniform(0, 2 * np.pi)) if k >= 2 else 0.0
        m[rho < r * (1 + bump)] = cls
    return m


def _place_lesion(cfg: PhantomConfig, rng: np.random.Generator, parenchyma: np.ndarray, tries: int = 50):
    n = cfg.image_size
    cand = np.argwhere(parenchyma)
    if len(cand) == 0:
        return None
    lo, hi = cfg.lesion_radius_range
    for _ in range(tries):
        ry, rx = rng.uniform(lo, hi, size=2)
        cy, cx = cand[rng.integers(len(cand))] + 0.5
        blob = _ellipse_radius(n, cy, cx, ry, rx, rng.uniform(0, np.pi)) < 1.0
        if blob.any() and not np.any(blob & ~parenchyma):
            return blob
    return None


def generate_slice(cfg: PhantomConfig, rng: np.random.Generator, scale: float = 1.0, aspect: float = 0.0):
    """Draw one slice; returns ``(label_map, has_lesion)``."""
    m = _tissue(cfg, rng, scale, aspect)
    if rng.random() >= cfg.lesion_probability:
        return m, 0
    parenchyma = np.isin(m, _PARENCHYMA)
    blob = _place_lesion(cfg, rng, parenchyma)
    if blob is None:
        return m, 0
    m[blob] = DEFAULT_CATALOG.lesion_class
    if rng.random() < cfg.second_lesion_probability:
        second = _place_lesion(cfg, rng, parenchyma)
        if second is not None:
            m[second] = DEFAULT_CATALOG.lesion_class
    return m, 1


def volume_scale(cfg: PhantomConfig, k: int) -> float:
    n = cfg.slices_per_volume
    return cfg.min_scale + (1 - cfg.min_scale) * float(np.sin(np.pi * (k + 0.5) / n))


def generate_volume(cfg: PhantomConfig, patient_id: str) -> PhantomVolume:
    prng = slice_rng(cfg.seed, patient_id, -1)
    aspect = float(prng.uniform(0.0, 0.1))
    vol = PhantomVolume(patient_id)
    for k in range(cfg.slices_per_volume):
        rng = slice_rng(cfg.seed, patient_id, k)
        vol.slices.append(generate_slice(cfg, rng, volume_scale(cfg, k), aspect + rng.uniform(-0.01, 0.01)))
    return vol


def patient_ids(n_patients: int) -> list[str]:
    return [f"P{i:04d}" for i in range(n_patients)]


def generate_corpus(
    cfg: PhantomConfig,
    n_patients: int,
    out_dir,
    ratios=DEFAULT_RATIOS,
    catalog: ClassCatalog = DEFAULT_CATALOG,
) -> Manifest:
    """Write ``<patient>/<slice>.iism`` files plus ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir).resolve()
    ids = patient_ids(n_patients)
    splits = split_patients(ids, ratios, cfg.seed) if len(ids) >= 3 else dict.fromkeys(ids, "train")
    records = []
    for pid in ids:
        vol = generate_volume(cfg, pid)
        pdir = out / pid
        for k, (m, flag) in enumerate(vol.slices):
            rel = f"{pid}/{k}.iism"
            try:
                pdir.mkdir(parents=True, exist_ok=True)
                write_iism(out / rel, m, catalog.num_classes)
            except OSError as exc:
                raise IngestionError(f"cannot write {out / rel}: {exc}") from exc
            records.append(SliceRecord(pid, k, rel, flag, splits[pid]))
    manifest = Manifest(records, catalog, (cfg.image_size, cfg.image_size), out)
    try:
        manifest.write()
    except OSError as exc:
        raise IngestionError(f"cannot write manifest under {out}: {exc}") from exc
    return manifest
