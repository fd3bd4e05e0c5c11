"""Corpus ingestion, slice selection, mask fusion, patient splits and
lesion-weighted sampling.

Manifests are JSON-lines files. The first line is a header holding the
class catalog and image size; every following line is one slice record::

    {"format": "iism-manifest", "version": 1, "catalog": {...}, "image_size": [H, W]}
    {"patient_id": "P0000", "slice_index": 0, "path": "P0000/0.iism", "lesion": 0, "split": "train"}
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import FusionError, IngestionError, SelectionError, SplitError
from .fileformat import read_labelmap
from .labels import DEFAULT_CATALOG, ClassCatalog, check_labelmap, lesion_flag, onehot, resize_nearest

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.jsonl"
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


@dataclass(frozen=True)
class SliceRecord:
    patient_id: str
    slice_index: int
    path: str
    lesion: int
    split: str


@dataclass(frozen=True)
class SamplerWeights:
    lesion_weight: float = 5.0
    base_weight: float = 1.0

    def __post_init__(self):
        if not (self.lesion_weight > 0 and self.base_weight > 0):
            raise ValueError(f"sampler weights must be positive, got {self}")


@dataclass
class Manifest:
    records: list[SliceRecord]
    catalog: ClassCatalog = DEFAULT_CATALOG
    image_size: tuple[int, int] | None = None
    root: Path = field(default_factory=Path.cwd)

    def __len__(self):
        return len(self.records)

    def resolve(self, i: int) -> Path:
        return self.root / self.records[i].path

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(len(self.records)))
        return [i for i, r in enumerate(self.records) if r.split == split]

    def lesion_flags(self, split: str | None = None) -> np.ndarray:
        return np.array([self.records[i].lesion for i in self.indices(split)], dtype=np.int64)

    def lines(self) -> list[str]:
        header = {
            "format": "iism-manifest",
            "version": 1,
            "catalog": self.catalog.to_dict(),
            "image_size": list(self.image_size) if self.image_size else None,
        }
        out = [json.dumps(header, sort_keys=True)]
        out += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return out

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode()).hexdigest()

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.lines()) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        except OSError as exc:
            raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise IngestionError(f"{path}: manifest has no header line")
        header = json.loads(lines[0])
        if header.get("format") != "iism-manifest":
            raise IngestionError(f"{path}: not an iism manifest")
        size = header.get("image_size")
        records = [SliceRecord(**json.loads(ln)) for ln in lines[1:]]
        return cls(
            records=records,
            catalog=ClassCatalog.from_dict(header["catalog"]),
            image_size=tuple(size) if size else None,
            root=path.parent.resolve(),
        )

    def check_leakage(self) -> None:
        seen: dict[str, str] = {}
        for r in self.records:
            if seen.setdefault(r.patient_id, r.split) != r.split:
                raise SplitError(f"patient {r.patient_id} appears in splits {seen[r.patient_id]} and {r.split}")


def select_slices(n_slices: int, lo: float = 0.20, hi: float = 0.95) -> range:
    """Indices kept by the cranial-height rule: floor(lo*n) <= i < ceil(hi*n)."""
    if n_slices < 1:
        raise SelectionError(f"need at least one slice, got {n_slices}")
    if not 0.0 <= lo < hi <= 1.0:
        raise SelectionError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    # round first so that e.g. 0.95*100 = 95.00000000000001 does not ceil to 96
    start = math.floor(round(lo * n_slices, 9))
    stop = min(math.ceil(round(hi * n_slices, 9)), n_slices)
    if stop <= start:
        raise SelectionError(f"empty slice range for n={n_slices}, lo={lo}, hi={hi}")
    return range(start, stop)


def fuse_masks(tissue, infarct, catalog: ClassCatalog = DEFAULT_CATALOG) -> np.ndarray:
    """Overlay a binary infarct mask on a tissue map; the infarct label wins."""
    tissue = check_labelmap(tissue, catalog.num_classes)
    infarct = np.asarray(infarct)
    if infarct.shape != tissue.shape:
        raise FusionError(f"shape mismatch: tissue {tissue.shape} vs infarct {infarct.shape}")
    return np.where(infarct.astype(bool), np.uint8(catalog.lesion_class), tissue).astype(np.uint8)


def split_patients(patient_ids: Sequence[str], ratios=DEFAULT_RATIOS, seed: int = 0) -> dict[str, str]:
    """Assign each patient to train/val/test.

    Patients are sorted, shuffled with ``seed``, then cut into blocks whose
    sizes are floor(ratio * n) with the remainder handed out one at a time
    in split order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS) or any(r <= 0 for r in ratios):
        raise SplitError(f"need three positive ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {sum(ratios)}")
    ids = sorted(set(patient_ids))
    n = len(ids)
    if n == 0:
        return {}
    if n < len(SPLITS):
        raise SplitError(f"{n} patients cannot fill {len(SPLITS)} splits with at least one each")
    counts = [math.floor(r * n + 1e-9) for r in ratios]
    for k in range(n - sum(counts)):
        counts[k % len(counts)] += 1
    # tiny ratios can floor to zero; borrow from the largest split
    for k in range(len(counts)):
        if counts[k] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] = 1
    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        for j in order[start:start + count]:
            assignment[ids[j]] = split
        start += count
    return assignment


def _scan(root: Path) -> list[tuple[str, int, Path]]:
    found = []
    for pdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in pdir.iterdir():
            if f.suffix.lower() not in (".iism", ".png"):
                continue
            try:
                idx = int(f.stem)
            except ValueError as exc:
                raise IngestionError(f"{f}: slice file names must be integer indices") from exc
            found.append((pdir.name, idx, f))
    found.sort(key=lambda t: (t[0], t[1]))
    return found


def build_manifest(
    root,
    catalog: ClassCatalog = DEFAULT_CATALOG,
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    image_size: tuple[int, int] | None = None,
    slice_range: tuple[float, float] | None = None,
    write: bool = True,
) -> Manifest:
    """Scan ``root/<patient>/<slice>.iism|png`` and build a split manifest.

    Lesion flags are recomputed from pixels. With ``slice_range=(lo, hi)``
    only slices inside the cranial-height band of each patient are kept.
    """
    root = Path(root).resolve()
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    found = _scan(root)
    if slice_range is not None:
        by_patient: dict[str, list] = {}
        for item in found:
            by_patient.setdefault(item[0], []).append(item)
        found = []
        for items in by_patient.values():
            keep = select_slices(len(items), *slice_range)
            found += [items[k] for k in keep]
    pids = sorted({pid for pid, _, _ in found})
    splits = split_patients(pids, ratios, seed) if len(pids) >= 3 else dict.fromkeys(pids, "train")
    records = []
    for pid, idx, f in found:
        try:
            m = read_labelmap(f, catalog.num_classes)
        except Exception as exc:
            raise IngestionError(f"{f}: {exc}") from exc
        if image_size is None:
            image_size = tuple(m.shape)
        elif tuple(m.shape) != tuple(image_size):
            raise IngestionError(f"{f}: size {m.shape} differs from declared {tuple(image_size)}")
        records.append(SliceRecord(pid, idx, f.relative_to(root).as_posix(), lesion_flag(m, catalog), splits[pid]))
    manifest = Manifest(records, catalog, image_size, root)
    if write:
        manifest.write()
    return manifest


def weighted_probabilities(lesion: np.ndarray, weights: SamplerWeights) -> np.ndarray:
    w = np.where(np.asarray(lesion) > 0, weights.lesion_weight, weights.base_weight).astype(np.float64)
    return w / w.sum()


def weighted_stream(
    manifest: Manifest, weights: SamplerWeights = SamplerWeights(), seed: int = 0, split: str = "train", chunk: int = 4096
) -> Iterator[int]:
    """Endless i.i.d. stream of manifest record indices, drawn with replacement
    with probability proportional to the lesion-aware weight of each record."""
    pool = np.array(manifest.indices(split), dtype=np.int64)
    if pool.size == 0:
        raise IngestionError(f"split {split!r} has no records")
    p = weighted_probabilities([manifest.records[i].lesion for i in pool], weights)
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    rng = np.random.default_rng(seed)
    while True:
        picks = np.searchsorted(cdf, rng.random(chunk), side="right")
        yield from pool[picks].tolist()


def load_labelmaps(manifest: Manifest, indices: Sequence[int], size: tuple[int, int] | None = None) -> np.ndarray:
    """Read records as a ``(B, H, W)`` uint8 stack, resized to ``size`` if given."""
    size = tuple(size) if size is not None else manifest.image_size
    out = []
    for i in indices:
        if not 0 <= i < len(manifest.records):
            raise IndexError(f"record index {i} out of range for {len(manifest.records)} records")
        path = manifest.resolve(i)
        try:
            m = read_labelmap(path, manifest.catalog.num_classes)
        except OSError as exc:
            raise IngestionError(f"{path}: {exc}") from exc
        if size is not None and tuple(m.shape) != size:
            m = resize_nearest(m, *size)
        out.append(m)
    if not out:
        h, w = size if size is not None else (0, 0)
        return np.zeros((0, h, w), dtype=np.uint8)
    return np.stack(out)


def load_batch(manifest: Manifest, indices: Sequence[int], size: tuple[int, int] | None = None):
    """Return ``(X, y)``: one-hot float32 masks ``(B, C, H, W)`` and prompt bits ``(B,)``."""
    maps = load_labelmaps(manifest, indices, size)
    X = onehot(maps, manifest.catalog.num_classes).astype(np.float32)
    y = np.array([manifest.records[i].lesion for i in indices], dtype=np.int64)
    return X, y
