"""Real-vs-synthetic corpus comparison: class distributions and Fréchet distance.

The Fréchet distance runs on pluggable per-mask feature vectors. The
default extractor is geometric (per-class area, centroid and spread), so
absolute values are only meaningful relative to each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import CorpusTooSmallError, NumericalError
from .labels import DEFAULT_CATALOG, NUM_CLASSES, ClassCatalog, check_labelmap

FEATURES_PER_CLASS = 5
COV_JITTER = 1e-6
EIG_TOL = 1e-8


def _stack(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        arr = masks
    else:
        masks = list(masks)
        if not masks:
            raise CorpusTooSmallError("corpus is empty")
        shapes = {np.shape(m) for m in masks}
        if len(shapes) != 1:
            raise ValueError(f"corpus masks have mixed shapes {sorted(shapes)}")
        arr = np.stack(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if len(arr) == 0:
        raise CorpusTooSmallError("corpus is empty")
    return check_labelmap(arr)


def class_distribution(masks, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Fraction of all corpus pixels carrying each class id."""
    arr = _stack(masks)
    check_labelmap(arr, num_classes)
    counts = np.bincount(arr.ravel(), minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


def total_variation(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions have different lengths {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def distribution_report(real, synth, catalog: ClassCatalog = DEFAULT_CATALOG, png_path=None, json_path=None, title=None) -> dict:
    """Per-class deltas and total-variation distance, optionally written as JSON and a bar chart."""
    real, synth = np.asarray(real, dtype=np.float64), np.asarray(synth, dtype=np.float64)
    report = {
        "classes": catalog.names[: len(real)],
        "real": real.tolist(),
        "synthetic": synth.tolist(),
        "delta": (synth - real).tolist(),
        "total_variation": total_variation(real, synth),
    }
    if json_path is not None:
        Path(json_path).write_text(json.dumps(report, indent=2) + "\n")
    if png_path is not None:
        plot_distributions({"real": real, "synthetic": synth}, catalog, png_path, title)
    return report


def plot_distributions(series: dict, catalog: ClassCatalog, path, title=None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = catalog.names
    x = np.arange(len(names))
    width = 0.8 / max(len(series), 1)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for k, (label, values) in enumerate(series.items()):
        ax.bar(x + (k - (len(series) - 1) / 2) * width, values, width, label=label)
    ax.set_xticks(x, names, rotation=30, ha="right")
    ax.set_ylabel("pixel fraction")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def extract_features(m, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Geometric embedding of one mask, length 5 * C.

    Blocks, each of length C: area fraction, centroid row, centroid column,
    row variance, column variance. Coordinates are pixel index / size, so a
    full-image class has centroid (0.5 - 1/(2H), 0.5 - 1/(2W)); absent
    classes get centroid 0.5 and zero variance.
    """
    m = check_labelmap(m, num_classes)
    H, W = m.shape
    rows = np.arange(H, dtype=np.float64) / H
    cols = np.arange(W, dtype=np.float64) / W
    area = np.zeros(num_classes)
    cy = np.full(num_classes, 0.5)
    cx = np.full(num_classes, 0.5)
    vy = np.zeros(num_classes)
    vx = np.zeros(num_classes)
    for c in range(num_classes):
        sel = m == c
        n = sel.sum()
        if n == 0:
            continue
        area[c] = n / m.size
        row_counts = sel.sum(axis=1)
        col_counts = sel.sum(axis=0)
        cy[c] = row_counts @ rows / n
        cx[c] = col_counts @ cols / n
        vy[c] = row_counts @ (rows - cy[c]) ** 2 / n
        vx[c] = col_counts @ (cols - cx[c]) ** 2 / n
    return np.concatenate([area, cy, cx, vy, vx])


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int


def feature_stats(features, jitter: float = COV_JITTER) -> FeatureStats:
    """Mean and unbiased covariance of a ``(N, F)`` feature matrix, with diagonal jitter."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 2:
        raise CorpusTooSmallError(f"need at least 2 feature vectors, got shape {f.shape}")
    cov = np.cov(f, rowvar=False, ddof=1).reshape(f.shape[1], f.shape[1])
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(f.shape[1])
    return FeatureStats(f.mean(axis=0), cov, len(f))


def _psd_eigvals(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    tol = EIG_TOL * max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.size and w.min() < -tol:
        raise NumericalError(f"{what} is not positive semidefinite (eigenvalue {w.min():.3e})")
    return np.clip(w, 0.0, None), v


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = _psd_eigvals(a, "covariance")
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    tr((S_a S_b)^(1/2)) is taken as the sum of square roots of the eigenvalues
    of the symmetric product S_a^(1/2) S_b S_a^(1/2), which shares its spectrum.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature sizes differ: {a.mean.shape} vs {b.mean.shape}")
    sa = _sqrtm_psd(np.atleast_2d(a.cov))
    _psd_eigvals(np.atleast_2d(b.cov), "covariance")
    w, _ = _psd_eigvals(sa @ np.atleast_2d(b.cov) @ sa, "covariance product")
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sqrt(w).sum())
    if -EIG_TOL < d < 0:
        d = 0.0
    return d


def corpus_features(masks, extractor: Callable = extract_features) -> np.ndarray:
    return np.stack([extractor(m) for m in _stack(masks)])


def fid(real, synth, extractor: Callable = extract_features) -> float:
    """Fréchet distance between feature statistics of two mask corpora."""
    fr = corpus_features(real, extractor)
    fs = corpus_features(synth, extractor)
    need = fr.shape[1] + 1
    for name, f in (("real", fr), ("synthetic", fs)):
        if len(f) < need:
            raise CorpusTooSmallError(f"{name} corpus has {len(f)} masks; at least {need} are needed for {need - 1} features")
    return frechet_distance(feature_stats(fr), feature_stats(fs))


@dataclass
class SelectionResult:
    best: str
    table: list[dict]


def checkpoint_selection(
    vae,
    checkpoints: Sequence,
    real,
    n_samples: int,
    seed: int,
    lesion_rate: float | None = None,
    extractor: Callable = extract_features,
) -> SelectionResult:
    """Score each diffusion checkpoint by FID against ``real`` and pick the lowest.

    ``checkpoints`` holds checkpoint directories or ``(name, checkpoint)``
    pairs. Samples mix prompts so the lesion share matches ``lesion_rate``
    (by default, the share of lesion masks in ``real``).
    """
    from .diffusion import from_checkpoint, sample_masks
    from .labels import lesion_flag

    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    real = _stack(real)
    if lesion_rate is None:
        lesion_rate = float(np.mean([lesion_flag(m) for m in real]))
    n1 = int(round(n_samples * lesion_rate))
    rows = []
    for item in checkpoints:
        name, ck = item if isinstance(item, tuple) else (Path(item).name, item)
        loaded = from_checkpoint(ck)[2]
        masks = sample_masks(vae, loaded, 0, n_samples - n1, seed) + sample_masks(vae, loaded, 1, n1, seed)
        rows.append({"checkpoint": name, "epoch": int(loaded.metadata.get("epoch", 0)), "fid": fid(real, masks, extractor)})
    rows.sort(key=lambda r: (r["epoch"], r["checkpoint"]))
    best = min(range(len(rows)), key=lambda i: rows[i]["fid"])
    for i, r in enumerate(rows):
        r["selected"] = i == best
    return SelectionResult(rows[best]["checkpoint"], rows)


def format_table(table: list[dict]) -> str:
    lines = ["Checkpoint  FID"]
    for r in table:
        mark = " *" if r["selected"] else ""
        lines.append(f"Epoch {r['epoch']:<5d} {r['fid']:.4g}{mark}")
    return "\n".join(lines)
