"""Checkpoint persistence and corpus export.

A checkpoint is a directory::

    meta.json            kind, format version, metadata, tensor table, digest
    tensors/<name>.f32   raw little-endian float32 payload

The digest is SHA-256 over all payloads concatenated in name-sorted order.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Manifest, SliceRecord
from .errors import CheckpointError, DigestError, MissingTensorError, VersionError
from .fileformat import write_iism
from .labels import DEFAULT_CATALOG, ClassCatalog, check_labelmap, lesion_flag, render_png

FORMAT_VERSION = 1
KINDS = ("vae", "diffusion")


@dataclass
class Checkpoint:
    kind: str
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")
        self.tensors = {k: np.array(v, dtype="<f4", order="C") for k, v in self.tensors.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(self.tensors[name].tobytes())
        return h.hexdigest()


def _meta_document(ckpt: Checkpoint) -> dict:
    return {
        "kind": ckpt.kind,
        "format_version": ckpt.format_version,
        "metadata": ckpt.metadata,
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape)} for n in sorted(ckpt.tensors)],
        "digest": ckpt.digest(),
    }


def save(ckpt: Checkpoint, path) -> Path:
    """Write ``ckpt`` to directory ``path`` via a temporary sibling and rename."""
    path = Path(path)
    for name in ckpt.tensors:
        if "/" in name or name.startswith("."):
            raise CheckpointError(f"tensor name {name!r} is not a valid file name")
    tmp = path.parent / f".{path.name}.tmp-{uuid.uuid4().hex}"
    try:
        (tmp / "tensors").mkdir(parents=True)
        for name, arr in ckpt.tensors.items():
            (tmp / "tensors" / f"{name}.f32").write_bytes(arr.tobytes())
        (tmp / "meta.json").write_text(json.dumps(_meta_document(ckpt), indent=2, sort_keys=True) + "\n")
        if path.exists():
            old = path.parent / f".{path.name}.old-{uuid.uuid4().hex}"
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except OSError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        raise CheckpointError(f"cannot save checkpoint to {path}: {exc}") from exc
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: no meta.json") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    tensors = {}
    for entry in meta["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        f = path / "tensors" / f"{name}.f32"
        if not f.exists():
            raise MissingTensorError(f"{path}: missing tensor {name!r}")
        data = f.read_bytes()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if len(data) != expected:
            raise DigestError(f"{path}: tensor {name!r} has {len(data)} bytes, expected {expected}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    ckpt = Checkpoint(meta["kind"], tensors, meta.get("metadata", {}), version)
    if ckpt.digest() != meta.get("digest"):
        raise DigestError(f"{path}: payload digest does not match meta.json")
    return ckpt


def export_corpus(
    masks: Sequence, out_dir, catalog: ClassCatalog = DEFAULT_CATALOG, render: bool = True, patient_id: str = "synthetic"
) -> Manifest:
    """Write masks as ``masks/<i>.iism`` (+ ``renders/<i>.png``) and a manifest."""
    out = Path(out_dir).resolve()
    (out / "masks").mkdir(parents=True, exist_ok=True)
    if render and len(masks):
        (out / "renders").mkdir(exist_ok=True)
    records = []
    size = None
    for i, m in enumerate(masks):
        m = check_labelmap(m, catalog.num_classes)
        size = size or tuple(m.shape)
        rel = f"masks/{i}.iism"
        write_iism(out / rel, m, catalog.num_classes)
        if render:
            (out / "renders" / f"{i}.png").write_bytes(render_png(m, catalog))
        records.append(SliceRecord(patient_id, i, rel, lesion_flag(m, catalog), "test"))
    manifest = Manifest(records, catalog, size, out)
    manifest.write()
    return manifest
