"""Command-line entry point.

    iism phantom --patients 20 --slices 40 --lesion-prob 0.3 --seed 7 --out data
    iism manifest --root data --split 0.8,0.1,0.1 --seed 7
    iism train vae --manifest data --seed 7 --out runs
    iism train diff --vae runs/vae/best --manifest data --seed 7 --out runs
    iism sample --vae runs/vae/best --diff runs/diffusion/epoch100 --y 1 --n 4 --seed 1 --out samples
    iism eval classdist --real data --synth samples --out reports
    iism eval fid --real data --vae runs/vae/best --ckpts runs/diffusion/epoch50,runs/diffusion/epoch100 --n 200 --seed 1
    iism export --vae ... --diff ... --n 605 --seed 1 --out release

Exit codes: 0 success, 2 usage, 3 validation, 4 runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffusion, metrics, phantom, store, vae
from .dataset import Manifest, build_manifest, load_labelmaps
from .errors import (
    CatalogError,
    ConfigError,
    CorpusTooSmallError,
    FormatError,
    IISMError,
    LabelError,
    PromptError,
    ScheduleError,
    SelectionError,
    SplitError,
)
from .fileformat import read_labelmap, write_iism
from .labels import DEFAULT_CATALOG, lesion_flag, render_png

log = logging.getLogger("iism")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4
_VALIDATION_ERRORS = (
    ConfigError, PromptError, LabelError, SelectionError, SplitError, ScheduleError,
    CorpusTooSmallError, CatalogError, FormatError,
)
_SECTIONS = ("data", "vae", "diffusion", "eval")
_DATA_KEYS = {"patients", "split", "slice_range", "phantom"}
_EVAL_KEYS = {"n_samples", "split"}


class UsageError(IISMError):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    data: dict = field(default_factory=dict)
    vae: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(seed=d.get("seed"), **{k: dict(d.get(k) or {}) for k in _SECTIONS})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def phantom_config(self, seed: int) -> phantom.PhantomConfig:
        return phantom.PhantomConfig.from_dict({**self.data.get("phantom", {}), "seed": seed})

    def vae_config(self, seed: int) -> vae.VaeConfig:
        return vae.VaeConfig.from_dict({**self.vae, "seed": seed})

    def diffusion_config(self, seed: int) -> diffusion.DiffusionConfig:
        return diffusion.DiffusionConfig.from_dict({**self.diffusion, "seed": seed})

    def validate(self) -> None:
        """Check every section and the (D, C, H, W) agreement between them."""
        for name, allowed in (("data", _DATA_KEYS), ("eval", _EVAL_KEYS)):
            unknown = set(getattr(self, name)) - allowed
            if unknown:
                raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
        seed = self.seed or 0
        ph = self.phantom_config(seed)
        vc = self.vae_config(seed)
        self.diffusion_config(seed)
        if vc.num_classes != DEFAULT_CATALOG.num_classes:
            raise ConfigError(f"vae.num_classes={vc.num_classes} but the catalog has {DEFAULT_CATALOG.num_classes} classes")
        if self.data.get("phantom") and tuple(vc.image_size) != (ph.image_size, ph.image_size):
            raise ConfigError(f"vae.image_size={list(vc.image_size)} disagrees with data.phantom.image_size={ph.image_size}")


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --split {text!r}") from exc
    if len(vals) != 3 or any(v <= 0 for v in vals):
        raise SplitError(f"--split needs three positive ratios, got {text!r}")
    total = sum(vals)
    return tuple(v / total for v in vals)


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _seed(args, cfg: RunConfig) -> int:
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise UsageError("a seed is required: pass --seed or set \"seed\" in the config")
    return int(seed)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------


def cmd_phantom(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    d = {**cfg.data.get("phantom", {}), "seed": seed}
    if args.slices is not None:
        d["slices_per_volume"] = args.slices
    if args.lesion_prob is not None:
        d["lesion_probability"] = args.lesion_prob
    if args.size is not None:
        d["image_size"] = args.size
    pcfg = phantom.PhantomConfig.from_dict(d)
    patients = args.patients if args.patients is not None else cfg.data.get("patients", 20)
    ratios = _ratios(args.split) if args.split else tuple(cfg.data.get("split", (0.8, 0.1, 0.1)))
    out = _out(args, "data")
    m = phantom.generate_corpus(pcfg, patients, out, ratios)
    print(f"wrote {len(m)} slices for {patients} patients to {out} (lesion share {m.lesion_flags().mean() if len(m) else 0:.3f})")
    print(f"manifest digest {m.digest()}")
    return EXIT_OK


def cmd_manifest(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    ratios = _ratios(args.split) if args.split else tuple(cfg.data.get("split", (0.8, 0.1, 0.1)))
    band = _pair(args.slice_range) if args.slice_range else cfg.data.get("slice_range")
    m = build_manifest(args.root, DEFAULT_CATALOG, ratios, seed, slice_range=tuple(band) if band else None)
    print(f"indexed {len(m)} slices; manifest digest {m.digest()}")
    return EXIT_OK


def cmd_train_vae(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    vc = cfg.vae_config(seed)
    if args.epochs is not None:
        vc.epochs = args.epochs
    manifest = Manifest.read(args.manifest)
    if manifest.image_size and tuple(manifest.image_size) != tuple(vc.image_size):
        log.info("masks of size %s will be resized to %s", manifest.image_size, vc.image_size)
    out = _out(args, "runs") / "vae"
    res = vae.train_vae(vc, manifest, out_dir=out)
    print(f"vae: {len(res.checkpoints)} checkpoints in {out}, best epoch {res.best_epoch}")
    return EXIT_OK


def cmd_train_diff(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    dc = cfg.diffusion_config(seed)
    if args.epochs is not None:
        dc.epochs = args.epochs
    vae_ckpt = store.load(args.vae)
    if cfg.vae and "latent_dim" in cfg.vae and cfg.vae["latent_dim"] != vae_ckpt.metadata["config"]["latent_dim"]:
        raise ConfigError("vae.latent_dim in the config disagrees with the VAE checkpoint")
    manifest = Manifest.read(args.manifest)
    out = _out(args, "runs") / "diffusion"
    res = diffusion.train_diffusion(vae_ckpt, manifest, dc, out_dir=out, checkpoint_every=args.every)
    print(f"diffusion: {len(res.checkpoints)} checkpoints in {out}, best epoch {res.best_epoch}")
    return EXIT_OK


def cmd_vae_reconstruct(args, cfg: RunConfig) -> int:
    model = vae.from_checkpoint(args.vae)
    m = read_labelmap(args.inp, model.cfg.num_classes)
    size = model.cfg.image_size
    if m.shape != size:
        from .labels import resize_nearest

        m = resize_nearest(m, *size)
    write_iism(args.outp, vae.reconstruct(model, m[None])[0], model.cfg.num_classes)
    return EXIT_OK


def _grid_figure(real: np.ndarray, synth: list, path: Path, y: int) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cols = max(1, min(len(synth), len(real), 6))
    fig, axes = plt.subplots(2, cols, figsize=(2 * cols, 4.3), squeeze=False)
    for row, (label, maps) in enumerate((("real", real), (f"synthetic (y={y})", synth))):
        for c in range(cols):
            ax = axes[row][c]
            ax.axis("off")
            if c < len(maps):
                ax.imshow(DEFAULT_CATALOG.palette()[maps[c]], interpolation="nearest")
        axes[row][0].set_title(label, loc="left", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_sample(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    for p in (args.vae, args.diff):
        if not Path(p, "meta.json").exists():
            raise store.CheckpointError(f"checkpoint {p} not found")
    masks = diffusion.sample_masks(args.vae, args.diff, args.y, args.n, seed)
    out = _out(args, "samples")
    ydir = out / f"y{args.y}"
    ydir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        write_iism(ydir / f"{i}.iism", m)
        if args.png:
            (ydir / f"{i}.png").write_bytes(render_png(m))
    if args.grid:
        if not args.real:
            raise UsageError("--grid needs --real <manifest>")
        man = Manifest.read(args.real)
        pool = [i for i in man.indices() if man.records[i].lesion == args.y][:6]
        _grid_figure(load_labelmaps(man, pool, masks[0].shape if masks else None), masks, out / f"grid_y{args.y}.png", args.y)
    rate = np.mean([lesion_flag(m) for m in masks]) if masks else float("nan")
    print(f"wrote {len(masks)} masks to {ydir} (lesion rate {rate:.3f})")
    return EXIT_OK


def _manifest_path(path: Path) -> Path | None:
    if path.is_file() and path.suffix == ".jsonl":
        return path
    if (path / "manifest.jsonl").exists():
        return path / "manifest.jsonl"
    return None


def _real_groups(man: Manifest, split: str) -> dict[int, np.ndarray]:
    idx = man.indices(None if split == "all" else split)
    maps = load_labelmaps(man, idx)
    flags = np.array([man.records[i].lesion for i in idx], dtype=int)
    return {y: maps[flags == y] for y in (0, 1)}


def _synth_groups(path: Path, split: str, size) -> dict[int, np.ndarray]:
    """Group synthetic masks by prompt (``y0/``, ``y1/`` folders) or else by lesion flag."""
    if (path / "y0").is_dir() or (path / "y1").is_dir():
        groups = {}
        for y in (0, 1):
            files = sorted((path / f"y{y}").glob("*.iism"), key=lambda f: int(f.stem)) if (path / f"y{y}").is_dir() else []
            groups[y] = np.stack([read_labelmap(f) for f in files]) if files else np.zeros((0,) + tuple(size), np.uint8)
        return groups
    mp = _manifest_path(path)
    if mp is not None:
        return _real_groups(Manifest.read(mp), split)
    files = sorted(path.rglob("*.iism"))
    maps = np.stack([read_labelmap(f) for f in files]) if files else np.zeros((0,) + tuple(size), np.uint8)
    flags = np.array([lesion_flag(m) for m in maps], dtype=int)
    return {y: maps[flags == y] for y in (0, 1)}


def cmd_eval_classdist(args, cfg: RunConfig) -> int:
    split = args.split or cfg.eval.get("split", "test")
    man = Manifest.read(args.real)
    real = _real_groups(man, split)
    synth = _synth_groups(Path(args.synth), split, man.image_size or (0, 0))
    out = _out(args, "reports")
    report = {"split": split}
    for y in (0, 1):
        r, s = real[y], synth[y]
        section = {"n_real": int(len(r)), "n_synthetic": int(len(s))}
        if len(r) and len(s):
            section.update(metrics.distribution_report(
                metrics.class_distribution(r), metrics.class_distribution(s), DEFAULT_CATALOG,
                png_path=out / f"classdist_y{y}.png", title=f"y={y}"))
            try:
                section["fid"] = metrics.fid(r, s)
            except CorpusTooSmallError as exc:
                section["fid"] = None
                section["fid_note"] = str(exc)
        else:
            section["note"] = "one side is empty; nothing to compare"
        report[f"y{y}"] = section
        tv = section.get("total_variation")
        print(f"y={y}: real {len(r)}, synthetic {len(s)}, TV {tv if tv is None else round(tv, 4)}")
    (out / "classdist.json").write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_eval_fid(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    split = args.split or cfg.eval.get("split", "val")
    man = Manifest.read(args.real)
    idx = man.indices(None if split == "all" else split)
    real = load_labelmaps(man, idx, tuple(vae.from_checkpoint(args.vae).cfg.image_size))
    n = args.n if args.n is not None else cfg.eval.get("n_samples", 200)
    ckpts = [c for c in args.ckpts.split(",") if c]
    result = metrics.checkpoint_selection(args.vae, ckpts, real, n, seed)
    out = _out(args, "reports")
    (out / "fid_table.json").write_text(json.dumps({"best": result.best, "table": result.table}, indent=2) + "\n")
    print(metrics.format_table(result.table))
    print(f"selected {result.best}")
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    seed = _seed(args, cfg)
    n1 = int(round(args.n * args.lesion_share))
    masks = diffusion.sample_masks(args.vae, args.diff, 0, args.n - n1, seed)
    masks += diffusion.sample_masks(args.vae, args.diff, 1, n1, seed)
    out = _out(args, "release")
    m = store.export_corpus(masks, out, DEFAULT_CATALOG)
    print(f"exported {len(m)} masks to {out}; manifest digest {m.digest()}")
    return EXIT_OK


# -- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="iism", description="Two-stage latent diffusion for brain segmentation masks.")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic phantom corpus")
    ph.add_argument("--patients", type=int)
    ph.add_argument("--slices", type=int)
    ph.add_argument("--lesion-prob", type=float)
    ph.add_argument("--size", type=int)
    ph.add_argument("--split")
    ph.set_defaults(func=cmd_phantom)

    mf = sub.add_parser("manifest", parents=[common], help="index a label-map directory")
    mf.add_argument("--root", required=True)
    mf.add_argument("--split")
    mf.add_argument("--slice-range", help="lo,hi fractions of cranial height, e.g. 0.2,0.95")
    mf.set_defaults(func=cmd_manifest)

    tr = sub.add_parser("train", help="train a stage").add_subparsers(dest="stage", required=True)
    tv = tr.add_parser("vae", parents=[common])
    tv.add_argument("--manifest", required=True)
    tv.add_argument("--epochs", type=int)
    tv.set_defaults(func=cmd_train_vae)
    td = tr.add_parser("diff", parents=[common])
    td.add_argument("--vae", required=True)
    td.add_argument("--manifest", required=True)
    td.add_argument("--epochs", type=int)
    td.add_argument("--every", type=int, default=1, help="checkpoint every N epochs")
    td.set_defaults(func=cmd_train_diff)

    va = sub.add_parser("vae", help="VAE utilities").add_subparsers(dest="action", required=True)
    vr = va.add_parser("reconstruct")
    vr.add_argument("--config")
    vr.add_argument("--verbose", "-v", action="store_true")
    vr.add_argument("--vae", required=True)
    vr.add_argument("--in", dest="inp", required=True)
    vr.add_argument("--out", dest="outp", required=True)
    vr.set_defaults(func=cmd_vae_reconstruct)

    sa = sub.add_parser("sample", parents=[common], help="sample masks for a prompt")
    sa.add_argument("--vae", required=True)
    sa.add_argument("--diff", required=True)
    sa.add_argument("--y", type=int, required=True)
    sa.add_argument("--n", type=int, required=True)
    sa.add_argument("--png", action="store_true", help="also write color renders")
    sa.add_argument("--grid", action="store_true", help="write a real-vs-synthetic figure")
    sa.add_argument("--real", help="manifest supplying real masks for --grid")
    sa.set_defaults(func=cmd_sample)

    ev = sub.add_parser("eval", help="compare corpora").add_subparsers(dest="metric", required=True)
    cd = ev.add_parser("classdist", parents=[common])
    cd.add_argument("--real", required=True)
    cd.add_argument("--synth", required=True)
    cd.add_argument("--split", help="real split to compare against (train/val/test/all), default test")
    cd.set_defaults(func=cmd_eval_classdist)
    fd = ev.add_parser("fid", parents=[common])
    fd.add_argument("--real", required=True)
    fd.add_argument("--vae", required=True)
    fd.add_argument("--ckpts", required=True, help="comma-separated diffusion checkpoints")
    fd.add_argument("--n", type=int)
    fd.add_argument("--split", help="real split used as reference, default val")
    fd.set_defaults(func=cmd_eval_fid)

    ex = sub.add_parser("export", parents=[common], help="sample and write a releasable corpus")
    ex.add_argument("--vae", required=True)
    ex.add_argument("--diff", required=True)
    ex.add_argument("--n", type=int, required=True)
    ex.add_argument("--lesion-share", type=float, default=0.5)
    ex.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _VALIDATION_ERRORS as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IISMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
