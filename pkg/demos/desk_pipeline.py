"""Desk-scale walkthrough of the whole pipeline.

Generates a phantom corpus, trains the VAE and the latent denoiser, samples
both prompts, compares class distributions and picks a checkpoint by FID.

    python demos/desk_pipeline.py --out desk_run
    python demos/desk_pipeline.py --out quick_run --quick   # plumbing check only, untrained quality
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from iism import store
from iism.dataset import load_labelmaps
from iism.diffusion import DiffusionConfig, sample_masks, train_diffusion
from iism.labels import lesion_flag
from iism.metrics import checkpoint_selection, class_distribution, distribution_report, format_table
from iism.phantom import PhantomConfig, generate_corpus
from iism.vae import VaeConfig, evaluate, from_checkpoint, train_vae


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="desk_run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="small corpus and few epochs")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)

    patients, vae_epochs, diff_epochs, n = (6, 3, 10, 40) if args.quick else (20, 20, 100, 200)
    corpus = generate_corpus(PhantomConfig(seed=args.seed), patients, out / "corpus")
    print(f"corpus: {len(corpus)} slices, lesion share {corpus.lesion_flags().mean():.3f}")

    t0 = time.perf_counter()
    train_vae(VaeConfig(latent_dim=64, epochs=vae_epochs, seed=args.seed), corpus, out_dir=out / "vae")
    vae = from_checkpoint(out / "vae" / "best")
    test = load_labelmaps(corpus, corpus.indices("test"))
    print(f"vae: {time.perf_counter() - t0:.0f} s, test accuracy {evaluate(vae, test, vae.cfg.beta)['accuracy']:.4f}")

    t0 = time.perf_counter()
    every = max(1, diff_epochs // 4)
    res = train_diffusion(out / "vae" / "best", corpus, DiffusionConfig(epochs=diff_epochs, seed=args.seed),
                          out_dir=out / "diffusion", checkpoint_every=every)
    print(f"diffusion: {time.perf_counter() - t0:.0f} s, final val loss {res.history[-1]['val_loss']:.4f}")

    final = res.checkpoints[-1]
    real = load_labelmaps(corpus, corpus.indices())
    flags = np.array([lesion_flag(m) for m in real])
    for y in (0, 1):
        masks = sample_masks(vae, final, y, n, seed=1)
        rate = np.mean([lesion_flag(m) for m in masks])
        rep = distribution_report(class_distribution(real[flags == y]), class_distribution(masks),
                                  png_path=out / f"classdist_y{y}.png", title=f"y={y}")
        print(f"y={y}: lesion rate {rate:.3f}, class TV {rep['total_variation']:.4f}")

    val = load_labelmaps(corpus, corpus.indices("val"))
    sel = checkpoint_selection(vae, res.checkpoints, val, n_samples=n, seed=2)
    print(format_table(sel.table))

    release = store.export_corpus(sample_masks(vae, out / "diffusion" / sel.best, 1, 16, seed=3), out / "release")
    print(f"exported {len(release)} lesion-prompted masks to {out / 'release'}")


if __name__ == "__main__":
    main()
