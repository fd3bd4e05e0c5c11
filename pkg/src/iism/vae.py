"""Mask-only variational autoencoder (the anatomical prior).

The encoder halves the spatial size four times with kernel-4 / stride-2
convolutions, flattens the final feature grid and projects it to the mean
and log-variance of a diagonal Gaussian. The decoder mirrors it with
transposed convolutions and ends in a 1x1 convolution producing one logit
per class.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import store
from .dataset import Manifest, SamplerWeights, load_labelmaps, weighted_stream
from .errors import ConfigError, TrainingDivergedError
from .labels import NUM_CLASSES, argmax_decode, check_labelmap, onehot

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass
class VaeConfig:
    latent_dim: int = 64
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    num_classes: int = NUM_CLASSES
    image_size: tuple[int, int] = (64, 64)
    beta: float = 0.01
    learning_rate: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    lesion_weighting: bool = True
    # "mean" or "sum" over pixels for cross-entropy, over latent dims for KL
    rec_reduction: str = "mean"
    kl_reduction: str = "mean"
    # "constant" or "cosine" (annealed per step to zero over all epochs)
    lr_schedule: str = "constant"
    # batch normalisation between each convolution and its ReLU
    batch_norm: bool = True

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.validate()

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if len(self.encoder_channels) != 4:
            raise ConfigError(f"the encoder has exactly four stages, got channels {self.encoder_channels}")
        H, W = self.image_size
        if H % 16 or W % 16 or H < 16 or W < 16:
            raise ConfigError(f"image size {self.image_size} must be a positive multiple of 16")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.rec_reduction not in ("mean", "sum") or self.kl_reduction not in ("mean", "sum"):
            raise ConfigError(f"reductions must be 'mean' or 'sum', got {self.rec_reduction!r}, {self.kl_reduction!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        H, W = self.image_size
        return (self.encoder_channels[-1], H // 16, W // 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown vae config keys: {sorted(unknown)}")
        return cls(**d)


class GaussianPosterior(NamedTuple):
    mu: torch.Tensor
    logvar: torch.Tensor


def _block(conv: nn.Module, batch_norm: bool) -> tuple[nn.Module, ...]:
    if batch_norm:
        return (conv, nn.BatchNorm2d(conv.out_channels), nn.ReLU())
    return (conv, nn.ReLU())


class MaskVAE(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.num_classes
        chans = (C,) + cfg.encoder_channels
        self.encoder = nn.Sequential(
            *[
                layer
                for cin, cout in zip(chans, chans[1:])
                for layer in _block(nn.Conv2d(cin, cout, kernel_size=4, stride=2, padding=1), cfg.batch_norm)
            ]
        )
        flat = math.prod(cfg.feature_shape)
        self.to_posterior = nn.Linear(flat, 2 * cfg.latent_dim)
        self.from_latent = nn.Linear(cfg.latent_dim, flat)
        dec = cfg.encoder_channels[::-1] + (cfg.encoder_channels[0],)
        self.decoder = nn.Sequential(
            *[
                layer
                for cin, cout in zip(dec, dec[1:])
                for layer in _block(nn.ConvTranspose2d(cin, cout, kernel_size=4, stride=2, padding=1), cfg.batch_norm)
            ]
        )
        self.head = nn.Conv2d(dec[-1], C, kernel_size=1)

    def features(self, X: torch.Tensor) -> torch.Tensor:
        expected = (self.cfg.num_classes,) + self.cfg.image_size
        if tuple(X.shape[-3:]) != expected:
            raise ConfigError(f"input shape {tuple(X.shape)} does not match configured {expected}")
        return self.encoder(X)

    def encode(self, X: torch.Tensor) -> GaussianPosterior:
        h = self.features(X).flatten(start_dim=1)
        mu, logvar = self.to_posterior(h).chunk(2, dim=-1)
        return GaussianPosterior(mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.latent_dim:
            raise ConfigError(f"latent length {z.shape[-1]} != {self.cfg.latent_dim}")
        h = F.relu(self.from_latent(z)).view(-1, *self.cfg.feature_shape)
        return self.head(self.decoder(h))

    def forward(self, X: torch.Tensor, eps: torch.Tensor | None = None):
        q = self.encode(X)
        if eps is None:
            eps = torch.randn_like(q.mu)
        z = reparameterize(q, eps)
        return self.decode(z), q


def reparameterize(q: GaussianPosterior, eps) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps."""
    eps = torch.as_tensor(eps, dtype=q.mu.dtype)
    if eps.shape[-1] != q.mu.shape[-1]:
        raise ConfigError(f"noise length {eps.shape[-1]} != latent length {q.mu.shape[-1]}")
    return q.mu + torch.exp(0.5 * q.logvar) * eps


def kl_divergence(q: GaussianPosterior, reduction: str = "sum") -> torch.Tensor:
    """KL(q || N(0, I)), summed (or averaged) over latent dimensions and averaged over the batch."""
    # expm1 keeps exp(lv) - 1 - lv >= 0 when lv is tiny; grouping it first
    # stops a small mu^2 from being absorbed by the larger intermediate
    per_dim = 0.5 * (q.mu.pow(2) + (torch.expm1(q.logvar) - q.logvar))
    total = per_dim.sum(dim=-1) if reduction == "sum" else per_dim.mean(dim=-1)
    return total.mean() if total.dim() else total


def reconstruction_loss(logits: torch.Tensor, x, reduction: str = "mean") -> torch.Tensor:
    """Per-pixel categorical cross-entropy between logits and a label map.

    ``reduction="mean"`` averages over pixels and batch; ``"sum"`` sums over
    pixels and averages over the batch.
    """
    x = torch.as_tensor(check_labelmap(x.cpu().numpy() if torch.is_tensor(x) else x, logits.shape[-3]), dtype=torch.long)
    if logits.dim() == 3:
        logits, x = logits.unsqueeze(0), x.unsqueeze(0)
    if tuple(logits.shape[-2:]) != tuple(x.shape[-2:]):
        raise ConfigError(f"logit grid {tuple(logits.shape[-2:])} does not match label grid {tuple(x.shape[-2:])}")
    ce = F.cross_entropy(logits, x, reduction="none")
    return ce.mean() if reduction == "mean" else ce.flatten(start_dim=1).sum(dim=1).mean()


def vae_loss(logits, x, q: GaussianPosterior, beta: float, rec_reduction: str = "mean", kl_reduction: str = "mean"):
    """Return ``(total, rec, kl)`` with total = rec + beta * kl."""
    rec = reconstruction_loss(logits, x, rec_reduction)
    kl = kl_divergence(q, kl_reduction)
    return rec + beta * kl, rec, kl


# -- checkpoints ---------------------------------------------------------


def to_checkpoint(model: MaskVAE, epoch: int = 0, **metadata) -> store.Checkpoint:
    meta = {
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "seed": model.cfg.seed,
        "created": metadata.pop("created", datetime.now(timezone.utc).isoformat(timespec="seconds")),
    }
    meta.update(metadata)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return store.Checkpoint("vae", tensors, meta)


def from_checkpoint(ckpt) -> MaskVAE:
    if not isinstance(ckpt, store.Checkpoint):
        ckpt = store.load(ckpt)
    if ckpt.kind != "vae":
        raise ConfigError(f"expected a vae checkpoint, got {ckpt.kind!r}")
    model = MaskVAE(VaeConfig.from_dict(ckpt.metadata["config"]))
    expected = model.state_dict()
    if set(expected) != set(ckpt.tensors):
        raise ConfigError(f"checkpoint tensors {sorted(ckpt.tensors)} do not match the configured model")
    for k, v in ckpt.tensors.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ConfigError(f"tensor {k} has shape {v.shape}, config implies {tuple(expected[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()})
    model.eval()
    return model


# -- inference helpers ---------------------------------------------------


@torch.no_grad()
def posterior_of(model: MaskVAE, maps: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Posterior (mu, logvar) for a stack of label maps, as float32 arrays."""
    model.eval()
    mus, lvs = [], []
    for s in range(0, len(maps), batch_size):
        X = torch.from_numpy(onehot(maps[s:s + batch_size], model.cfg.num_classes).astype(np.float32))
        q = model.encode(X)
        mus.append(q.mu.numpy())
        lvs.append(q.logvar.numpy())
    D = model.cfg.latent_dim
    if not mus:
        return np.zeros((0, D), np.float32), np.zeros((0, D), np.float32)
    return np.concatenate(mus), np.concatenate(lvs)


@torch.no_grad()
def decode_to_maps(model: MaskVAE, z, batch_size: int = 256) -> np.ndarray:
    model.eval()
    z = torch.as_tensor(np.asarray(z, dtype=np.float32))
    out = [argmax_decode(model.decode(z[s:s + batch_size])) for s in range(0, len(z), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + model.cfg.image_size, np.uint8)


@torch.no_grad()
def reconstruct(model: MaskVAE, maps: np.ndarray) -> np.ndarray:
    """Decode the posterior mean of each map back to a label map."""
    mu, _ = posterior_of(model, np.asarray(maps))
    return decode_to_maps(model, mu)


@torch.no_grad()
def evaluate(model: MaskVAE, maps: np.ndarray, beta: float, batch_size: int = 256) -> dict:
    """Deterministic validation metrics, decoding the posterior mean."""
    model.eval()
    tot = rec = kl = correct = 0.0
    n = len(maps)
    for s in range(0, n, batch_size):
        x = maps[s:s + batch_size]
        X = torch.from_numpy(onehot(x, model.cfg.num_classes).astype(np.float32))
        q = model.encode(X)
        L = model.decode(q.mu)
        t, r, k = vae_loss(L, x, q, beta, model.cfg.rec_reduction, model.cfg.kl_reduction)
        w = len(x) / n
        tot, rec, kl = tot + w * t.item(), rec + w * r.item(), kl + w * k.item()
        correct += float((L.argmax(dim=1).numpy() == x).sum())
    return {"loss": tot, "rec": rec, "kl": kl, "accuracy": correct / max(n * maps[0].size, 1) if n else float("nan")}


# -- training ------------------------------------------------------------


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoints: list[Path] = field(default_factory=list)


def write_history(path, history: list[dict]) -> None:
    if not history:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def train_vae(
    cfg: VaeConfig,
    manifest: Manifest,
    weights: SamplerWeights = SamplerWeights(),
    out_dir=None,
    created: str | None = None,
) -> TrainResult:
    """Fit the VAE on the train split with lesion-weighted batches.

    One epoch is ceil(n_train / batch_size) batches. Validation uses the
    val split (or the train split when val is empty). With ``out_dir``,
    writes ``epoch<N>`` checkpoints, a ``best`` copy and ``loss.csv``.
    """
    torch.manual_seed(cfg.seed)
    train_idx = manifest.indices("train")
    if not train_idx:
        raise ConfigError("manifest has no training records")
    val_idx = manifest.indices("val") or train_idx
    size = cfg.image_size
    train_maps = load_labelmaps(manifest, train_idx, size)
    val_maps = load_labelmaps(manifest, val_idx, size)
    # stream yields global manifest indices; map them to rows of train_maps
    row_of = {g: r for r, g in enumerate(train_idx)}
    if not cfg.lesion_weighting:
        weights = SamplerWeights(1.0, 1.0)
    stream = weighted_stream(manifest, weights, seed=cfg.seed, split="train")

    model = MaskVAE(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    steps = math.ceil(len(train_idx) / cfg.batch_size)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * steps)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model)
    best = math.inf
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running = 0.0
        for _ in range(steps):
            rows = [row_of[next(stream)] for _ in range(cfg.batch_size)]
            x = train_maps[rows]
            X = torch.from_numpy(onehot(x, cfg.num_classes).astype(np.float32))
            q = model.encode(X)
            eps = torch.randn(q.mu.shape, generator=noise)
            L = model.decode(reparameterize(q, eps))
            total, _, _ = vae_loss(L, x, q, cfg.beta, cfg.rec_reduction, cfg.kl_reduction)
            if not torch.isfinite(total):
                raise TrainingDivergedError(f"vae loss became {total.item()} at epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if sched is not None:
                sched.step()
            running += total.item()
        val = evaluate(model, val_maps, cfg.beta)
        row = {"epoch": epoch, "train_loss": running / steps, "val_loss": val["loss"], "val_rec": val["rec"],
               "val_kl": val["kl"], "val_accuracy": val["accuracy"]}
        result.history.append(row)
        log.info("vae epoch %d train %.4f val %.4f acc %.4f", epoch, row["train_loss"], val["loss"], val["accuracy"])
        improved = val["loss"] < best
        if improved:
            best, result.best_epoch = val["loss"], epoch
        if out is not None:
            stamp = {"created": created} if created else {}
            ckpt = to_checkpoint(model, epoch, val_loss=val["loss"], **stamp)
            result.checkpoints.append(store.save(ckpt, out / f"epoch{epoch}"))
            if improved:
                ckpt.metadata["tag"] = "best"
                store.save(ckpt, out / "best")
            write_history(out / "loss.csv", result.history)
    model.eval()
    return result
