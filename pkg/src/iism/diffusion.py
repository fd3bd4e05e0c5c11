"""Prompt-conditioned denoising diffusion in the frozen VAE latent space.

The denoiser is an MLP over ``[z_t ; t/T ; p(y)]`` where ``p`` is a
learnable two-row embedding of the binary lesion prompt. Sampling runs the
ancestral DDPM update from pure noise and decodes with the frozen VAE.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import store
from .dataset import Manifest, SamplerWeights, load_labelmaps, weighted_stream
from .errors import ConfigError, PromptError, ScheduleError, TrainingDivergedError
from .vae import MaskVAE, TrainResult, decode_to_maps, posterior_of, write_history
from . import vae as vae_mod

log = logging.getLogger(__name__)


@dataclass
class DiffusionConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    prompt_dim: int = 16
    hidden_width: int = 1024
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    final_step_noise: bool = False
    # train on posterior means instead of posterior samples (ablation)
    posterior_mean: bool = False
    # encode the corpus once instead of re-encoding every batch; the frozen
    # encoder makes both give the same posteriors up to float rounding
    cache_posteriors: bool = False
    lesion_weighting: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.timesteps < 1:
            raise ConfigError(f"timesteps must be >= 1, got {self.timesteps}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        if self.prompt_dim < 1 or self.hidden_width < 1:
            raise ConfigError("prompt_dim and hidden_width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown diffusion config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear betas from ``beta_start`` to ``beta_end`` and their cumulative alpha products."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) * (beta_end - beta_start) / (T - 1)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


def _check_t(t, T: int):
    arr = np.asarray(t)
    if np.any(arr < 0) or np.any(arr >= T):
        raise ScheduleError(f"timestep {t} outside [0, {T - 1}]")


def _coef(values: np.ndarray, t, like):
    """Gather per-item schedule coefficients and shape them to broadcast against ``like``."""
    c = values[np.asarray(t)]
    if torch.is_tensor(like):
        c = torch.as_tensor(c, dtype=like.dtype)
        return c.reshape(c.shape + (1,) * (like.dim() - c.dim()))
    c = np.asarray(c)
    return c.reshape(c.shape + (1,) * (np.ndim(like) - c.ndim))


def forward_noise(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps. ``t`` may be per item."""
    _check_t(t, schedule.T)
    a = schedule.alpha_bars
    return _coef(np.sqrt(a), t, z0) * z0 + _coef(np.sqrt(1.0 - a), t, eps) * eps


def predict_x0(z_t, t, eps_hat, schedule: NoiseSchedule):
    """Invert the forward process given a noise estimate."""
    _check_t(t, schedule.T)
    a = schedule.alpha_bars
    return (z_t - _coef(np.sqrt(1.0 - a), t, z_t) * eps_hat) / _coef(np.sqrt(a), t, z_t)


def reverse_step(z_t, t: int, eps_hat, schedule: NoiseSchedule, xi=None, final_step_noise: bool = False):
    """One ancestral step z_t -> z_{t-1}.

    z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t * xi
    with sigma_t = sqrt(beta_t), and sigma_0 = 0 unless ``final_step_noise``.
    """
    _check_t(t, schedule.T)
    beta, alpha, abar = schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]
    mean = (z_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if t == 0 and not final_step_noise:
        return mean
    if xi is None:
        raise ValueError("noise draw xi is required for t > 0")
    return mean + math.sqrt(beta) * xi


class Denoiser(nn.Module):
    """Noise predictor with a learnable prompt table."""

    def __init__(self, latent_dim: int, timesteps: int, prompt_dim: int = 16, hidden_width: int = 1024):
        super().__init__()
        self.latent_dim = latent_dim
        self.timesteps = timesteps
        self.prompt = nn.Embedding(2, prompt_dim)
        nn.init.normal_(self.prompt.weight, mean=0.0, std=0.1)
        self.net = nn.Sequential(
            nn.Linear(latent_dim + 1 + prompt_dim, hidden_width),
            nn.SiLU(),
            nn.Linear(hidden_width, hidden_width),
            nn.SiLU(),
            nn.Linear(hidden_width, latent_dim),
        )

    @property
    def input_width(self) -> int:
        return self.net[0].in_features

    def forward(self, z_t: torch.Tensor, t, y) -> torch.Tensor:
        p = embed_prompt(self.prompt, y)
        return self.net(denoiser_input(z_t, t, self.timesteps, p))


def embed_prompt(table: nn.Embedding, y) -> torch.Tensor:
    """Look up the prompt row for ``y`` in {0, 1} (scalar or per item)."""
    y = torch.as_tensor(y, dtype=torch.long)
    if torch.any((y != 0) & (y != 1)):
        raise PromptError(f"prompt must be 0 or 1, got {y.tolist()}")
    return table(y)


def denoiser_input(z_t: torch.Tensor, t, T: int, p: torch.Tensor) -> torch.Tensor:
    """Concatenate ``[z_t ; t/T ; p]`` along the last axis."""
    z_t = torch.as_tensor(z_t)
    t = torch.as_tensor(t, dtype=z_t.dtype)
    lead = z_t.shape[:-1]
    tt = (t / T).expand(lead).unsqueeze(-1) if t.dim() == 0 else (t / T).reshape(lead + (1,))
    p = p.to(z_t.dtype).expand(lead + p.shape[-1:])
    return torch.cat([z_t, tt, p], dim=-1)


def predict_noise(model: Denoiser, z_t, t, y) -> torch.Tensor:
    return model(torch.as_tensor(z_t), t, y)


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error over batch and latent dimensions."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return (eps_hat - eps).pow(2).mean()


# -- checkpoints ---------------------------------------------------------


def to_checkpoint(model: Denoiser, cfg: DiffusionConfig, vae_digest: str, epoch: int = 0, **metadata) -> store.Checkpoint:
    meta = {
        "config": cfg.to_dict(),
        "latent_dim": model.latent_dim,
        "vae_digest": vae_digest,
        "epoch": epoch,
        "seed": cfg.seed,
        "created": metadata.pop("created", datetime.now(timezone.utc).isoformat(timespec="seconds")),
    }
    meta.update(metadata)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return store.Checkpoint("diffusion", tensors, meta)


def from_checkpoint(ckpt) -> tuple[Denoiser, DiffusionConfig, store.Checkpoint]:
    if not isinstance(ckpt, store.Checkpoint):
        ckpt = store.load(ckpt)
    if ckpt.kind != "diffusion":
        raise ConfigError(f"expected a diffusion checkpoint, got {ckpt.kind!r}")
    cfg = DiffusionConfig.from_dict(ckpt.metadata["config"])
    model = Denoiser(ckpt.metadata["latent_dim"], cfg.timesteps, cfg.prompt_dim, cfg.hidden_width)
    expected = model.state_dict()
    if set(expected) != set(ckpt.tensors):
        raise ConfigError("diffusion checkpoint tensors do not match the configured denoiser")
    for k, v in ckpt.tensors.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise ConfigError(f"tensor {k} has shape {v.shape}, config implies {tuple(expected[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()})
    model.eval()
    return model, cfg, ckpt


def _load_vae(vae) -> tuple[MaskVAE, str]:
    if isinstance(vae, MaskVAE):
        return vae, vae_mod.to_checkpoint(vae, created="").digest()
    ckpt = vae if isinstance(vae, store.Checkpoint) else store.load(vae)
    return vae_mod.from_checkpoint(ckpt), ckpt.digest()


# -- training ------------------------------------------------------------


def sample_timesteps(rng: torch.Generator, n: int, T: int) -> torch.Tensor:
    return torch.randint(0, T, (n,), generator=rng)


def train_diffusion(
    vae,
    manifest: Manifest,
    cfg: DiffusionConfig,
    out_dir=None,
    weights: SamplerWeights = SamplerWeights(),
    created: str | None = None,
    checkpoint_every: int = 1,
) -> TrainResult:
    """Fit the denoiser on latents of the train split; the VAE stays frozen.

    ``vae`` may be a model, a checkpoint, or a checkpoint directory.
    Each step samples z0 from the posterior, a per-item timestep uniform on
    {0..T-1} and Gaussian noise, then regresses the noise. The reported
    validation loss uses a fixed set of (z0, t, eps) draws.
    """
    vae_model, vae_digest = _load_vae(vae)
    for p in vae_model.parameters():
        p.requires_grad_(False)
    vae_model.eval()
    D = vae_model.cfg.latent_dim
    size = vae_model.cfg.image_size

    train_idx = manifest.indices("train")
    if not train_idx:
        raise ConfigError("manifest has no training records")
    val_idx = manifest.indices("val") or train_idx
    train_maps = load_labelmaps(manifest, train_idx, size)
    train_y = torch.as_tensor(manifest.lesion_flags("train"))
    mu, logvar = posterior_of(vae_model, train_maps)
    mu, logvar = torch.from_numpy(mu), torch.from_numpy(logvar)

    val_maps = load_labelmaps(manifest, val_idx, size)
    val_y = torch.as_tensor([manifest.records[i].lesion for i in val_idx])
    vmu, vlv = (torch.from_numpy(a) for a in posterior_of(vae_model, val_maps))
    g = torch.Generator().manual_seed(cfg.seed + 7)
    val_z0 = vmu if cfg.posterior_mean else vae_mod.reparameterize(vae_mod.GaussianPosterior(vmu, vlv), torch.randn(vmu.shape, generator=g))
    val_t = sample_timesteps(g, len(val_idx), cfg.timesteps)
    val_eps = torch.randn(val_z0.shape, generator=g)

    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    torch.manual_seed(cfg.seed)
    model = Denoiser(D, cfg.timesteps, cfg.prompt_dim, cfg.hidden_width)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    row_of = {gi: r for r, gi in enumerate(train_idx)}
    w = weights if cfg.lesion_weighting else SamplerWeights(1.0, 1.0)
    stream = weighted_stream(manifest, w, seed=cfg.seed, split="train")
    steps = math.ceil(len(train_idx) / cfg.batch_size)
    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model)
    best = math.inf

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        running = 0.0
        for _ in range(steps):
            rows = torch.as_tensor([row_of[next(stream)] for _ in range(cfg.batch_size)])
            if cfg.cache_posteriors:
                bmu, blv = mu[rows], logvar[rows]
            else:
                X = torch.from_numpy(vae_mod.onehot(train_maps[rows.numpy()], vae_model.cfg.num_classes).astype(np.float32))
                with torch.no_grad():
                    bmu, blv = vae_model.encode(X)
            if cfg.posterior_mean:
                z0 = bmu
            else:
                z0 = vae_mod.reparameterize(vae_mod.GaussianPosterior(bmu, blv), torch.randn(bmu.shape, generator=rng))
            t = sample_timesteps(rng, len(rows), cfg.timesteps)
            eps = torch.randn(z0.shape, generator=rng)
            z_t = forward_noise(z0, t.numpy(), eps, schedule)
            loss = diffusion_loss(model(z_t, t, train_y[rows]), eps)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"diffusion loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item()
        model.eval()
        with torch.no_grad():
            val_loss = diffusion_loss(model(forward_noise(val_z0, val_t.numpy(), val_eps, schedule), val_t, val_y), val_eps).item()
        row = {"epoch": epoch, "train_loss": running / steps, "val_loss": val_loss}
        result.history.append(row)
        log.info("diffusion epoch %d train %.4f val %.4f", epoch, row["train_loss"], val_loss)
        improved = val_loss < best
        if improved:
            best, result.best_epoch = val_loss, epoch
        if out is not None and (epoch % checkpoint_every == 0 or epoch == cfg.epochs):
            stamp = {"created": created} if created else {}
            ckpt = to_checkpoint(model, cfg, vae_digest, epoch, val_loss=val_loss, **stamp)
            result.checkpoints.append(store.save(ckpt, out / f"epoch{epoch}"))
            write_history(out / "loss.csv", result.history)
    model.eval()
    return result


# -- sampling ------------------------------------------------------------


def item_rng(seed: int, y: int, index: int) -> np.random.Generator:
    h = hashlib.sha256(f"sample:{seed}:{y}:{index}".encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(h[:16], "little")))


@torch.no_grad()
def sample_latents(model: Denoiser, schedule: NoiseSchedule, y: int, n: int, seed: int, final_step_noise: bool = False) -> np.ndarray:
    """Run the reverse chain for ``n`` items; item i draws all its noise from its own stream."""
    if y not in (0, 1):
        raise PromptError(f"prompt must be 0 or 1, got {y}")
    D, T = model.latent_dim, schedule.T
    if n == 0:
        return np.zeros((0, D), np.float32)
    # row 0 is z_T, row k >= 1 is the noise added at step t = T - k
    noise = np.stack([item_rng(seed, y, i).standard_normal((T + 1, D)) for i in range(n)]).astype(np.float32)
    noise = torch.from_numpy(noise)
    z = noise[:, 0]
    ys = torch.full((n,), y, dtype=torch.long)
    for k, t in enumerate(range(T - 1, -1, -1), start=1):
        eps_hat = model(z, torch.full((n,), t), ys)
        z = reverse_step(z, t, eps_hat, schedule, noise[:, k], final_step_noise)
    return z.numpy()


def sample_masks(vae, diffusion, y: int, n: int, seed: int) -> list[np.ndarray]:
    """Draw ``n`` label maps for prompt ``y``; deterministic given the checkpoints and seed."""
    if y not in (0, 1):
        raise PromptError(f"prompt must be 0 or 1, got {y}")
    vae_model, vae_digest = _load_vae(vae)
    if isinstance(diffusion, tuple):
        model, cfg = diffusion[:2]
        expected = None
    else:
        model, cfg, ckpt = from_checkpoint(diffusion)
        expected = ckpt.metadata.get("vae_digest")
    if model.latent_dim != vae_model.cfg.latent_dim:
        raise ConfigError(f"denoiser latent size {model.latent_dim} != vae latent size {vae_model.cfg.latent_dim}")
    if expected and expected != vae_digest:
        raise ConfigError("diffusion checkpoint was trained against a different VAE")
    schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    z0 = sample_latents(model, schedule, y, n, seed, cfg.final_step_noise)
    return list(decode_to_maps(vae_model, z0))
