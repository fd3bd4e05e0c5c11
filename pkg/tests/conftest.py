import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from iism.dataset import Manifest, load_labelmaps
from iism.phantom import PhantomConfig, generate_corpus

# acceptance verdicts, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Manifest:
    """6 patients x 8 slices; quick enough for training smoke tests."""
    out = tmp_path_factory.mktemp("small_corpus")
    cfg = PhantomConfig(seed=11, slices_per_volume=8, lesion_probability=0.5)
    return generate_corpus(cfg, 6, out)


@dataclass
class DeskRun:
    corpus: Manifest
    vae_result: object
    vae_seconds: float
    vae_ckpt: Path
    diff_result: object
    diff_seconds: float
    diff_dir: Path
    real_maps: np.ndarray


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    """The pinned desk recipe: 20 phantom patients x 40 slices at 64x64, D=64, T=100.

    Shared by the training, prompt-efficacy, fidelity and selection checks.
    """
    from iism.diffusion import DiffusionConfig, train_diffusion
    from iism.vae import VaeConfig, train_vae

    root = tmp_path_factory.mktemp("desk")
    corpus = generate_corpus(PhantomConfig(seed=0), 20, root / "corpus")

    t0 = time.perf_counter()
    vres = train_vae(VaeConfig(latent_dim=64, seed=0), corpus, out_dir=root / "vae", created="fixed")
    vae_seconds = time.perf_counter() - t0

    t0 = time.perf_counter()
    dres = train_diffusion(
        root / "vae" / "best", corpus, DiffusionConfig(seed=0, epochs=100), out_dir=root / "diff", created="fixed",
        checkpoint_every=25,
    )
    diff_seconds = time.perf_counter() - t0
    real = load_labelmaps(corpus, corpus.indices())
    return DeskRun(corpus, vres, vae_seconds, root / "vae" / "best", dres, diff_seconds, root / "diff", real)
