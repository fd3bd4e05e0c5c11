import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fdcheck import max_relative_error
from iism import store
from iism import vae as vae_mod
from iism.dataset import load_labelmaps
from iism.errors import ConfigError, LabelError, TrainingDivergedError
from iism.labels import onehot
from iism.vae import (
    GaussianPosterior,
    MaskVAE,
    VaeConfig,
    evaluate,
    from_checkpoint,
    kl_divergence,
    reconstruction_loss,
    reparameterize,
    to_checkpoint,
    train_vae,
    vae_loss,
)

# -- config and architecture ---------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        VaeConfig(image_size=(60, 64))
    with pytest.raises(ConfigError):
        VaeConfig(latent_dim=0)
    with pytest.raises(ConfigError):
        VaeConfig(encoder_channels=(32, 64, 128))
    with pytest.raises(ConfigError):
        VaeConfig(beta=-1)
    with pytest.raises(ConfigError):
        VaeConfig.from_dict({"latentdim": 4})
    assert VaeConfig.from_dict(VaeConfig().to_dict()) == VaeConfig()


def test_feature_grid_full_size():
    torch.manual_seed(0)
    model = MaskVAE(VaeConfig(latent_dim=256, image_size=(256, 256)))
    X = torch.from_numpy(onehot(np.zeros((1, 256, 256), np.uint8)).astype(np.float32))
    model.eval()
    with torch.no_grad():
        assert tuple(model.features(X).shape) == (1, 256, 16, 16)
        q = model.encode(X)
        assert q.mu.shape == (1, 256)
        assert tuple(model.decode(q.mu).shape) == (1, 7, 256, 256)


def test_feature_grid_desk_size():
    model = MaskVAE(VaeConfig()).eval()
    X = torch.zeros(2, 7, 64, 64)
    X[:, 0] = 1
    with torch.no_grad():
        assert tuple(model.features(X).shape) == (2, 256, 4, 4)
        q1, q2 = model.encode(X), model.encode(X.clone())
        L = model.decode(q1.mu)
    assert torch.equal(q1.mu, q2.mu) and torch.equal(q1.logvar, q2.logvar)
    assert tuple(L.shape) == (2, 7, 64, 64)
    with torch.no_grad():
        assert torch.equal(model.decode(q1.mu), L)


def test_encoder_shape_mismatch():
    model = MaskVAE(VaeConfig())
    with pytest.raises(ConfigError):
        model.encode(torch.zeros(1, 7, 32, 32))
    with pytest.raises(ConfigError):
        model.decode(torch.zeros(1, 3))


def test_logvar_clamped():
    model = MaskVAE(VaeConfig(latent_dim=4))
    with torch.no_grad():
        model.to_posterior.bias.fill_(1e4)
    q = model.eval().encode(torch.zeros(1, 7, 64, 64))
    assert q.logvar.max().item() == 20.0


# -- reparameterization ------------------------------------------------------------


def test_reparameterize_examples():
    mu = torch.tensor([1.0, 1.0], dtype=torch.float64)
    q = GaussianPosterior(mu, torch.log(torch.tensor([4.0, 4.0], dtype=torch.float64)))
    assert torch.allclose(reparameterize(q, [1.0, -1.0]), torch.tensor([3.0, -1.0], dtype=torch.float64), atol=1e-12)
    assert torch.equal(reparameterize(q, torch.zeros(2)), mu)
    e = torch.randn(5, dtype=torch.float64)
    assert torch.equal(reparameterize(GaussianPosterior(torch.zeros(5, dtype=torch.float64), torch.zeros(5, dtype=torch.float64)), e), e)
    with pytest.raises(ConfigError):
        reparameterize(q, torch.zeros(3))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 4, elements=st.floats(-5, 5)), hnp.arrays(np.float64, 4, elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, 4, elements=st.floats(-3, 3)), st.floats(-3, 3))
def test_reparameterize_linear_in_eps(mu, logvar, eps, a):
    q = GaussianPosterior(torch.from_numpy(mu), torch.from_numpy(logvar))
    slope = np.exp(logvar / 2)
    z1 = reparameterize(q, torch.from_numpy(eps)).numpy()
    z2 = reparameterize(q, torch.from_numpy(eps + a)).numpy()
    np.testing.assert_allclose(z2 - z1, a * slope, rtol=1e-9, atol=1e-9)


# -- KL ------------------------------------------------------------------------------


def _q(mu, logvar):
    return GaussianPosterior(torch.tensor(mu, dtype=torch.float64), torch.tensor(logvar, dtype=torch.float64))


def test_kl_closed_forms():
    assert kl_divergence(_q([0.0, 0.0], [0.0, 0.0])).item() == 0.0
    assert kl_divergence(_q([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-12)
    assert kl_divergence(_q([0.0], [math.log(4.0)])).item() == pytest.approx(0.8068528194400547, abs=1e-12)


def test_kl_reductions():
    q = _q([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]])
    # per-sample sums 0.5 and 0, batch mean 0.25; per-dim mean halves it
    assert kl_divergence(q, "sum").item() == pytest.approx(0.25)
    assert kl_divergence(q, "mean").item() == pytest.approx(0.125)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 3, elements=st.floats(-10, 10)), hnp.arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_kl_nonnegative(mu, logvar):
    kl = kl_divergence(GaussianPosterior(torch.from_numpy(mu), torch.from_numpy(logvar))).item()
    assert kl >= 0
    if kl == 0:
        # only reachable at the origin, up to float underflow of mu^2
        assert np.abs(mu).max() < 1e-150 and np.abs(logvar).max() < 1e-7


# -- reconstruction ---------------------------------------------------------------------


def test_ce_uniform_is_ln7():
    x = np.random.default_rng(0).integers(0, 7, (5, 5))
    assert reconstruction_loss(torch.zeros(7, 5, 5, dtype=torch.float64), x).item() == pytest.approx(math.log(7), abs=1e-9)


def test_ce_sharp_logits_vanish():
    x = np.random.default_rng(0).integers(0, 7, (2, 6, 6))
    L = 20.0 * torch.from_numpy(onehot(x).astype(np.float64))
    assert reconstruction_loss(L, x).item() < 1e-3


def test_ce_single_pixel():
    L = torch.zeros(7, 1, 1, dtype=torch.float64)
    L[0] = 2.0
    # -ln(e^2 / (e^2 + 6))
    assert reconstruction_loss(L, np.zeros((1, 1), np.uint8)).item() == pytest.approx(0.5944376642333190, abs=1e-12)


def test_ce_sum_reduction_scales_by_pixels():
    x = np.random.default_rng(1).integers(0, 7, (3, 4, 5))
    L = torch.randn(3, 7, 4, 5, dtype=torch.float64)
    assert reconstruction_loss(L, x, "sum").item() == pytest.approx(20 * reconstruction_loss(L, x, "mean").item())


def test_ce_errors():
    with pytest.raises(LabelError):
        reconstruction_loss(torch.zeros(7, 2, 2), np.full((2, 2), 7))
    with pytest.raises(ConfigError):
        reconstruction_loss(torch.zeros(7, 2, 2), np.zeros((3, 3), np.uint8))


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (7, 3, 3), elements=st.floats(-20, 20)), hnp.arrays(np.float64, (3, 3), elements=st.floats(-50, 50)))
def test_ce_shift_invariance(L, shift):
    x = np.arange(9).reshape(3, 3) % 7
    a = reconstruction_loss(torch.from_numpy(L), x).item()
    b = reconstruction_loss(torch.from_numpy(L + shift[None]), x).item()
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


# -- total loss ----------------------------------------------------------------------------


def test_vae_loss_composition():
    # true-class logit a with CE = 1 exactly: e^a = 6 / (e - 1); KL = mu^2 / 2 = 10
    L = torch.zeros(7, 1, 1, dtype=torch.float64)
    L[0] = math.log(6 / (math.e - 1))
    q = _q([[math.sqrt(20.0)]], [[0.0]])
    total, rec, kl = vae_loss(L, np.zeros((1, 1), np.uint8), q, beta=0.01, kl_reduction="sum")
    assert rec.item() == pytest.approx(1.0, abs=1e-12)
    assert kl.item() == pytest.approx(10.0, abs=1e-12)
    assert total.item() == pytest.approx(1.1, abs=1e-12)
    total0, rec0, _ = vae_loss(L, np.zeros((1, 1), np.uint8), q, beta=0.0)
    assert total0.item() == rec0.item()


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_vae_loss_monotone_in_beta(b1, b2):
    L = torch.randn(7, 2, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    q = _q([[0.3, -1.0]], [[0.2, 0.1]])
    x = np.array([[0, 1], [2, 3]])
    lo, hi = sorted((b1, b2))
    assert vae_loss(L, x, q, lo)[0].item() <= vae_loss(L, x, q, hi)[0].item() + 1e-15


# -- gradients -------------------------------------------------------------------------------


def test_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(3)
    L = torch.randn(1, 7, 1, 1, dtype=torch.float64, generator=g).requires_grad_()
    mu = torch.randn(1, 2, dtype=torch.float64, generator=g).requires_grad_()
    lv = torch.randn(1, 2, dtype=torch.float64, generator=g).requires_grad_()
    eps = torch.randn(1, 2, dtype=torch.float64, generator=g)
    x = np.array([[[4]]])
    assert max_relative_error(lambda: reconstruction_loss(L, x), [L]) <= 1e-3
    assert max_relative_error(lambda: kl_divergence(GaussianPosterior(mu, lv)), [mu, lv]) <= 1e-3
    assert max_relative_error(lambda: vae_loss(L, x, GaussianPosterior(mu, lv), 0.01)[0], [L, mu, lv]) <= 1e-3
    assert max_relative_error(lambda: reparameterize(GaussianPosterior(mu, lv), eps).pow(2).sum(), [mu, lv]) <= 1e-3


# -- training and checkpoints -------------------------------------------------------------------


def test_train_one_epoch_checkpoint_roundtrip(small_corpus, tmp_path):
    cfg = VaeConfig(epochs=1, batch_size=8, seed=3)
    res = train_vae(cfg, small_corpus, out_dir=tmp_path, created="t")
    assert [p.name for p in res.checkpoints] == ["epoch1"]
    assert (tmp_path / "best").is_dir() and (tmp_path / "loss.csv").read_text().count("\n") == 2
    val = load_labelmaps(small_corpus, small_corpus.indices("val"))
    before = evaluate(res.model, val, cfg.beta)
    loaded = from_checkpoint(tmp_path / "epoch1")
    after = evaluate(loaded, val, cfg.beta)
    assert before == after
    assert res.history[0]["val_loss"] == pytest.approx(before["loss"], abs=1e-12)
    assert store.load(tmp_path / "best").metadata["tag"] == "best"


def test_training_loss_decreases(small_corpus):
    res = train_vae(VaeConfig(epochs=6, batch_size=8, seed=0), small_corpus)
    losses = [h["train_loss"] for h in res.history]
    assert np.mean(losses[-2:]) < losses[0]


def test_training_is_seeded(small_corpus):
    a = train_vae(VaeConfig(epochs=1, batch_size=8, seed=5), small_corpus)
    b = train_vae(VaeConfig(epochs=1, batch_size=8, seed=5), small_corpus)
    assert to_checkpoint(a.model, created="").digest() == to_checkpoint(b.model, created="").digest()


def test_training_divergence_aborts(small_corpus, monkeypatch):
    def broken(*args, **kwargs):
        nan = torch.tensor(float("nan"), requires_grad=True)
        return nan, nan, nan

    monkeypatch.setattr(vae_mod, "vae_loss", broken)
    with pytest.raises(TrainingDivergedError, match="epoch 1"):
        train_vae(VaeConfig(epochs=1, batch_size=8), small_corpus)


def test_checkpoint_config_mismatch():
    ck = to_checkpoint(MaskVAE(VaeConfig(latent_dim=8)), created="")
    ck.metadata["config"]["latent_dim"] = 9
    with pytest.raises(ConfigError):
        from_checkpoint(ck)
    ck.kind = "diffusion"
    with pytest.raises(ConfigError):
        from_checkpoint(ck)


def test_checkpoint_without_batch_norm_roundtrip(tmp_path):
    model = MaskVAE(VaeConfig(latent_dim=8, batch_norm=False)).eval()
    store.save(to_checkpoint(model, created=""), tmp_path / "ck")
    loaded = from_checkpoint(tmp_path / "ck")
    z = torch.randn(2, 8)
    with torch.no_grad():
        assert torch.equal(model.decode(z), loaded.decode(z))
