import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from iism.errors import CorpusTooSmallError, NumericalError
from iism.labels import DEFAULT_CATALOG
from iism.metrics import (
    FeatureStats,
    checkpoint_selection,
    class_distribution,
    distribution_report,
    extract_features,
    feature_stats,
    fid,
    format_table,
    frechet_distance,
    total_variation,
)
from iism.phantom import PhantomConfig, generate_slice, slice_rng


def _phantoms(n, lesion_probability, seed=0):
    cfg = PhantomConfig(seed=seed, lesion_probability=lesion_probability)
    return [generate_slice(cfg, slice_rng(seed, "F", k))[0] for k in range(n)]


def _stats1(mu, sigma):
    return FeatureStats(np.array([mu], float), np.array([[sigma**2]], float), 100)


# -- class distributions ----------------------------------------------------------------


def test_class_distribution_cases():
    np.testing.assert_array_equal(class_distribution([np.zeros((4, 4), np.uint8)]), [1, 0, 0, 0, 0, 0, 0])
    m = np.zeros((4, 4), np.uint8)
    m[:, 2:] = 4
    assert class_distribution([m])[[0, 4]].tolist() == [0.5, 0.5]
    with pytest.raises(CorpusTooSmallError):
        class_distribution([])


def test_class_distribution_histogram_oracle():
    masks = _phantoms(30, 0.5)
    counts = [0] * 7
    for m in masks:
        for v in m.ravel().tolist():
            counts[v] += 1
    total = sum(counts)
    np.testing.assert_allclose(class_distribution(masks), [c / total for c in counts], rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.uint8, (3, 5, 6), elements=st.integers(0, 6)), st.permutations(range(7)))
def test_class_distribution_sums_to_one_and_relabels(masks, perm):
    p = class_distribution(masks)
    assert abs(p.sum() - 1) <= 1e-9
    relabelled = np.asarray(perm, np.uint8)[masks]
    np.testing.assert_allclose(class_distribution(relabelled)[list(perm)], p)


# -- total variation ----------------------------------------------------------------------


def test_total_variation_cases():
    p = np.full(7, 1 / 7)
    assert total_variation(p, p) == 0
    assert total_variation(np.eye(7)[0], np.eye(7)[1]) == 1
    rng = np.random.default_rng(3)
    a, b = rng.dirichlet(np.ones(7)), rng.dirichlet(np.ones(7))
    s = 0.0
    for i in range(7):
        s += abs(a[i] - b[i])
    assert total_variation(a, b) == pytest.approx(s / 2, abs=1e-15)
    with pytest.raises(ValueError):
        total_variation(np.ones(3) / 3, np.ones(4) / 4)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, 7, elements=st.floats(0.01, 1)), hnp.arrays(np.float64, 7, elements=st.floats(0.01, 1)))
def test_total_variation_bounds(a, b):
    a, b = a / a.sum(), b / b.sum()
    tv = total_variation(a, b)
    assert 0 <= tv <= 1
    assert total_variation(a, a) == 0
    assert tv == total_variation(b, a)


def test_distribution_report_files(tmp_path):
    p = class_distribution(_phantoms(5, 0.0))
    q = class_distribution(_phantoms(5, 1.0))
    rep = distribution_report(p, q, DEFAULT_CATALOG, tmp_path / "r.png", tmp_path / "r.json")
    assert rep["classes"] == list(DEFAULT_CATALOG.names)
    assert rep["total_variation"] == pytest.approx(total_variation(p, q))
    assert json.loads((tmp_path / "r.json").read_text()) == rep
    assert (tmp_path / "r.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# -- features ---------------------------------------------------------------------------


def test_feature_length_and_background_centroid():
    f = extract_features(np.zeros((64, 64), np.uint8))
    assert f.shape == (35,)
    np.testing.assert_array_equal(f[:7], [1, 0, 0, 0, 0, 0, 0])
    # mean of i/64 over i = 0..63
    assert f[7] == pytest.approx(0.5 - 1 / 128, abs=1e-15)
    assert f[14] == pytest.approx(0.5 - 1 / 128, abs=1e-15)
    assert f[21] == pytest.approx((64**2 - 1) / (12 * 64**2), abs=1e-15)
    # absent classes sit at the centre with zero spread
    assert f[8] == 0.5 and f[15] == 0.5 and f[22] == 0 and f[29] == 0


def test_features_mirror_invariant_area():
    m = _phantoms(1, 1.0)[0]
    a, b = extract_features(m), extract_features(m[:, ::-1])
    np.testing.assert_array_equal(a[:7], b[:7])
    np.testing.assert_allclose(a[21:28], b[21:28], atol=1e-15)


def test_features_deterministic():
    m = _phantoms(1, 0.5)[0]
    assert extract_features(m).tobytes() == extract_features(m.copy()).tobytes()


# -- Fréchet distance ---------------------------------------------------------------------


def test_frechet_one_dimensional_closed_forms():
    assert frechet_distance(_stats1(0, 1), _stats1(0.7, 1)) == pytest.approx(0.49, abs=1e-9)
    assert frechet_distance(_stats1(0, 1), _stats1(0, 3)) == pytest.approx(4.0, abs=1e-9)
    assert frechet_distance(_stats1(1, 2), _stats1(1, 2)) == pytest.approx(0.0, abs=1e-12)


def test_frechet_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a = feature_stats(rng.standard_normal((200, 6)))
    b = feature_stats(rng.standard_normal((200, 6)) * 2 + 1)
    assert abs(frechet_distance(a, a)) <= 1e-8
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    assert frechet_distance(a, b) > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0.0, 5.0), st.floats(0.01, 5.0), st.integers(0, 1000))
def test_frechet_monotone_in_mean_distance(F, d1, extra, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((F, F))
    cov = A @ A.T + 0.1 * np.eye(F)
    direction = rng.standard_normal(F)
    direction /= np.linalg.norm(direction)
    base = FeatureStats(np.zeros(F), cov, 10)
    near = FeatureStats(d1 * direction, cov, 10)
    far = FeatureStats((d1 + extra) * direction, cov, 10)
    assert frechet_distance(base, near) < frechet_distance(base, far)
    assert frechet_distance(base, near) >= -1e-8


def test_frechet_rejects_non_psd():
    bad = FeatureStats(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]), 10)
    good = FeatureStats(np.zeros(2), np.eye(2), 10)
    with pytest.raises(NumericalError):
        frechet_distance(bad, good)
    with pytest.raises(NumericalError):
        frechet_distance(good, bad)
    with pytest.raises(ValueError):
        frechet_distance(good, _stats1(0, 1))


def test_feature_stats_unbiased_with_jitter():
    f = np.array([[0.0, 1.0], [2.0, 3.0], [4.0, 8.0]])
    s = feature_stats(f)
    np.testing.assert_allclose(s.cov, np.cov(f.T, ddof=1) + 1e-6 * np.eye(2))
    assert s.count == 3
    with pytest.raises(CorpusTooSmallError):
        feature_stats(f[:1])


# -- FID on corpora --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def corpora():
    return {"free": _phantoms(120, 0.0, seed=1), "full": _phantoms(120, 1.0, seed=2), "mixed": _phantoms(240, 0.5, seed=3)}


def test_fid_self_is_zero(corpora):
    assert fid(corpora["mixed"], corpora["mixed"]) <= 1e-6


def test_fid_ordering(corpora):
    halves = fid(corpora["mixed"][::2], corpora["mixed"][1::2])
    extremes = fid(corpora["free"], corpora["full"])
    assert halves < extremes
    assert extremes > 0


def test_fid_too_small(corpora):
    with pytest.raises(CorpusTooSmallError, match="36"):
        fid(corpora["free"][:35], corpora["full"])
    assert fid(corpora["free"][:36], corpora["full"][:36]) > 0


# -- checkpoint table ----------------------------------------------------------------------------


def test_format_table():
    rows = [
        {"checkpoint": "epoch100", "epoch": 100, "fid": 64.43, "selected": False},
        {"checkpoint": "epoch400", "epoch": 400, "fid": 63.91, "selected": False},
        {"checkpoint": "epoch800", "epoch": 800, "fid": 61.88, "selected": True},
    ]
    assert format_table(rows).splitlines() == [
        "Checkpoint  FID",
        "Epoch 100   64.43",
        "Epoch 400   63.91",
        "Epoch 800   61.88 *",
    ]


@pytest.fixture(scope="module")
def tiny_run(small_corpus, tmp_path_factory):
    import torch

    from iism.diffusion import DiffusionConfig, train_diffusion
    from iism.vae import MaskVAE, VaeConfig

    torch.manual_seed(0)
    vae = MaskVAE(VaeConfig(latent_dim=8)).eval()
    out = tmp_path_factory.mktemp("diff")
    res = train_diffusion(vae, small_corpus, DiffusionConfig(epochs=3, hidden_width=32, timesteps=10), out_dir=out, created="x")
    return vae, res.checkpoints


def test_checkpoint_selection_single(tiny_run, corpora):
    vae, ckpts = tiny_run
    sel = checkpoint_selection(vae, ckpts[:1], corpora["mixed"][:40], n_samples=40, seed=0)
    assert sel.best == "epoch1" and len(sel.table) == 1 and sel.table[0]["selected"]


def test_checkpoint_selection_table(tiny_run, corpora):
    vae, ckpts = tiny_run
    sel = checkpoint_selection(vae, list(reversed(ckpts)), corpora["mixed"][:40], n_samples=40, seed=0)
    assert [r["epoch"] for r in sel.table] == [1, 2, 3]
    fids = [r["fid"] for r in sel.table]
    assert sel.best == sel.table[int(np.argmin(fids))]["checkpoint"]
    assert sum(r["selected"] for r in sel.table) == 1
    again = checkpoint_selection(vae, ckpts, corpora["mixed"][:40], n_samples=40, seed=0)
    assert [r["fid"] for r in again.table] == fids
    with pytest.raises(ValueError):
        checkpoint_selection(vae, [], corpora["mixed"], n_samples=40, seed=0)
