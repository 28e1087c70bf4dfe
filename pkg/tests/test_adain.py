import numpy as np
import pytest

from crowdalign import adain
from crowdalign.network import ModelParams


def test_channel_stats_scalar_loop(rng):
    f = rng.normal(size=(4, 5, 6))
    mu, sig = adain.channel_stats(f)
    for c in range(4):
        vals = [f[c, i, j] for i in range(5) for j in range(6)]
        m = sum(vals) / len(vals)
        v = sum((x - m) ** 2 for x in vals) / len(vals)
        assert mu[c] == pytest.approx(m, abs=1e-12)
        assert sig[c] == pytest.approx(v ** 0.5, abs=1e-12)
    with pytest.raises(ValueError):
        adain.channel_stats(np.zeros((4, 5)))


def test_mix_transplants_target_stats(rng):
    # 100 random instances; post-mix stats must match the style input's
    for _ in range(100):
        c = int(rng.integers(1, 6))
        h = int(rng.integers(2, 7))
        w = int(rng.integers(2, 7))
        f_s = rng.normal(2.0, 3.0, size=(c, h, w))
        f_t = rng.normal(-1.0, 0.5, size=(c, h, w))
        mixed = adain.adain_mix(f_s, f_t)
        mu_m, sig_m = adain.channel_stats(mixed)
        mu_t, sig_t = adain.channel_stats(f_t)
        assert np.allclose(mu_m, mu_t, atol=1e-5)
        assert np.allclose(sig_m, sig_t, atol=1e-5)


def test_self_mix_is_identity(rng):
    f = rng.normal(size=(3, 8, 8))
    assert np.allclose(adain.adain_mix(f, f), f, atol=1e-6)


def test_mix_preserves_content_up_to_affine(rng):
    f_s = rng.normal(size=(3, 8, 8))
    f_t = rng.normal(5.0, 2.0, size=(3, 8, 8))
    mixed = adain.adain_mix(f_s, f_t)
    for c in range(3):
        a = f_s[c].ravel() - f_s[c].mean()
        b = mixed[c].ravel() - mixed[c].mean()
        corr = (a * b).sum() / np.sqrt((a ** 2).sum() * (b ** 2).sum())
        assert corr == pytest.approx(1.0, abs=1e-6)


def test_mix_flat_channel_guard(rng):
    # a constant source channel must not divide by zero
    f_s = np.zeros((2, 4, 4))
    f_s[1] = rng.normal(size=(4, 4))
    f_t = rng.normal(size=(2, 4, 4))
    mixed = adain.adain_mix(f_s, f_t)
    assert np.all(np.isfinite(mixed))
    # the flat channel collapses onto the target mean
    assert np.allclose(mixed[0], f_t[0].mean(), atol=1e-9)


def test_mix_shape_mismatch():
    with pytest.raises(ValueError):
        adain.adain_mix(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


def test_validation_reward_structure(tiny_source, tiny_target):
    public, _ = tiny_target
    p = ModelParams.init(3, channels=4, hidden=6)
    out = adain.validation_reward(p, tiny_source, public, n_pairs=5, seed=17)
    assert len(out["pairs"]) == 5
    errs = [pair["abs_err"] for pair in out["pairs"]]
    assert out["reward"] == pytest.approx(-np.mean(errs), abs=1e-12)
    assert out["reward"] <= 0.0
    for pair in out["pairs"]:
        assert 0 <= pair["src"] < len(tiny_source)
        assert 0 <= pair["tgt"] < len(public)


def test_validation_reward_deterministic(tiny_source, tiny_target):
    public, _ = tiny_target
    p = ModelParams.init(3, channels=4, hidden=6)
    a = adain.validation_reward(p, tiny_source, public, n_pairs=4, seed=17)
    b = adain.validation_reward(p, tiny_source, public, n_pairs=4, seed=17)
    assert a == b
    c = adain.validation_reward(p, tiny_source, public, n_pairs=4, seed=18)
    assert a != c


def test_validation_reward_needs_labels(tiny_source, tiny_target):
    public, _ = tiny_target
    p = ModelParams.init(3, channels=4, hidden=6)
    with pytest.raises(ValueError):
        adain.validation_reward(p, public, tiny_source, n_pairs=2, seed=0)
    with pytest.raises(ValueError):
        adain.validation_reward(p, tiny_source, public, n_pairs=0, seed=0)
