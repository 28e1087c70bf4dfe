import numpy as np
import pytest

from crowdalign import synth
from tests.test_transforms import digest_dataset


def test_scene_config_validation():
    synth.SceneConfig().validate()
    with pytest.raises(ValueError):
        synth.SceneConfig(height=30).validate()
    with pytest.raises(ValueError):
        synth.SceneConfig(poisson_mean=0.0).validate()
    with pytest.raises(ValueError):
        synth.SceneConfig(head_radius=-1.0).validate()


def test_gen_source_shapes_and_ranges(tiny_source, tiny_scene_cfg):
    assert len(tiny_source) == 6
    for img, pts, den in zip(tiny_source.images, tiny_source.points,
                             tiny_source.densities):
        assert img.shape == (3, tiny_scene_cfg.height, tiny_scene_cfg.width)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert den.sum() == pytest.approx(len(pts), abs=1e-6)
        if len(pts):
            assert pts[:, 0].min() >= 0 and pts[:, 0].max() < tiny_scene_cfg.width
            assert pts[:, 1].min() >= 0 and pts[:, 1].max() < tiny_scene_cfg.height
    tiny_source.validate()


def test_gen_source_deterministic(tiny_scene_cfg):
    a = synth.gen_source(4, tiny_scene_cfg)
    b = synth.gen_source(4, tiny_scene_cfg)
    assert digest_dataset(a) == digest_dataset(b)


def test_gen_source_seed_changes_content(tiny_scene_cfg):
    from dataclasses import replace
    a = synth.gen_source(4, tiny_scene_cfg)
    b = synth.gen_source(4, replace(tiny_scene_cfg, seed=tiny_scene_cfg.seed + 1))
    assert digest_dataset(a) != digest_dataset(b)


def test_gen_scenes_prefix_stability(tiny_scene_cfg):
    # per-image substreams: the first k scenes do not depend on n
    im4, pt4 = synth.gen_scenes(4, tiny_scene_cfg, "source")
    im2, pt2 = synth.gen_scenes(2, tiny_scene_cfg, "source")
    for i in range(2):
        assert np.array_equal(im4[i], im2[i])
        assert np.array_equal(pt4[i], pt2[i])


def test_source_target_streams_differ(tiny_scene_cfg):
    src, _ = synth.gen_scenes(3, tiny_scene_cfg, "source")
    tgt, _ = synth.gen_scenes(3, tiny_scene_cfg, "target")
    assert not np.array_equal(src[0], tgt[0])


def test_counts_are_dispersed(tiny_scene_cfg):
    from dataclasses import replace
    ds = synth.gen_source(40, replace(tiny_scene_cfg, seed=5))
    counts = ds.counts()
    assert counts.mean() == pytest.approx(tiny_scene_cfg.poisson_mean, rel=0.35)
    assert counts.std() > 0


def test_gen_target_public_view_is_unlabeled(tiny_target):
    public, hidden = tiny_target
    assert not public.labeled
    assert hidden.labeled
    assert len(public) == len(hidden)
    for a, b in zip(public.images, hidden.images):
        assert a is b


def test_gen_target_applies_planted_shift(tiny_scene_cfg):
    public, _ = synth.gen_target(3, tiny_scene_cfg, synth.IDENTITY_SHIFT)
    moved, _ = synth.gen_target(3, tiny_scene_cfg, synth.DomainShift())
    assert not np.array_equal(public.images[0], moved.images[0])


def test_gen_target_identity_shift_matches_raw(tiny_scene_cfg):
    images, _ = synth.gen_scenes(3, tiny_scene_cfg, "target")
    public, _ = synth.gen_target(3, tiny_scene_cfg, synth.IDENTITY_SHIFT)
    for a, b in zip(public.images, images):
        assert np.array_equal(a, b)


def test_gen_target_noise_is_seeded(tiny_scene_cfg):
    a, _ = synth.gen_target(3, tiny_scene_cfg, synth.DomainShift())
    b, _ = synth.gen_target(3, tiny_scene_cfg, synth.DomainShift())
    for x, y in zip(a.images, b.images):
        assert np.array_equal(x, y)


def test_domain_shift_spec():
    shift = synth.DomainShift()
    spec = shift.spec()
    assert (spec.p_g, spec.scale, spec.angle_deg) == (0.8, 0.5, 10.0)


def test_head_population_has_two_modes(tiny_scene_cfg):
    # luma heads dip hard in the gray view; chroma heads vanish there while
    # staying strong in color, so both the color and gray contrasts split
    from dataclasses import replace
    from crowdalign.imaging import rgb_to_gray
    cfg = replace(tiny_scene_cfg, seed=21, poisson_mean=6.0)
    ds = synth.gen_source(30, cfg)
    gray_ratios, color_contrasts = [], []
    for img, pts in zip(ds.images, ds.points):
        gray = rgb_to_gray(img)[0]
        for x, y in pts:
            cx, cy = int(round(x)), int(round(y))
            patch = gray[max(0, cy - 1):cy + 2, max(0, cx - 1):cx + 2]
            ring = gray[max(0, cy - 8):cy + 9, max(0, cx - 8):cx + 9]
            if ring.mean() > 0.05:
                gray_ratios.append(patch.min() / ring.mean())
            cpatch = img[:, max(0, cy - 1):cy + 2, max(0, cx - 1):cx + 2]
            cring = img[:, max(0, cy - 8):cy + 9, max(0, cx - 8):cx + 9]
            color_contrasts.append(
                np.abs(cpatch.mean(axis=(1, 2)) - cring.mean(axis=(1, 2))).max())
    gray_ratios = np.array(gray_ratios)
    assert (gray_ratios < 0.55).sum() > 10   # luma heads dip in gray
    # nearly every head stands out in the color view
    assert np.mean(np.array(color_contrasts) > 0.04) > 0.9


def test_chroma_offset_is_invisible_in_gray(rng):
    # painting a chroma head must not change the grayscale view at all,
    # at any blend weight, and must stay inside the gamut
    from crowdalign.imaging import rgb_to_gray
    for _ in range(20):
        patch = rng.random((3, 12, 17))
        offset = synth._chroma_offset(patch, synth._chroma_dir(rng))
        alpha = rng.random((12, 17))
        out = patch + alpha * offset
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.allclose(rgb_to_gray(out), rgb_to_gray(patch), atol=1e-12)
        assert np.abs(offset).max() > 0.05  # the color view does move


def avg_pool(img, k):
    c, h, w = img.shape
    return img.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def test_texture_vanishes_under_matched_pooling(rng):
    # the lattice is loud at pixel level yet integrates to zero under the
    # 4px pooling cascade, and its half-scale image dies at a single pool
    from crowdalign.imaging import resize_bilinear
    for _ in range(5):
        plain = synth._corner_gradient(rng, 64, 96)
        textured = synth._lattice_texture(rng, plain.copy())
        assert np.abs(textured - plain).max() > 0.1
        assert np.allclose(avg_pool(textured, 4), avg_pool(plain, 4), atol=1e-9)
        half_t = resize_bilinear(textured, 0.5)
        half_p = resize_bilinear(plain, 0.5)
        assert np.allclose(avg_pool(half_t, 2), avg_pool(half_p, 2), atol=1e-9)


def test_texture_leaks_when_detuned(rng):
    # off-half scaling shifts the lattice period off resonance, so the same
    # pooling no longer cancels it
    from crowdalign.imaging import resize_bilinear
    plain = synth._corner_gradient(rng, 64, 96)
    textured = synth._lattice_texture(rng, plain.copy())
    det_t = resize_bilinear(textured, 0.65)
    det_p = resize_bilinear(plain, 0.65)
    h, w = det_t.shape[1:]
    crop = (slice(None), slice(0, h - h % 4), slice(0, w - w % 4))
    leak = np.abs(avg_pool(det_t[crop], 4) - avg_pool(det_p[crop], 4)).max()
    assert leak > 0.01


def test_chroma_texture_share_is_invisible_in_gray(rng, monkeypatch):
    from crowdalign.imaging import rgb_to_gray
    monkeypatch.setattr(synth, "TEX_CHROMA_P", 1.0)
    plain = synth._corner_gradient(rng, 64, 96)
    textured = synth._lattice_texture(rng, plain.copy())
    assert np.abs(textured - plain).max() > 0.1
    assert np.allclose(rgb_to_gray(textured), rgb_to_gray(plain), atol=1e-12)
