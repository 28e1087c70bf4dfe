"""Synthetic crowd-scene benchmark with a plantable source->target domain shift.

Source scenes are colorful gradient backgrounds carrying a bump-lattice
texture and Gaussian-blob heads of two kinds: luma heads dip in luminance
and stay countable in any view, while chroma heads differ from the
background only chromatically (the offset is orthogonal to the grayscale
weights, pixel by pixel), so grayscale conversion erases them completely
while their labels remain.

The texture is the lever that makes the planted shift recoverable.  It is
a separable field: columns of head-sized bumps multiplied by a vertical
cosine resonant with the 4px feature stride, which the pooling pipeline
integrates to zero at matched geometry (raw, or exactly half scale) but
leaks as head-like phantom blobs whenever scale or tilt detunes the
period.  Half the bumps are chroma-directed and vanish under grayscale,
so the phantom dose of a dataset tracks its color fraction as well as its
geometry.  A model trained on a candidate augmentation therefore faces the
target's phantom dose only when gray ratio, scale, and tilt all match the
hidden shift; too little leaves target statistics unfamiliar, too much
teaches blob suppression that eats real heads.

Target scenes come from an independent stream and are pushed through the
same transform tree used for augmentation search, with known parameters
plus pixel noise, so the planted shift is exactly representable by the
search space.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from . import transforms
from .data import AnnotatedDataset, render_all
from .util import child_seed, substream

HEAD_ALPHA = 0.9
POSITION_MARGIN = 2.0
# luminance of a luma head relative to its background patch: deep enough to
# stay countable after grayscale conversion and half-resolution scaling
DIP_RANGE = (0.2, 0.4)
# chroma heads: fraction of heads drawn as pure-chroma disks (offset kept
# exactly orthogonal to the grayscale weights, so rgb_to_gray erases them),
# and the offset magnitude before the per-pixel gamut headroom cap
CHROMA_HEAD_P = 0.5
CHROMA_AMP = 0.4
GAMUT_SAFETY = 0.95
# bump-lattice texture: vertical period must stay resonant with the 4px
# feature stride (two cascaded 2x2 average pools integrate a period-4
# cosine to zero at any phase, and a single pool does the same after exact
# half scaling), bumps roughly head-sized so leaked phantoms compete with
# real heads, half of them chroma-directed so grayscale deletes their share
TEX_AMP = 0.5
TEX_PERIOD = 4.0
TEX_BUMP_SIGMA = 1.8
TEX_BUMP_SPACING = 5.0
TEX_CHROMA_P = 0.5


@dataclass(frozen=True)
class SceneConfig:
    """Knobs of the scene generator."""
    height: int = 64
    width: int = 96
    poisson_mean: float = 10.0
    head_radius: float = 4.0
    seed: int = 0
    sigma: float = 4.0
    kernel: int = 15

    def validate(self) -> "SceneConfig":
        if self.height % 16 or self.width % 16:
            raise ValueError(f"scene dims must be divisible by 16, got "
                             f"({self.height}, {self.width})")
        if self.poisson_mean <= 0:
            raise ValueError(f"poisson_mean must be positive, got {self.poisson_mean}")
        if self.head_radius <= 0:
            raise ValueError(f"head_radius must be positive, got {self.head_radius}")
        return self


@dataclass(frozen=True)
class DomainShift:
    """Planted target-domain shift: transform-tree parameters plus pixel noise."""
    p_g: float = 0.8
    scale: float = 0.5
    angle_deg: float = 10.0
    noise_sigma: float = 0.02

    def spec(self) -> transforms.TransformSpec:
        return transforms.TransformSpec(self.p_g, self.scale, self.angle_deg)


IDENTITY_SHIFT = DomainShift(p_g=0.0, scale=1.0, angle_deg=0.0, noise_sigma=0.0)


def _corner_gradient(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # four saturated corner colors, bilinearly interpolated across the
    # canvas; value and saturation ranges keep every channel strictly inside
    # the gamut so texture bumps and chroma offsets retain headroom
    corners = np.empty((4, 3))
    for i in range(4):
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.35, 0.55)
        val = rng.uniform(0.6, 0.75)
        corners[i] = colorsys.hsv_to_rgb(hue, sat, val)
    wy = np.linspace(0.0, 1.0, h)[:, None]
    wx = np.linspace(0.0, 1.0, w)[None, :]
    img = ((1 - wy) * (1 - wx))[None] * corners[0][:, None, None] \
        + ((1 - wy) * wx)[None] * corners[1][:, None, None] \
        + (wy * (1 - wx))[None] * corners[2][:, None, None] \
        + (wy * wx)[None] * corners[3][:, None, None]
    return img


def _lattice_texture(rng: np.random.Generator, img: np.ndarray) -> np.ndarray:
    """Add the separable bump-lattice texture in place and return the image.

    The field is profile(c, x) * cos(2 pi y / TEX_PERIOD + phase): any
    zero-mean period-4 vertical wave integrates to zero under two cascaded
    2x2 average pools (and its period-2 image after exact half scaling dies
    at the first pool), so the texture is invisible to pooled features at
    matched geometry regardless of the column profile.  Scaling whole
    columns keeps that form, so the gamut cap is a per-column scalar rather
    than a clip, and clipping can never reintroduce a DC trace.
    """
    _, h, w = img.shape
    cols = np.arange(w, dtype=np.float64)
    profile = np.zeros((3, w))
    for xb in rng.uniform(0.0, w - 1.0, size=int(w / TEX_BUMP_SPACING)):
        g = np.exp(-((cols - xb) ** 2) / (2.0 * TEX_BUMP_SIGMA ** 2))
        d = _chroma_dir(rng) if rng.random() < TEX_CHROMA_P else np.ones(3)
        profile += TEX_AMP * d[:, None] * g[None, :]
    wave = np.cos(2.0 * np.pi * np.arange(h) / TEX_PERIOD
                  + rng.uniform(0.0, 2 * np.pi))
    t = profile[:, None, :] * wave[None, :, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        room = np.where(t > 0, (1.0 - img) / t,
                        np.where(t < 0, -img / t, np.inf))
    s = np.clip(GAMUT_SAFETY * room.min(axis=(0, 1)), 0.0, 1.0)
    img += s[None, None, :] * t
    return img


def _luma_head_color(rng: np.random.Generator, bg: np.ndarray) -> np.ndarray:
    from .imaging import LUMA_B, LUMA_G, LUMA_R
    luma = np.array([LUMA_R, LUMA_G, LUMA_B])
    h0, s0, v0 = colorsys.rgb_to_hsv(*np.clip(bg, 0.0, 1.0))
    hue = (h0 + 0.5 + rng.uniform(-0.08, 0.08)) % 1.0
    sat = rng.uniform(0.85, 1.0)
    # RGB from HSV scales linearly with value, so one division lands the
    # luminance on dip * background luminance (clipped to the gamut)
    unit = np.array(colorsys.hsv_to_rgb(hue, sat, 1.0))
    unit_luma = float(luma @ unit)
    dip = rng.uniform(*DIP_RANGE)
    target_luma = float(luma @ bg) * dip
    v = min(1.0, target_luma / max(unit_luma, 1e-6))
    return unit * v


def _chroma_dir(rng: np.random.Generator) -> np.ndarray:
    # unit vector orthogonal to the grayscale weights: adding any multiple
    # of it to a pixel leaves rgb_to_gray of that pixel unchanged
    from .imaging import LUMA_B, LUMA_G, LUMA_R
    w = np.array([LUMA_R, LUMA_G, LUMA_B])
    a = np.array([1.0, 0.0, 0.0]) - (w[0] / (w @ w)) * w
    a /= np.linalg.norm(a)
    b = np.cross(w, a)
    b /= np.linalg.norm(b)
    phi = rng.uniform(0.0, 2 * np.pi)
    return np.cos(phi) * a + np.sin(phi) * b


def _chroma_offset(patch: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Color offset field along d capped by the per-pixel gamut headroom,
    so no later clipping can reintroduce a luminance trace."""
    dv = d[:, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(dv > 0, (1.0 - patch) / dv, np.inf)
        dn = np.where(dv < 0, patch / -dv, np.inf)
    t_max = np.nan_to_num(np.minimum(up, dn), nan=0.0).min(axis=0)
    return np.minimum(CHROMA_AMP, GAMUT_SAFETY * t_max) * dv


def _scene(rng: np.random.Generator, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    h, w = cfg.height, cfg.width
    img = _lattice_texture(rng, _corner_gradient(rng, h, w))
    count = int(rng.poisson(cfg.poisson_mean))
    pts = np.empty((count, 2))
    pts[:, 0] = rng.uniform(POSITION_MARGIN, w - 1 - POSITION_MARGIN, size=count)
    pts[:, 1] = rng.uniform(POSITION_MARGIN, h - 1 - POSITION_MARGIN, size=count)
    r = int(np.ceil(3 * cfg.head_radius))
    for x, y in pts:
        cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        gy, gx = np.mgrid[y0:y1, x0:x1]
        alpha = HEAD_ALPHA * np.exp(-((gx - x) ** 2 + (gy - y) ** 2)
                                    / (2.0 * cfg.head_radius ** 2))
        patch = img[:, y0:y1, x0:x1]
        if rng.random() < CHROMA_HEAD_P:
            img[:, y0:y1, x0:x1] = patch + alpha * _chroma_offset(
                patch, _chroma_dir(rng))
        else:
            color = _luma_head_color(rng, img[:, cy, cx])
            img[:, y0:y1, x0:x1] = (patch * (1 - alpha)
                                    + color[:, None, None] * alpha)
    return np.clip(img, 0.0, 1.0), pts


def gen_scenes(n: int, cfg: SceneConfig, stream: str) -> tuple[list, list]:
    """n raw scenes from the named stream; each image has its own derived seed."""
    cfg.validate()
    images, points = [], []
    for i in range(n):
        rng = substream(cfg.seed, "scene", stream, i)
        img, pts = _scene(rng, cfg)
        images.append(img)
        points.append(pts)
    return images, points


def gen_source(n: int, cfg: SceneConfig) -> AnnotatedDataset:
    """Labeled source-domain dataset."""
    images, points = gen_scenes(n, cfg, "source")
    dens = render_all(images, points, cfg.sigma, cfg.kernel)
    return AnnotatedDataset(images, points, dens)


def gen_target(n: int, cfg: SceneConfig, shift: DomainShift = DomainShift()
               ) -> tuple[AnnotatedDataset, AnnotatedDataset]:
    """Unlabeled target-domain dataset plus its hidden evaluation-only labels.

    Fresh scenes are transformed by the planted tree parameters, then pixel
    noise is added.  The first return value has points=None and is the only
    view training or search may touch; the second carries the ground truth.
    """
    images, points = gen_scenes(n, cfg, "target")
    base = AnnotatedDataset(images, points,
                            render_all(images, points, cfg.sigma, cfg.kernel))
    moved = transforms.apply_transform(base, shift.spec(),
                                       seed=child_seed(cfg.seed, "shift-assign"),
                                       sigma=cfg.sigma, kernel=cfg.kernel)
    if shift.noise_sigma > 0:
        for i in range(n):
            rng = substream(cfg.seed, "noise", i)
            moved.images[i] = np.clip(
                moved.images[i] + rng.normal(0.0, shift.noise_sigma,
                                             size=moved.images[i].shape),
                0.0, 1.0)
    public = AnnotatedDataset(moved.images, None, None)
    hidden = AnnotatedDataset(moved.images, moved.points, moved.densities)
    return public, hidden
