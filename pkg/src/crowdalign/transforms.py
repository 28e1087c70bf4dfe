"""Composable source-data transform tree: grayscale, downscale, perspective tilt.

Three stacked units split a dataset into 2^3 = 8 subsets.  Each unit applies
to a seeded random subset of what reaches it: grayscale with searched ratio
p_g, scaling (fixed ratio 0.5, searched factor), tilt (fixed ratio 0.5,
searched angle).  The transformed set has exactly one output per input image.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import imaging
from .data import AnnotatedDataset, render_all

RATIO_SCALED = 0.5
RATIO_WARPED = 0.5


@dataclass(frozen=True)
class TransformSpec:
    """Searched parameters of the transform tree."""
    p_g: float
    scale: float
    angle_deg: float

    def validate(self, theta_max: float = 30.0) -> "TransformSpec":
        if not 0.0 <= self.p_g <= 1.0:
            raise ValueError(f"p_g must lie in [0, 1], got {self.p_g}")
        if not 0.0 < self.scale <= 1.0:
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")
        if not 0.0 <= self.angle_deg <= theta_max:
            raise ValueError(f"angle_deg must lie in [0, {theta_max}], got {self.angle_deg}")
        return self

    def to_json(self) -> str:
        return json.dumps({"p_g": self.p_g, "scale": self.scale,
                           "angle_deg": self.angle_deg})

    @classmethod
    def from_json(cls, text: str) -> "TransformSpec":
        obj = json.loads(text)
        extra = set(obj) - {"p_g", "scale", "angle_deg"}
        if extra:
            raise ValueError(f"unknown transform fields: {sorted(extra)}")
        return cls(float(obj["p_g"]), float(obj["scale"]), float(obj["angle_deg"]))


IDENTITY_SPEC = TransformSpec(p_g=0.0, scale=1.0, angle_deg=0.0)


def spec_to_vec(spec: TransformSpec, theta_max: float = 30.0,
                scale_min: float = 0.05) -> np.ndarray:
    """Map a spec into the unit cube the controller operates on."""
    return np.array([spec.p_g,
                     (spec.scale - scale_min) / (1.0 - scale_min),
                     spec.angle_deg / theta_max], dtype=np.float64)


def vec_to_spec(vec, theta_max: float = 30.0, scale_min: float = 0.05) -> TransformSpec:
    """Inverse of spec_to_vec with clamping into the search box."""
    v = np.clip(np.asarray(vec, dtype=np.float64).reshape(3), 0.0, 1.0)
    return TransformSpec(p_g=float(v[0]),
                         scale=float(scale_min + v[1] * (1.0 - scale_min)),
                         angle_deg=float(v[2] * theta_max))


def random_spec(rng: np.random.Generator, theta_max: float = 30.0,
                scale_min: float = 0.05) -> TransformSpec:
    return vec_to_spec(rng.uniform(0.0, 1.0, size=3), theta_max, scale_min)


def assign_paths(n: int, spec: TransformSpec, seed: int,
                 p_s: float = RATIO_SCALED, p_pt: float = RATIO_WARPED) -> np.ndarray:
    """Per-image unit flags (gray, scaled, warped) as a (n, 3) uint8 array.

    Each level splits every incoming group with a seeded permutation, taking
    floor(ratio * group size) members, so the eight leaf subsets partition the
    dataset deterministically.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    bits = np.zeros((n, 3), dtype=np.uint8)

    def split(members: np.ndarray, ratio: float) -> np.ndarray:
        take = int(np.floor(ratio * len(members)))
        perm = rng.permutation(len(members))
        return members[perm[:take]]

    all_idx = np.arange(n)
    bits[split(all_idx, spec.p_g), 0] = 1
    # levels below operate group by group in a fixed order for determinism
    for g in (1, 0):
        grp = all_idx[bits[:, 0] == g]
        bits[split(grp, p_s), 1] = 1
    for g in (1, 0):
        for sc in (1, 0):
            grp = all_idx[(bits[:, 0] == g) & (bits[:, 1] == sc)]
            bits[split(grp, p_pt), 2] = 1
    return bits


def subset_cardinalities(spec: TransformSpec, n: int,
                         p_s: float = RATIO_SCALED,
                         p_pt: float = RATIO_WARPED) -> np.ndarray:
    """Expected sizes of the 8 leaf subsets under the floor rule.

    Index bit order is (gray, scaled, warped) with gray the most significant
    bit; sizes always sum to n.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    sizes = np.zeros(8, dtype=np.int64)
    n_gray = int(np.floor(spec.p_g * n))
    for g, m in ((1, n_gray), (0, n - n_gray)):
        n_sc = int(np.floor(p_s * m))
        for sc, m2 in ((1, n_sc), (0, m - n_sc)):
            n_pt = int(np.floor(p_pt * m2))
            sizes[4 * g + 2 * sc + 1] = n_pt
            sizes[4 * g + 2 * sc] = m2 - n_pt
    return sizes


def transform_image(img: np.ndarray, points, flags, spec: TransformSpec,
                    theta_max: float = 30.0):
    """Apply the flagged units to one image and co-transform its points."""
    gray, scaled, warped = (bool(flags[0]), bool(flags[1]), bool(flags[2]))
    h, w = img.shape[1:]
    out = imaging.rgb_to_gray(img) if gray else img.copy()
    offset = (0, 0)
    if scaled:
        out = imaging.resize_bilinear(out, spec.scale)
        out, offset = imaging.pad_to(out, h, w)
    if warped:
        out = imaging.perspective_warp(out, spec.angle_deg, theta_max)
    if points is None:
        return out, None
    pts = imaging.warp_points(points,
                              spec.angle_deg if warped else 0.0,
                              spec.scale if scaled else 1.0,
                              offset, (h, w), (h, w))
    return out, pts


def apply_transform(ds: AnnotatedDataset, spec: TransformSpec, seed: int,
                    theta_max: float = 30.0, sigma: float = 4.0,
                    kernel: int = 15, p_s: float = RATIO_SCALED,
                    p_pt: float = RATIO_WARPED) -> AnnotatedDataset:
    """Build the transformed dataset S+; same length and canvas as the input."""
    spec.validate(theta_max)
    bits = assign_paths(len(ds), spec, seed, p_s, p_pt)
    images, points = [], []
    for i, img in enumerate(ds.images):
        pts_in = ds.points[i] if ds.labeled else None
        out, pts = transform_image(img, pts_in, bits[i], spec, theta_max)
        images.append(out)
        points.append(pts)
    if not ds.labeled:
        return AnnotatedDataset(images, None, None)
    dens = render_all(images, points, sigma, kernel)
    return AnnotatedDataset(images, points, dens)
