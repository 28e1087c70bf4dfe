"""Dataset container and on-disk layout (PNG images + CSV point lists)."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import imaging


@dataclass
class AnnotatedDataset:
    """Images with optional head annotations and rendered density maps.

    Unlabeled (target-domain) datasets carry points=None and densities=None.
    Images may have per-item spatial dims; labeled items satisfy
    densities[i].sum() == len(points[i]) up to float addition.
    """
    images: list = field(default_factory=list)
    points: list | None = None
    densities: list | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.points is not None

    def counts(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError("dataset has no annotations")
        return np.array([len(p) for p in self.points], dtype=np.float64)

    def validate(self) -> None:
        for img in self.images:
            imaging.check_image(img)
        if self.labeled:
            if len(self.points) != len(self.images):
                raise ValueError("points/images length mismatch")
            if self.densities is None or len(self.densities) != len(self.images):
                raise ValueError("densities/images length mismatch")
            for img, pts, den in zip(self.images, self.points, self.densities):
                if den.shape != img.shape[1:]:
                    raise ValueError(f"density shape {den.shape} != image {img.shape[1:]}")
                if abs(den.sum() - len(pts)) > 1e-3:
                    raise ValueError("density total drifted from point count")


def render_all(images: list, points: list, sigma: float, kernel: int) -> list:
    """Density map per image from its point list."""
    return [imaging.render_density(p, img.shape[1], img.shape[2], sigma, kernel)
            for img, p in zip(images, points)]


def _to_png(img: np.ndarray) -> Image.Image:
    arr = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def _from_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _write_points(path: str, pts: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y"])
        for x, y in np.asarray(pts, dtype=np.float64).reshape(-1, 2):
            writer.writerow([repr(float(x)), repr(float(y))])


def _read_points(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["x", "y"]:
            raise ValueError(f"{path}: expected 'x,y' header")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def save_dataset(ds: AnnotatedDataset, out_dir: str, labels: bool = True) -> None:
    """Write img_%04d.png (and img_%04d.csv when labeled) under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    for i, img in enumerate(ds.images):
        _to_png(img).save(os.path.join(out_dir, f"img_{i:04d}.png"))
        if labels and ds.labeled:
            _write_points(os.path.join(out_dir, f"img_{i:04d}.csv"), ds.points[i])


def save_points(points: list, out_dir: str) -> None:
    """Write only the CSV point lists (hidden-label store for target data)."""
    os.makedirs(out_dir, exist_ok=True)
    for i, pts in enumerate(points):
        _write_points(os.path.join(out_dir, f"img_{i:04d}.csv"), pts)


def load_points(in_dir: str, n: int) -> list:
    pts = []
    for i in range(n):
        path = os.path.join(in_dir, f"img_{i:04d}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing annotation file {path}")
        pts.append(_read_points(path))
    return pts


def load_dataset(in_dir: str, sigma: float = 4.0, kernel: int = 15) -> AnnotatedDataset:
    """Read a dataset directory; renders densities when CSV annotations exist."""
    if not os.path.isdir(in_dir):
        raise FileNotFoundError(f"no such dataset directory: {in_dir}")
    names = sorted(f for f in os.listdir(in_dir)
                   if f.startswith("img_") and f.endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no img_*.png files under {in_dir}")
    images = [_from_png(os.path.join(in_dir, f)) for f in names]
    csvs = [os.path.join(in_dir, f[:-4] + ".csv") for f in names]
    if all(os.path.exists(c) for c in csvs):
        points = [_read_points(c) for c in csvs]
        dens = render_all(images, points, sigma, kernel)
        return AnnotatedDataset(images, points, dens)
    if any(os.path.exists(c) for c in csvs):
        raise ValueError(f"{in_dir}: some images have CSV annotations and some do not")
    return AnnotatedDataset(images, None, None)
