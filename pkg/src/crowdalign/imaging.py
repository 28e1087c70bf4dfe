"""Pixel-level primitives: grayscale, bilinear scaling, perspective warps, density maps.

Images are numpy float arrays shaped (3, H, W) with values in [0, 1].
Annotation points are float arrays shaped (n, 2) holding (x, y) pixel
coordinates where pixel centers sit at integer coordinates.
"""
from __future__ import annotations

import numpy as np

# ITU-R BT.601 luminance weights
LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


def check_image(img) -> np.ndarray:
    """Validate an image array and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must have shape (3, H, W), got {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"image has empty spatial dims: {arr.shape}")
    return arr


def rgb_to_gray(img) -> np.ndarray:
    """Luminance grayscale, replicated back to 3 channels so shape is preserved."""
    arr = check_image(img)
    y = LUMA_R * arr[0] + LUMA_G * arr[1] + LUMA_B * arr[2]
    return np.repeat(y[None], 3, axis=0)


def scaled_dims(h: int, w: int, s: float) -> tuple[int, int]:
    """Output dims of a scale-s resize: round half up, floor at 1 pixel."""
    if s <= 0:
        raise ValueError(f"scale factor must be positive, got {s}")
    return max(1, int(np.floor(s * h + 0.5))), max(1, int(np.floor(s * w + 0.5)))


def _sample_bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     oob_zero: bool) -> np.ndarray:
    """Sample (3, H, W) at float coords; out-of-bounds neighbors read 0 or clamp."""
    _, h, w = img.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = np.zeros((3,) + xs.shape, dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                        (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        if oob_zero:
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[:, yi.clip(0, h - 1), xi.clip(0, w - 1)] * ok
        else:
            vals = img[:, yi.clip(0, h - 1), xi.clip(0, w - 1)]
        out += vals * wgt
    return out


def resize_bilinear(img, s: float) -> np.ndarray:
    """Downscale or upscale by factor s with half-pixel-centered bilinear sampling."""
    arr = check_image(img)
    h, w = arr.shape[1:]
    oh, ow = scaled_dims(h, w, s)
    if (oh, ow) == (h, w):
        return arr.copy()
    # effective ratio is derived from the integer output size
    ry = h / oh
    rx = w / ow
    ys = (np.arange(oh) + 0.5) * ry - 0.5
    xs = (np.arange(ow) + 0.5) * rx - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _sample_bilinear(arr, gx, gy, oob_zero=False)


def pad_to(img, h: int, w: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad an image onto a centered (3, h, w) canvas.

    Returns the canvas and the (off_x, off_y) placement offset, which callers
    must add to annotation coordinates.
    """
    arr = check_image(img)
    ih, iw = arr.shape[1:]
    if ih > h or iw > w:
        raise ValueError(f"image ({ih}, {iw}) does not fit canvas ({h}, {w})")
    off_y = (h - ih) // 2
    off_x = (w - iw) // 2
    canvas = np.zeros((3, h, w), dtype=np.float64)
    canvas[:, off_y:off_y + ih, off_x:off_x + iw] = arr
    return canvas, (off_x, off_y)


def perspective_matrix(theta_deg: float, h: int, w: int) -> np.ndarray:
    """Homography for tilting the image plane by theta around its horizontal axis.

    The focal length is max(h, w) and the principal point (w/2, h/2) is an
    exact fixed point; positive angles compress the top of the frame.
    """
    f = float(max(h, w))
    cx, cy = w / 2.0, h / 2.0
    k = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    k_inv = np.array([[1.0 / f, 0.0, -cx / f], [0.0, 1.0 / f, -cy / f], [0.0, 0.0, 1.0]])
    t = np.deg2rad(theta_deg)
    m = np.array([[1.0, 0.0, 0.0],
                  [0.0, np.cos(t), 0.0],
                  [0.0, -np.sin(t), 1.0]])
    return k @ m @ k_inv


def apply_homography(points: np.ndarray, hom: np.ndarray) -> np.ndarray:
    """Apply a 3x3 homography to (n, 2) points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 2)
    ones = np.ones((pts.shape[0], 1))
    proj = np.concatenate([pts, ones], axis=1) @ hom.T
    return proj[:, :2] / proj[:, 2:3]


def perspective_warp(img, theta_deg: float, theta_max: float = 30.0) -> np.ndarray:
    """Warp an image by the plane-tilt homography; out-of-bounds samples read 0."""
    arr = check_image(img)
    if not 0.0 <= theta_deg <= theta_max:
        raise ValueError(f"tilt angle {theta_deg} outside [0, {theta_max}]")
    if theta_deg == 0.0:
        return arr.copy()
    h, w = arr.shape[1:]
    hom = perspective_matrix(theta_deg, h, w)
    inv = np.linalg.inv(hom)
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    denom = inv[2, 0] * gx + inv[2, 1] * gy + inv[2, 2]
    sx = (inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]) / denom
    sy = (inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]) / denom
    return _sample_bilinear(arr, sx, sy, oob_zero=True)


def warp_points(points, theta_deg: float, s: float, pad_offset: tuple[int, int],
                src_hw: tuple[int, int], canvas_hw: tuple[int, int]) -> np.ndarray:
    """Push annotation points through the scale -> pad -> tilt chain of their image.

    Scaling multiplies coordinates by the realized output/input size ratio,
    padding adds the placement offset, and the tilt applies the same
    homography used for pixels.  Points landing outside the canvas are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
    sh, sw = src_hw
    ch, cw = canvas_hw
    if s != 1.0:
        oh, ow = scaled_dims(sh, sw, s)
        pts[:, 0] *= ow / sw
        pts[:, 1] *= oh / sh
    pts[:, 0] += pad_offset[0]
    pts[:, 1] += pad_offset[1]
    if theta_deg != 0.0:
        pts = apply_homography(pts, perspective_matrix(theta_deg, ch, cw))
    keep = ((pts[:, 0] > -0.5) & (pts[:, 0] < cw - 0.5)
            & (pts[:, 1] > -0.5) & (pts[:, 1] < ch - 0.5))
    return pts[keep]


def gaussian_window(sigma: float, size: int) -> np.ndarray:
    """Unnormalized truncated Gaussian window of odd side length."""
    if size % 2 != 1 or size < 1:
        raise ValueError(f"window size must be odd and positive, got {size}")
    ax = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return np.outer(g, g)


def render_density(points, h: int, w: int, sigma: float = 4.0,
                   kernel: int = 15) -> np.ndarray:
    """Sum one unit-mass truncated Gaussian per annotated point.

    Each point's window is renormalized after border clipping, so the map
    total equals the number of in-bounds points exactly (up to float addition).
    """
    base = gaussian_window(sigma, kernel)
    r = kernel // 2
    density = np.zeros((h, w), dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    for x, y in pts:
        cx = int(np.floor(x + 0.5))
        cy = int(np.floor(y + 0.5))
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        y0, y1 = max(0, cy - r), min(h, cy + r + 1)
        x0, x1 = max(0, cx - r), min(w, cx + r + 1)
        win = base[y0 - cy + r:y1 - cy + r, x0 - cx + r:x1 - cx + r]
        density[y0:y1, x0:x1] += win / win.sum()
    return density


def sum_pool(density, k: int) -> np.ndarray:
    """Non-overlapping k x k block sums; preserves the map total."""
    arr = np.asarray(density, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"density must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    if k < 1 or h % k or w % k:
        raise ValueError(f"dims {arr.shape} not divisible by block size {k}")
    return arr.reshape(h // k, k, w // k, k).sum(axis=(1, 3))
