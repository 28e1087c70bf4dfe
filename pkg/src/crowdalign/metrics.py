"""Counting metrics and rank diagnostics."""
from __future__ import annotations

import numpy as np


def count(density) -> float:
    """Total mass of a density map."""
    return float(np.asarray(density, dtype=np.float64).sum())


def _check_lengths(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(preds, dtype=np.float64).reshape(-1)
    b = np.asarray(gts, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("need at least one prediction")
    return a, b


def mae(preds, gts) -> float:
    """Mean absolute count error."""
    a, b = _check_lengths(preds, gts)
    return float(np.abs(a - b).mean())


def mse(preds, gts) -> float:
    """Root of the mean squared count error (the conventional name in the
    counting literature, despite being a root-mean-square)."""
    a, b = _check_lengths(preds, gts)
    return float(np.sqrt(((a - b) ** 2).mean()))


def eval_result(preds, gts) -> dict:
    """EvalResult payload: n, mae, mse, and per-image absolute errors."""
    a, b = _check_lengths(preds, gts)
    return {
        "n": int(a.size),
        "mae": mae(a, b),
        "mse": mse(a, b),
        "per_image": [float(e) for e in np.abs(a - b)],
    }


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    b = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.size != b.size or a.size < 2:
        raise ValueError("need two equal-length sequences of size >= 2")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    if denom == 0:
        raise ValueError("rank correlation undefined for constant input")
    return float((ra * rb).sum() / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sorted_v = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks
