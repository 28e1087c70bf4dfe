"""Label-free candidate validation via channel-statistics mixing.

A validation feature map keeps source content but takes on target style:
each channel of F_S is standardized with its own mean/std and re-expressed
with the target channel's statistics.  The density estimator is then scored
on these target-like features against the known source counts.
"""
from __future__ import annotations

import numpy as np

from . import network
from .autodiff import Tensor
from .util import substream

SIGMA_GUARD = 1e-6


def channel_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over the spatial grid."""
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected (C, h, w) features, got {arr.shape}")
    mu = arr.mean(axis=(1, 2))
    sigma = arr.std(axis=(1, 2))
    return mu, sigma


def adain_mix(f_s, f_t) -> np.ndarray:
    """Source content re-styled with target channel statistics."""
    a = np.asarray(f_s, dtype=np.float64)
    b = np.asarray(f_t, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mu_s, sig_s = channel_stats(a)
    mu_t, sig_t = channel_stats(b)
    sig_s = np.maximum(sig_s, SIGMA_GUARD)
    norm = (a - mu_s[:, None, None]) / sig_s[:, None, None]
    return mu_t[:, None, None] + sig_t[:, None, None] * norm


def validation_reward(p: network.ModelParams, source, target, n_pairs: int,
                      seed: int) -> dict:
    """Score params on AdaIN-mixed features over seeded source/target pairs.

    Returns {"pairs": [{"src", "tgt", "abs_err"}...], "reward": -mean abs
    count error}.  Higher is better; a perfect estimator on identical domains
    scores 0.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    if not source.labeled:
        raise ValueError("validation needs labeled source data")
    rng = substream(seed, "pairing")
    src_idx = rng.integers(0, len(source), size=n_pairs)
    tgt_idx = rng.integers(0, len(target), size=n_pairs)
    t = network._lift(p.as_f64())
    xs = Tensor(np.stack([source.images[i] for i in src_idx]))
    xt = Tensor(np.stack([target.images[j] for j in tgt_idx]))
    f_s = network.extractor_graph(t, xs).data
    f_t = network.extractor_graph(t, xt).data
    mixed = np.stack([adain_mix(f_s[k], f_t[k]) for k in range(n_pairs)])
    pred = network.estimator_graph(t, Tensor(mixed)).data
    pairs = []
    errs = np.empty(n_pairs)
    for k in range(n_pairs):
        gt_count = float(source.densities[int(src_idx[k])].sum())
        errs[k] = abs(float(pred[k].sum()) - gt_count)
        pairs.append({"src": int(src_idx[k]), "tgt": int(tgt_idx[k]),
                      "abs_err": float(errs[k])})
    return {"pairs": pairs, "reward": float(-errs.mean())}
