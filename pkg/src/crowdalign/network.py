"""Trainable pipeline: feature extractor, density estimator, fg/bg patch
discriminators behind a gradient-reversal layer, and the joint training loop.

The extractor downsamples by 4 (two conv+ReLU+avgpool stages), so density
supervision happens at quarter resolution against sum-pooled ground truth,
which preserves counts.  Parameters are stored float32 for bit-exact
serialization and lifted to float64 for all computation.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .util import TrainingDiverged, substream

STRIDE = 4  # total spatial downsampling of the extractor
PROB_CLAMP = 1e-7
CKPT_MAGIC = b"CADM"
CKPT_VERSION = 1


def param_specs(channels: int = 8, hidden: int = 16) -> list:
    """(name, shape, init std) for every tensor, in canonical order."""
    c, h = channels, hidden
    return [
        ("conv1.w", (c, 3, 3, 3), np.sqrt(2.0 / (3 * 9))),
        ("conv1.b", (c,), 0.0),
        ("conv2.w", (c, c, 3, 3), np.sqrt(2.0 / (c * 9))),
        ("conv2.b", (c,), 0.0),
        ("est.w", (1, c), 0.3),
        ("est.b", (1,), 0.0),
        ("disc_f.w1", (h, c), np.sqrt(2.0 / c)),
        ("disc_f.b1", (h,), 0.0),
        ("disc_f.w2", (1, h), np.sqrt(1.0 / h)),
        ("disc_f.b2", (1,), 0.0),
        ("disc_b.w1", (h, c), np.sqrt(2.0 / c)),
        ("disc_b.b1", (h,), 0.0),
        ("disc_b.w2", (1, h), np.sqrt(1.0 / h)),
        ("disc_b.b2", (1,), 0.0),
    ]


@dataclass
class ModelParams:
    """Named float32 tensors; clonable and bit-exactly serializable."""
    tensors: dict

    @classmethod
    def init(cls, seed: int, channels: int = 8, hidden: int = 16) -> "ModelParams":
        rng = substream(seed, "init")
        tensors = {}
        for name, shape, std in param_specs(channels, hidden):
            if std == 0.0:
                arr = np.zeros(shape, dtype=np.float64)
            else:
                arr = rng.normal(0.0, std, size=shape)
            tensors[name] = arr.astype(np.float32)
        # start the rate head near the typical per-cell mass instead of softplus(0)
        tensors["est.b"] = np.full((1,), -3.0, dtype=np.float32)
        return cls(tensors)

    def clone(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def as_f64(self) -> dict:
        return {k: v.astype(np.float64) for k, v in self.tensors.items()}

    @property
    def channels(self) -> int:
        return self.tensors["conv1.w"].shape[0]

    def to_bytes(self) -> bytes:
        out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(self.tensors))]
        for name, arr in self.tensors.items():
            nb = name.encode("utf-8")
            out.append(struct.pack("<I", len(nb)))
            out.append(nb)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(arr.astype("<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelParams":
        if blob[:4] != CKPT_MAGIC:
            raise ValueError("not a model checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            tensors[name] = arr.reshape(shape).astype(np.float32)
        return cls(tensors)

    def save(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "ModelParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


# ---------------------------------------------------------------- forward

def _lift(params64: dict) -> dict:
    return {k: Tensor(v) for k, v in params64.items()}


def extractor_graph(t: dict, x: Tensor) -> Tensor:
    h = ad.avgpool2d(ad.relu(ad.conv2d(x, t["conv1.w"], t["conv1.b"], pad=1)), 2)
    return ad.avgpool2d(ad.relu(ad.conv2d(h, t["conv2.w"], t["conv2.b"], pad=1)), 2)


def estimator_graph(t: dict, feats: Tensor) -> Tensor:
    return ad.softplus(ad.conv1x1(feats, t["est.w"], t["est.b"]))


def _head_graph(t: dict, pooled: Tensor, prefix: str) -> Tensor:
    h = ad.relu(ad.conv1x1(pooled, t[prefix + ".w1"], t[prefix + ".b1"]))
    return ad.sigmoid(ad.conv1x1(h, t[prefix + ".w2"], t[prefix + ".b2"]))


def discriminator_graph(t: dict, feats: Tensor, cell: tuple) -> tuple:
    """Foreground and background probability maps, one value per grid cell."""
    ch, cw = cell
    n, _, fh, fw = feats.data.shape
    if fh % ch or fw % cw:
        raise ValueError(f"feature dims ({fh}, {fw}) not divisible by cell ({ch}, {cw})")
    pooled = ad.avgpool2d(feats, ch, cw)
    o_f = ad.reshape(_head_graph(t, pooled, "disc_f"), (n, fh // ch, fw // cw))
    o_b = ad.reshape(_head_graph(t, pooled, "disc_b"), (n, fh // ch, fw // cw))
    return o_f, o_b


def feature_extract(p: ModelParams, img) -> np.ndarray:
    """Forward the extractor on one (3, H, W) image."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {arr.shape}")
    if arr.shape[1] % STRIDE or arr.shape[2] % STRIDE:
        raise ValueError(f"image dims {arr.shape[1:]} must be divisible by {STRIDE}")
    return extractor_graph(_lift(p.as_f64()), Tensor(arr[None])).data[0]


def estimate_density(p: ModelParams, feats) -> np.ndarray:
    """Quarter-resolution nonnegative density map from a (C, h, w) feature map."""
    arr = np.asarray(feats, dtype=np.float64)
    out = estimator_graph(_lift(p.as_f64()), Tensor(arr[None]))
    return out.data[0, 0]


def discriminate(p: ModelParams, feats, grid: tuple) -> tuple:
    """Per-cell fg/bg probabilities; grid is given in pixels of the input image."""
    gh, gw = grid
    if gh % STRIDE or gw % STRIDE:
        raise ValueError(f"grid {grid} must be divisible by the feature stride {STRIDE}")
    arr = np.asarray(feats, dtype=np.float64)
    o_f, o_b = discriminator_graph(_lift(p.as_f64()), Tensor(arr[None]),
                                   (gh // STRIDE, gw // STRIDE))
    return o_f.data[0], o_b.data[0]


def predict_counts(p: ModelParams, images, batch_size: int = 32) -> np.ndarray:
    """Predicted head count per image; touches only extractor and estimator."""
    t = _lift(p.as_f64())
    counts = []
    for lo in range(0, len(images), batch_size):
        x = Tensor(np.stack(images[lo:lo + batch_size]))
        pred = estimator_graph(t, extractor_graph(t, x))
        counts.extend(pred.data.sum(axis=(1, 2, 3)).tolist())
    return np.array(counts, dtype=np.float64)


# ----------------------------------------------------------------- losses

def density_loss(pred, gt) -> float:
    """Sum of squared per-cell differences."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum())


def block_sum(d: np.ndarray, gh: int, gw: int) -> np.ndarray:
    h, w = d.shape
    if h % gh or w % gw:
        raise ValueError(f"dims ({h}, {w}) not divisible by grid ({gh}, {gw})")
    return d.reshape(h // gh, gh, w // gw, gw).sum(axis=(1, 3))


def make_patch_mask(d, grid: tuple, th: float) -> np.ndarray:
    """Cell = 1 iff its block of the density map sums to more than th."""
    arr = np.asarray(d, dtype=np.float64)
    return (block_sum(arr, grid[0], grid[1]) > th).astype(np.uint8)


def _masked_term(mask: np.ndarray, neg_log: np.ndarray, cell_mean: bool) -> float:
    total = float((mask * neg_log).sum())
    if not cell_mean:
        return total
    active = float(mask.sum())
    return total / active if active > 0 else 0.0


def discriminator_loss(o_fs, o_bs, o_ft, o_bt, m_s, m_t,
                       cell_mean: bool = True) -> float:
    """Fine-grained adversarial loss over fg/bg cells of both domains.

    Source cells are labeled 0 and target cells 1; the foreground head sees
    fg cells, the background head the complement.  With cell_mean each of the
    four terms is averaged over its own active cells, otherwise raw sums.
    """
    m_s = np.asarray(m_s, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    c = lambda o: np.clip(np.asarray(o, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    l_f = (_masked_term(m_s, -np.log(1.0 - c(o_fs)), cell_mean)
           + _masked_term(m_t, -np.log(c(o_ft)), cell_mean))
    l_b = (_masked_term(1.0 - m_s, -np.log(1.0 - c(o_bs)), cell_mean)
           + _masked_term(1.0 - m_t, -np.log(c(o_bt)), cell_mean))
    return l_b + l_f


def total_loss(l_e: float, l_d: float, lam: float) -> float:
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return l_e + lam * l_d


# ------------------------------------------------------------ loss graphs

def _term_graph(mask: np.ndarray, neg_log: Tensor, cell_mean: bool) -> Tensor:
    total = ad.tsum(ad.mul(Tensor(mask), neg_log))
    if not cell_mean:
        return total
    active = float(mask.sum())
    return total * (1.0 / active) if active > 0 else Tensor(0.0)


def disc_loss_graph(o_fs, o_bs, o_ft, o_bt, m_s, m_t, cell_mean: bool) -> Tensor:
    m_s = np.asarray(m_s, dtype=np.float64)
    m_t = np.asarray(m_t, dtype=np.float64)
    lo, hi = PROB_CLAMP, 1 - PROB_CLAMP
    nl = lambda t: ad.neg(ad.log(t))
    one_minus = lambda t: ad.sub(Tensor(1.0), t)
    l_f = ad.add(_term_graph(m_s, nl(one_minus(ad.clip(o_fs, lo, hi))), cell_mean),
                 _term_graph(m_t, nl(ad.clip(o_ft, lo, hi)), cell_mean))
    l_b = ad.add(_term_graph(1.0 - m_s, nl(one_minus(ad.clip(o_bs, lo, hi))), cell_mean),
                 _term_graph(1.0 - m_t, nl(ad.clip(o_bt, lo, hi)), cell_mean))
    return ad.add(l_b, l_f)


@dataclass(frozen=True)
class TrainHyper:
    """Optimization and loss settings of the joint training loop."""
    lr: float = 1e-3
    batch_pairs: int = 4
    lam: float = 1.0
    grl_factor: float = 0.01
    th: float = 0.005
    grid: tuple = (16, 16)
    cell_mean: bool = True
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


def make_loss_builder(xs: np.ndarray, gt_quarter: np.ndarray, hyper: TrainHyper,
                      xt=None, m_s=None, m_t=None):
    """Builder mapping lifted params to the Eq.-5 scalar for fixed batches.

    Masks are fixed constants here, which keeps the function smooth for
    finite-difference checks.  Returns build(tensors) -> (loss, l_e, l_d).
    """
    n = xs.shape[0]
    cell = (hyper.grid[0] // STRIDE, hyper.grid[1] // STRIDE)

    def build(t):
        f_s = extractor_graph(t, Tensor(xs))
        pred = estimator_graph(t, f_s)
        l_e = ad.tsum(ad.square(ad.sub(pred, Tensor(gt_quarter)))) * (1.0 / n)
        if hyper.lam == 0 or xt is None:
            return l_e, l_e, Tensor(0.0)
        f_t = extractor_graph(t, Tensor(xt))
        o_fs, o_bs = discriminator_graph(t, ad.grl(f_s, hyper.grl_factor), cell)
        o_ft, o_bt = discriminator_graph(t, ad.grl(f_t, hyper.grl_factor), cell)
        l_d = disc_loss_graph(o_fs, o_bs, o_ft, o_bt, m_s, m_t, hyper.cell_mean)
        return ad.add(l_e, l_d * hyper.lam), l_e, l_d

    return build


def make_adversarial_fd_builder(p: ModelParams, xs: np.ndarray,
                                gt_quarter: np.ndarray, hyper: TrainHyper,
                                xt: np.ndarray, m_s, m_t):
    """Plain scalar objective matching the reversal-coupled training gradient.

    The gradient-reversal layer backpropagates the gradient of a two-player
    objective rather than of the forward loss, so finite differences must
    probe that objective directly: discriminator terms are evaluated on
    features frozen at p (weight +lam), the feature path on discriminator
    heads frozen at p (weight -grl_factor*lam).  At the base point p the true
    derivative of this scalar equals the training graph's backward output for
    every parameter.
    """
    n = xs.shape[0]
    cell = (hyper.grid[0] // STRIDE, hyper.grid[1] // STRIDE)
    base = p.as_f64()
    t0 = _lift(base)
    f_s0 = extractor_graph(t0, Tensor(xs)).data
    f_t0 = extractor_graph(t0, Tensor(xt)).data
    disc0 = {k: v for k, v in base.items() if k.startswith("disc")}

    def build(t):
        f_s = extractor_graph(t, Tensor(xs))
        pred = estimator_graph(t, f_s)
        l_e = ad.tsum(ad.square(ad.sub(pred, Tensor(gt_quarter)))) * (1.0 / n)
        # live heads, frozen features
        a_fs, a_bs = discriminator_graph(t, Tensor(f_s0), cell)
        a_ft, a_bt = discriminator_graph(t, Tensor(f_t0), cell)
        l_d_heads = disc_loss_graph(a_fs, a_bs, a_ft, a_bt, m_s, m_t, hyper.cell_mean)
        # frozen heads, live features
        tf = dict(t)
        tf.update({k: Tensor(v) for k, v in disc0.items()})
        f_t = extractor_graph(t, Tensor(xt))
        b_fs, b_bs = discriminator_graph(tf, f_s, cell)
        b_ft, b_bt = discriminator_graph(tf, f_t, cell)
        l_d_feat = disc_loss_graph(b_fs, b_bs, b_ft, b_bt, m_s, m_t, hyper.cell_mean)
        return ad.add(l_e, ad.add(l_d_heads * hyper.lam,
                                  l_d_feat * (-hyper.grl_factor * hyper.lam)))

    return build


def pseudo_masks(pred_quarter: np.ndarray, grid: tuple, th: float) -> np.ndarray:
    """Target fg masks from predicted quarter-resolution maps (one per image)."""
    cell = (grid[0] // STRIDE, grid[1] // STRIDE)
    return np.stack([make_patch_mask(m, cell, th) for m in pred_quarter])


def train(p0: ModelParams, source, target, budget: int, hyper: TrainHyper,
          log_hook=None) -> ModelParams:
    """Run budget joint steps of Eq. 5 on source/target batches.

    p0 is never mutated; the returned params are a trained clone.  Target may
    be None when hyper.lam == 0 (source-only pretraining).  Raises
    TrainingDiverged on non-finite losses or parameters.
    """
    if budget < 0:
        raise ValueError("budget must be nonnegative")
    if not source.labeled:
        raise ValueError("source dataset must be labeled")
    if hyper.lam > 0 and (target is None or len(target) == 0):
        raise ValueError("adversarial training requires a target dataset")
    from .imaging import sum_pool
    gt_q = [sum_pool(d, STRIDE)[None] for d in source.densities]
    masks_s = [make_patch_mask(d, hyper.grid, hyper.th) for d in source.densities]
    cell = (hyper.grid[0] // STRIDE, hyper.grid[1] // STRIDE)
    master = p0.as_f64()
    state = ad.AdamState(master)
    rng = substream(hyper.seed, "train")
    n_s = len(source)
    batch = min(hyper.batch_pairs, n_s)
    for step in range(budget):
        si = rng.integers(0, n_s, size=batch)
        t = _lift(master)
        xs = Tensor(np.stack([source.images[i] for i in si]))
        f_s = extractor_graph(t, xs)
        pred = estimator_graph(t, f_s)
        gt = Tensor(np.stack([gt_q[i] for i in si]))
        l_e = ad.tsum(ad.square(ad.sub(pred, gt))) * (1.0 / batch)
        if hyper.lam > 0:
            ti = rng.integers(0, len(target), size=batch)
            xt = Tensor(np.stack([target.images[i] for i in ti]))
            f_t = extractor_graph(t, xt)
            # pseudo density maps from the live model define the target masks
            pred_t = estimator_graph(t, f_t)
            m_t = pseudo_masks(pred_t.data[:, 0], hyper.grid, hyper.th)
            m_s = np.stack([masks_s[i] for i in si])
            o_fs, o_bs = discriminator_graph(t, ad.grl(f_s, hyper.grl_factor), cell)
            o_ft, o_bt = discriminator_graph(t, ad.grl(f_t, hyper.grl_factor), cell)
            l_d = disc_loss_graph(o_fs, o_bs, o_ft, o_bt, m_s, m_t, hyper.cell_mean)
            loss = ad.add(l_e, l_d * hyper.lam)
        else:
            l_d = Tensor(0.0)
            loss = l_e
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        loss.backward()
        grads = {k: t[k].grad for k in master if t[k].grad is not None}
        ad.adam_step(master, grads, state, hyper.lr, hyper.beta2, hyper.eps)
        for name, w in master.items():
            if not np.all(np.isfinite(w)):
                raise TrainingDiverged(f"non-finite parameter {name} at step {step}")
        if log_hook is not None:
            log_hook(step, float(l_e.data), float(l_d.data), float(loss.data))
    return ModelParams({k: v.astype(np.float32) for k, v in master.items()})


def pretrain(p0: ModelParams, source, budget: int, hyper: TrainHyper) -> ModelParams:
    """Source-only training of extractor+estimator (lambda forced to 0)."""
    return train(p0, source, None, budget, replace(hyper, lam=0.0))


def grad_check(p: ModelParams, build, eps: float = 1e-4, fd_build=None) -> float:
    """Max relative error of analytic vs central-difference gradients.

    build maps lifted tensors to the scalar loss (tuples from
    make_loss_builder are accepted; the first element is used).  For graphs
    with gradient reversal, pass the matching adversarial objective as
    fd_build (see make_adversarial_fd_builder).
    """
    def scalar(t):
        out = build(t)
        return out[0] if isinstance(out, tuple) else out

    return ad.check_gradients(scalar, p.as_f64(), eps, fd_build=fd_build)
