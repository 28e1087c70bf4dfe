"""Differentiable surrogate over transform candidates.

A small encoder/predictor/decoder is fit to (candidate vector, normalized
reward) pairs; new candidates come from gradient ascent on the predicted
reward in the 16-dim latent space, decoded back to transform parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import transforms
from .autodiff import Tensor
from .util import TrainingDiverged, substream

MAX_HALVINGS = 5
DEDUP_TOL = 0.01
# probe scale around the incumbent: floor keeps probes above the dedup
# tolerance, cap keeps them local even when the pool is still spread out
JITTER_FLOOR = 0.02
JITTER_CAP = 0.25


@dataclass
class CandidateRecord:
    """One validated transform candidate: the controller's training example."""
    spec: transforms.TransformSpec
    vec: np.ndarray
    reward: float
    reward_norm: float = float("nan")
    round_idx: int = 0
    cand_idx: int = 0
    status: str = "ok"
    report: dict | None = field(default=None, repr=False)


def normalize_rewards(raw) -> np.ndarray:
    """Min-max map of raw rewards onto [0, 1]; constant pools map to 0.5."""
    r = np.asarray(raw, dtype=np.float64).reshape(-1)
    lo, hi = r.min(), r.max()
    if hi - lo == 0:
        return np.full(r.shape, 0.5)
    return (r - lo) / (hi - lo)


def controller_loss(d, d_hat, p: float, p_hat: float) -> float:
    """Reconstruction plus reward-prediction error for one candidate."""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    d_hat = np.asarray(d_hat, dtype=np.float64).reshape(-1)
    return float(((d - d_hat) ** 2).sum() + (p - p_hat) ** 2)


class Controller:
    """Encoder 3->hidden (tanh), predictor hidden->1 and decoder hidden->3
    (both sigmoid).  Weights live as float64 arrays keyed by name."""

    def __init__(self, hidden: int = 16, seed: int = 0):
        rng = substream(seed, "controller")
        self.hidden = hidden
        self.weights = {
            "enc.w": rng.normal(0.0, np.sqrt(2.0 / (3 + hidden)), (3, hidden)),
            "enc.b": np.zeros(hidden),
            "pred.w": rng.normal(0.0, np.sqrt(2.0 / (hidden + 1)), (hidden, 1)),
            "pred.b": np.zeros(1),
            "dec.w": rng.normal(0.0, np.sqrt(2.0 / (hidden + 3)), (hidden, 3)),
            "dec.b": np.zeros(3),
        }
        self._opt = None

    # ------------------------------------------------------------ forward

    def _graph(self, t: dict, x: Tensor):
        h = ad.tanh(ad.add(ad.matmul(x, t["enc.w"]), t["enc.b"]))
        p = ad.sigmoid(ad.add(ad.matmul(h, t["pred.w"]), t["pred.b"]))
        d = ad.sigmoid(ad.add(ad.matmul(h, t["dec.w"]), t["dec.b"]))
        return h, p, d

    def _lift(self) -> dict:
        return {k: Tensor(v) for k, v in self.weights.items()}

    def encode(self, d) -> np.ndarray:
        v = np.asarray(d, dtype=np.float64).reshape(-1)
        if v.shape != (3,) or v.min() < 0.0 or v.max() > 1.0:
            raise ValueError(f"candidate vector must lie in [0,1]^3, got {d}")
        t = self._lift()
        h = ad.tanh(ad.add(ad.matmul(Tensor(v[None]), t["enc.w"]), t["enc.b"]))
        return h.data[0]

    def predict(self, hidden) -> float:
        h = np.asarray(hidden, dtype=np.float64).reshape(1, -1)
        t = self._lift()
        p = ad.sigmoid(ad.add(ad.matmul(Tensor(h), t["pred.w"]), t["pred.b"]))
        return float(p.data[0, 0])

    def decode(self, hidden) -> np.ndarray:
        h = np.asarray(hidden, dtype=np.float64).reshape(1, -1)
        t = self._lift()
        d = ad.sigmoid(ad.add(ad.matmul(Tensor(h), t["dec.w"]), t["dec.b"]))
        return d.data[0]

    def predict_vec(self, d) -> float:
        return self.predict(self.encode(d))

    # ----------------------------------------------------------- training

    def fit_loss(self, t: dict, x: np.ndarray, p: np.ndarray) -> Tensor:
        """Summed reconstruction + prediction loss over the pool as a graph."""
        xt = Tensor(x)
        _, p_hat, d_hat = self._graph(t, xt)
        rec = ad.tsum(ad.square(ad.sub(d_hat, xt)))
        pred = ad.tsum(ad.square(ad.sub(p_hat, Tensor(p.reshape(-1, 1)))))
        return ad.add(rec, pred)

    def fit(self, vecs, rewards_norm, steps: int, lr: float) -> list:
        """Full-batch training; returns the per-step loss history."""
        x = np.asarray(vecs, dtype=np.float64).reshape(-1, 3)
        p = np.asarray(rewards_norm, dtype=np.float64).reshape(-1)
        if x.shape[0] != p.shape[0]:
            raise ValueError("vector/reward count mismatch")
        if self._opt is None:
            self._opt = ad.AdamState(self.weights)
        history = []
        for step in range(steps):
            t = self._lift()
            loss = self.fit_loss(t, x, p)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"controller loss non-finite at step {step}")
            loss.backward()
            grads = {k: t[k].grad for k in self.weights if t[k].grad is not None}
            ad.adam_step(self.weights, grads, self._opt, lr, beta1=0.9)
            history.append(float(loss.data))
        return history

    def pool_loss(self, vecs, rewards_norm) -> float:
        x = np.asarray(vecs, dtype=np.float64).reshape(-1, 3)
        p = np.asarray(rewards_norm, dtype=np.float64).reshape(-1)
        return float(self.fit_loss(self._lift(), x, p).data)

    # ------------------------------------------------------------- ascent

    def _hidden_grad(self, hidden: np.ndarray) -> np.ndarray:
        t = self._lift()
        h = Tensor(hidden.reshape(1, -1))
        p = ad.sigmoid(ad.add(ad.matmul(h, t["pred.w"]), t["pred.b"]))
        ad.tsum(p).backward()
        return h.grad[0]

    def ascend(self, d, eta: float, ascent_steps: int) -> np.ndarray:
        """Latent gradient ascent on predicted reward; halves the step (at
        most MAX_HALVINGS times) whenever the prediction would decrease."""
        h = self.encode(d)
        for _ in range(ascent_steps):
            g = self._hidden_grad(h)
            base = self.predict(h)
            step = eta
            for _ in range(MAX_HALVINGS + 1):
                trial = h + step * g
                if self.predict(trial) >= base:
                    h = trial
                    break
                step *= 0.5
        return h


def train_controller(ctrl: Controller, pool: list, steps: int, lr: float) -> list:
    """Normalize the pool's rewards in place and fit the controller on it."""
    if len(pool) < 2:
        raise ValueError("controller training needs at least 2 candidates")
    norm = normalize_rewards([r.reward for r in pool])
    for rec, p in zip(pool, norm):
        rec.reward_norm = float(p)
    vecs = np.stack([r.vec for r in pool])
    return ctrl.fit(vecs, norm, steps, lr)


def update_candidates(ctrl: Controller, pool: list, eta: float, ascent_steps: int,
                      rng: np.random.Generator, n_out: int | None = None,
                      theta_max: float = 30.0, scale_min: float = 0.05) -> list:
    """Next candidate set from the current pool.

    The top half by reward is ascended in latent space and decoded;
    near-duplicates of existing candidates are replaced by random specs.
    The other half exploits the incumbent: the best candidate is kept as
    is, and the remaining slots are Gaussian probes around it at halving
    scales, sized by the top half's own per-coordinate spread.  Fresh
    exploration comes from the random initial pool and from the duplicate
    replacements, so no slot is spent on uniform draws here.
    """
    n_out = len(pool) if n_out is None else n_out
    ranked = sorted(pool, key=lambda r: r.reward, reverse=True)
    top = ranked[:min(n_out // 2, len(ranked))]
    seen = [r.vec for r in pool]
    out = []

    def emit(vec: np.ndarray) -> None:
        dup = any(np.max(np.abs(vec - v)) < DEDUP_TOL for v in seen)
        spec = (transforms.random_spec(rng, theta_max, scale_min) if dup
                else transforms.vec_to_spec(vec, theta_max, scale_min))
        out.append(spec)
        seen.append(transforms.spec_to_vec(spec, theta_max, scale_min))

    for rec in top:
        emit(ctrl.decode(ctrl.ascend(rec.vec, eta, ascent_steps)))
    best = ranked[0]
    sig = np.clip(np.std([r.vec for r in top], axis=0), JITTER_FLOOR, JITTER_CAP)
    if len(out) < n_out:
        # incumbent survives verbatim so the next round can still rank it
        out.append(transforms.vec_to_spec(best.vec, theta_max, scale_min))
    # probes skip the duplicate check: sitting close to the incumbent is
    # their whole point, and the finest scales sit below DEDUP_TOL
    k = 0
    while len(out) < n_out:
        probe = np.clip(best.vec + rng.normal(0.0, sig / 2.0 ** k), 0.0, 1.0)
        out.append(transforms.vec_to_spec(probe, theta_max, scale_min))
        k += 1
    return out
