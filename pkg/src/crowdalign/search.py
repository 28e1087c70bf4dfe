"""Round-based search orchestration: pretrain, per-candidate fine-tune and
validate, controller refresh, candidate update, final selection, retraining.

Every stochastic choice draws from a named substream of the root seed, so a
whole search is reproducible bit for bit.  Candidates within a round can run
in worker processes; the controller phase is a serial barrier.
"""
from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field, replace

import numpy as np

from . import adain, network, transforms
from .controller import CandidateRecord, Controller, train_controller, update_candidates
from .network import ModelParams, TrainHyper
from .util import SearchRoundFailed, TrainingDiverged, child_seed, substream

MIN_CONTROLLER_POOL = 4


@dataclass(frozen=True)
class SearchConfig:
    """Budgets, search-space bounds, and nested training hyperparameters."""
    n_d: int = 8
    rounds: int = 3
    pretrain_steps: int = 300
    cand_steps: int = 120
    final_steps: int = 400
    n_pairs: int = 32
    eta: float = 0.5
    ascent_steps: int = 3
    controller_steps: int = 2000
    controller_lr: float = 0.05
    controller_hidden: int = 16
    theta_max: float = 30.0
    scale_min: float = 0.05
    p_s: float = 0.5
    p_pt: float = 0.5
    sigma: float = 4.0
    kernel: int = 15
    channels: int = 8
    disc_hidden: int = 16
    seed: int = 0
    threads: int = 1
    hyper: TrainHyper = field(default_factory=TrainHyper)

    def validate(self) -> "SearchConfig":
        if self.n_d < 1 or self.rounds < 1:
            raise ValueError("n_d and rounds must be at least 1")
        for name in ("pretrain_steps", "cand_steps", "final_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be at least 1")
        if not 0 < self.scale_min < 1:
            raise ValueError("scale_min must lie in (0, 1)")
        return self


def pretrain_source(source, cfg: SearchConfig) -> ModelParams:
    """Source-only baseline network trained with the density loss alone."""
    p0 = ModelParams.init(child_seed(cfg.seed, "net-init"),
                          cfg.channels, cfg.disc_hidden)
    hyper = replace(cfg.hyper, lam=0.0, seed=child_seed(cfg.seed, "pretrain"))
    return network.train(p0, source, None, cfg.pretrain_steps, hyper)


def _eval_candidate(g_hat: ModelParams, source, target, spec, cfg: SearchConfig,
                    round_idx: int, k: int):
    """Train a clone of g_hat on the candidate's S+ and score it label-free.

    The tree-assignment, fine-tune, and validation-pairing seeds are shared by
    every candidate of the whole search: common random numbers turn reward
    differences between candidates into paired comparisons, which is what the
    cross-round argmax in run_search consumes.
    """
    vec = transforms.spec_to_vec(spec, cfg.theta_max, cfg.scale_min)
    try:
        s_plus = transforms.apply_transform(
            source, spec, child_seed(cfg.seed, "tree"),
            cfg.theta_max, cfg.sigma, cfg.kernel, cfg.p_s, cfg.p_pt)
        hyper = replace(cfg.hyper, seed=child_seed(cfg.seed, "cand-train"))
        params = network.train(g_hat.clone(), s_plus, target, cfg.cand_steps, hyper)
        report = adain.validation_reward(params, source, target, cfg.n_pairs,
                                         child_seed(cfg.seed, "pairing"))
    except (TrainingDiverged, FloatingPointError) as exc:
        rec = CandidateRecord(spec, vec, float("-inf"), round_idx=round_idx,
                              cand_idx=k, status=f"failed: {exc}")
        return rec, None
    rec = CandidateRecord(spec, vec, float(report["reward"]), round_idx=round_idx,
                          cand_idx=k, status="ok", report=report)
    return rec, params


_WORKER_CTX: dict = {}


def _candidate_job(args):
    round_idx, k, spec = args
    c = _WORKER_CTX
    return _eval_candidate(c["g_hat"], c["source"], c["target"], spec,
                           c["cfg"], round_idx, k)


def _spec_key(spec: transforms.TransformSpec) -> tuple:
    return (spec.p_g, spec.scale, spec.angle_deg)


def search_round(g_hat: ModelParams, source, target, specs: list,
                 ctrl: Controller, cfg: SearchConfig, round_idx: int,
                 ckpt_sink=None, cache: dict | None = None):
    """One search round over |specs| candidates.

    Returns (next specs, reward array, records).  Failed candidates are
    recorded and skipped; the round fails only if every candidate fails.
    When fewer than MIN_CONTROLLER_POOL candidates succeeded, the controller
    phase is skipped and the next pool is drawn at random.

    Candidate evaluation is deterministic in the spec (all seeds are shared
    across candidates), so a cache dict passed by the caller lets a spec kept
    from an earlier round reuse its reward instead of retraining.
    """
    jobs = [(round_idx, k, spec) for k, spec in enumerate(specs)]
    if cache is None:
        cache = {}
    todo = [j for j in jobs if _spec_key(j[2]) not in cache]
    if cfg.threads > 1:
        _WORKER_CTX.update(g_hat=g_hat, source=source, target=target, cfg=cfg)
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(min(cfg.threads, max(len(todo), 1))) as pool:
            results = pool.map(_candidate_job, todo)
        _WORKER_CTX.clear()
    else:
        results = [_candidate_job_serial(g_hat, source, target, cfg, j) for j in todo]
    for got, (_, _, spec) in zip(results, todo):
        cache[_spec_key(spec)] = got
    records = []
    for _, k, spec in jobs:
        rec0, params = cache[_spec_key(spec)]
        rec = replace(rec0, round_idx=round_idx, cand_idx=k)
        records.append(rec)
        if rec.status == "ok" and ckpt_sink is not None and params is not None:
            ckpt_sink(round_idx, k, params)
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise SearchRoundFailed(f"round {round_idx}: all {len(specs)} candidates failed")
    refill_rng = substream(cfg.seed, "refill", round_idx)
    if len(ok) >= MIN_CONTROLLER_POOL:
        train_controller(ctrl, ok, cfg.controller_steps, cfg.controller_lr)
        next_specs = update_candidates(ctrl, ok, cfg.eta, cfg.ascent_steps,
                                       refill_rng, n_out=cfg.n_d,
                                       theta_max=cfg.theta_max,
                                       scale_min=cfg.scale_min)
    else:
        next_specs = [transforms.random_spec(refill_rng, cfg.theta_max, cfg.scale_min)
                      for _ in range(cfg.n_d)]
    rewards = np.array([r.reward for r in records])
    return next_specs, rewards, records


def _candidate_job_serial(g_hat, source, target, cfg, job):
    round_idx, k, spec = job
    return _eval_candidate(g_hat, source, target, spec, cfg, round_idx, k)


def _spec_obj(spec: transforms.TransformSpec) -> dict:
    return {"p_g": spec.p_g, "scale": spec.scale, "angle_deg": spec.angle_deg}


def build_trace(cfg: SearchConfig, records: list) -> dict:
    """Deterministic search trace; wall-clock timing stays out of artifacts."""
    rounds: dict = {}
    for rec in records:
        entry = {
            "cand": rec.cand_idx,
            "spec": _spec_obj(rec.spec),
            "status": rec.status,
            "reward": rec.reward if np.isfinite(rec.reward) else None,
        }
        if rec.report is not None:
            entry["validation"] = rec.report
        rounds.setdefault(rec.round_idx, []).append(entry)
    ok = [r for r in records if r.status == "ok"]
    best = max(ok, key=lambda r: r.reward)
    return {
        "budget": {
            "n_d": cfg.n_d, "rounds": cfg.rounds,
            "pretrain_steps": cfg.pretrain_steps, "cand_steps": cfg.cand_steps,
            "final_steps": cfg.final_steps, "n_pairs": cfg.n_pairs,
        },
        "seed": cfg.seed,
        "rounds": [{"round": r, "candidates": rounds[r]} for r in sorted(rounds)],
        "best": {"round": best.round_idx, "cand": best.cand_idx,
                 "spec": _spec_obj(best.spec), "reward": best.reward},
    }


def run_search(source, target, cfg: SearchConfig, g_hat: ModelParams | None = None,
               ckpt_sink=None):
    """Full multi-round search; returns (best spec, trace dict).

    The best candidate is the reward argmax over every validated candidate
    from every round, matching the trace's best pointer by construction.
    """
    cfg.validate()
    if g_hat is None:
        g_hat = pretrain_source(source, cfg)
    digest_before = g_hat.digest()
    rng = substream(cfg.seed, "cand-init")
    specs = [transforms.random_spec(rng, cfg.theta_max, cfg.scale_min)
             for _ in range(cfg.n_d)]
    ctrl = Controller(cfg.controller_hidden, seed=child_seed(cfg.seed, "surrogate"))
    all_records: list = []
    cache: dict = {}
    for round_idx in range(cfg.rounds):
        specs, _, records = search_round(g_hat, source, target, specs, ctrl,
                                         cfg, round_idx, ckpt_sink, cache)
        all_records.extend(records)
    if g_hat.digest() != digest_before:
        raise RuntimeError("pretrained baseline was mutated during the search")
    trace = build_trace(cfg, all_records)
    best = trace["best"]
    best_spec = transforms.TransformSpec(**best["spec"])
    return best_spec, trace


def final_train(source, best: transforms.TransformSpec, target, cfg: SearchConfig,
                lam: float | None = None, log_hook=None) -> ModelParams:
    """Retrain from a fresh initialization on the selected S+ and the target."""
    s_plus = transforms.apply_transform(source, best,
                                        child_seed(cfg.seed, "final-tree"),
                                        cfg.theta_max, cfg.sigma, cfg.kernel,
                                        cfg.p_s, cfg.p_pt)
    p0 = ModelParams.init(child_seed(cfg.seed, "final-init"),
                          cfg.channels, cfg.disc_hidden)
    hyper = replace(cfg.hyper, seed=child_seed(cfg.seed, "final-train"))
    if lam is not None:
        hyper = replace(hyper, lam=lam)
    return network.train(p0, s_plus, target, cfg.final_steps, hyper,
                         log_hook=log_hook)
