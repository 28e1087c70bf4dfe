"""Run configuration: flat JSON with dotted namespaced keys, strict checking.

Unknown keys are rejected (silent hyperparameter typos are the classic
reproduction killer); missing keys take the documented defaults below.
"""
from __future__ import annotations

import json

from .network import TrainHyper
from .search import SearchConfig
from .synth import DomainShift, SceneConfig
from .util import ConfigError, child_seed

# key -> (default, type tag); tags: int, float, bool, grid
DEFAULTS = {
    "seed": (0, "int"),
    "threads": (1, "int"),
    "data.n_source": (200, "int"),
    "data.n_target": (200, "int"),
    "data.height": (64, "int"),
    "data.width": (96, "int"),
    "data.poisson_mean": (10.0, "float"),
    "data.head_radius": (4.0, "float"),
    "data.shift_p_g": (0.8, "float"),
    "data.shift_scale": (0.5, "float"),
    "data.shift_angle_deg": (10.0, "float"),
    "data.noise_sigma": (0.02, "float"),
    "imaging.sigma": (4.0, "float"),
    "imaging.kernel": (15, "int"),
    "tree.p_s": (0.5, "float"),
    "tree.p_pt": (0.5, "float"),
    "tree.theta_max": (30.0, "float"),
    "tree.scale_min": (0.05, "float"),
    "net.channels": (8, "int"),
    "net.disc_hidden": (16, "int"),
    "loss.th": (0.005, "float"),
    "loss.grid": ([16, 16], "grid"),
    "loss.lambda": (1.0, "float"),
    "loss.grl_factor": (0.01, "float"),
    "loss.cell_mean": (True, "bool"),
    "train.lr": (0.001, "float"),
    "train.batch_pairs": (4, "int"),
    "train.beta2": (0.999, "float"),
    "train.eps": (1e-8, "float"),
    "search.n_d": (8, "int"),
    "search.rounds": (3, "int"),
    "search.pretrain_steps": (300, "int"),
    "search.cand_steps": (120, "int"),
    "search.final_steps": (400, "int"),
    "search.n_pairs": (32, "int"),
    "search.eta": (0.5, "float"),
    "search.ascent_steps": (3, "int"),
    "search.save_candidates": (False, "bool"),
    "controller.hidden": (16, "int"),
    "controller.steps": (2000, "int"),
    "controller.lr": (0.05, "float"),
}


def _coerce(key: str, value, tag: str):
    if tag == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be a boolean, got {value!r}")
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if tag == "grid":
        if (not isinstance(value, list) or len(value) != 2
                or any(isinstance(v, bool) or not isinstance(v, int) or v < 1
                       for v in value)):
            raise ConfigError(f"config key '{key}' must be a pair of positive "
                              f"integers, got {value!r}")
        return list(value)
    raise AssertionError(tag)


def default_config() -> dict:
    return {k: (list(v) if isinstance(v, list) else v) for k, (v, _) in DEFAULTS.items()}


def load_config(path: str | None) -> dict:
    """Defaults overlaid with the JSON file at path (if given), validated."""
    cfg = default_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for key, value in user.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            cfg[key] = _coerce(key, value, DEFAULTS[key][1])
    _validate_ranges(cfg)
    return cfg


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _validate_ranges(cfg: dict) -> None:
    _require(cfg["threads"] >= 1, "'threads' must be at least 1")
    _require(cfg["data.n_source"] >= 1 and cfg["data.n_target"] >= 1,
             "'data.n_source' and 'data.n_target' must be at least 1")
    _require(cfg["data.height"] % 16 == 0 and cfg["data.width"] % 16 == 0,
             "'data.height' and 'data.width' must be divisible by 16")
    _require(cfg["data.poisson_mean"] > 0, "'data.poisson_mean' must be positive")
    _require(cfg["data.head_radius"] > 0, "'data.head_radius' must be positive")
    _require(0.0 <= cfg["data.shift_p_g"] <= 1.0,
             "'data.shift_p_g' must lie in [0, 1]")
    _require(0.0 < cfg["data.shift_scale"] <= 1.0,
             "'data.shift_scale' must lie in (0, 1]")
    _require(0.0 <= cfg["data.shift_angle_deg"] <= cfg["tree.theta_max"],
             "'data.shift_angle_deg' must lie in [0, tree.theta_max]")
    _require(cfg["data.noise_sigma"] >= 0, "'data.noise_sigma' must be nonnegative")
    _require(cfg["imaging.sigma"] > 0, "'imaging.sigma' must be positive")
    _require(cfg["imaging.kernel"] >= 1 and cfg["imaging.kernel"] % 2 == 1,
             "'imaging.kernel' must be odd and positive")
    for key in ("tree.p_s", "tree.p_pt"):
        _require(0.0 <= cfg[key] <= 1.0, f"'{key}' must lie in [0, 1]")
    _require(cfg["tree.theta_max"] > 0, "'tree.theta_max' must be positive")
    _require(0.0 < cfg["tree.scale_min"] < 1.0, "'tree.scale_min' must lie in (0, 1)")
    _require(cfg["net.channels"] >= 1 and cfg["net.disc_hidden"] >= 1,
             "network widths must be at least 1")
    _require(cfg["loss.th"] >= 0, "'loss.th' must be nonnegative")
    gh, gw = cfg["loss.grid"]
    _require(gh % 4 == 0 and gw % 4 == 0,
             "'loss.grid' entries must be divisible by the feature stride 4")
    _require(cfg["data.height"] % gh == 0 and cfg["data.width"] % gw == 0,
             "'loss.grid' must divide the image dims")
    _require(cfg["loss.lambda"] >= 0, "'loss.lambda' must be nonnegative")
    _require(cfg["loss.grl_factor"] > 0, "'loss.grl_factor' must be positive")
    _require(cfg["train.lr"] >= 0, "'train.lr' must be nonnegative")
    _require(cfg["train.batch_pairs"] >= 1, "'train.batch_pairs' must be at least 1")
    _require(0.0 < cfg["train.beta2"] < 1.0, "'train.beta2' must lie in (0, 1)")
    _require(cfg["train.eps"] > 0, "'train.eps' must be positive")
    _require(cfg["search.n_d"] >= 1, "'search.n_d' must be at least 1")
    _require(cfg["search.rounds"] >= 1, "'search.rounds' must be at least 1")
    for key in ("search.pretrain_steps", "search.cand_steps", "search.final_steps"):
        _require(cfg[key] >= 1, f"'{key}' must be at least 1")
    _require(cfg["search.n_pairs"] >= 1, "'search.n_pairs' must be at least 1")
    _require(cfg["search.eta"] >= 0, "'search.eta' must be nonnegative")
    _require(cfg["search.ascent_steps"] >= 0,
             "'search.ascent_steps' must be nonnegative")
    _require(cfg["controller.hidden"] >= 1, "'controller.hidden' must be at least 1")
    _require(cfg["controller.steps"] >= 1, "'controller.steps' must be at least 1")
    _require(cfg["controller.lr"] > 0, "'controller.lr' must be positive")


def scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig(height=cfg["data.height"], width=cfg["data.width"],
                       poisson_mean=cfg["data.poisson_mean"],
                       head_radius=cfg["data.head_radius"],
                       seed=child_seed(cfg["seed"], "data"),
                       sigma=cfg["imaging.sigma"], kernel=cfg["imaging.kernel"])


def domain_shift(cfg: dict) -> DomainShift:
    return DomainShift(p_g=cfg["data.shift_p_g"], scale=cfg["data.shift_scale"],
                       angle_deg=cfg["data.shift_angle_deg"],
                       noise_sigma=cfg["data.noise_sigma"])


def train_hyper(cfg: dict) -> TrainHyper:
    return TrainHyper(lr=cfg["train.lr"], batch_pairs=cfg["train.batch_pairs"],
                      lam=cfg["loss.lambda"], grl_factor=cfg["loss.grl_factor"],
                      th=cfg["loss.th"], grid=tuple(cfg["loss.grid"]),
                      cell_mean=cfg["loss.cell_mean"], beta2=cfg["train.beta2"],
                      eps=cfg["train.eps"])


def search_config(cfg: dict) -> SearchConfig:
    return SearchConfig(
        n_d=cfg["search.n_d"], rounds=cfg["search.rounds"],
        pretrain_steps=cfg["search.pretrain_steps"],
        cand_steps=cfg["search.cand_steps"], final_steps=cfg["search.final_steps"],
        n_pairs=cfg["search.n_pairs"], eta=cfg["search.eta"],
        ascent_steps=cfg["search.ascent_steps"],
        controller_steps=cfg["controller.steps"], controller_lr=cfg["controller.lr"],
        controller_hidden=cfg["controller.hidden"],
        theta_max=cfg["tree.theta_max"], scale_min=cfg["tree.scale_min"],
        p_s=cfg["tree.p_s"], p_pt=cfg["tree.p_pt"],
        sigma=cfg["imaging.sigma"], kernel=cfg["imaging.kernel"],
        channels=cfg["net.channels"], disc_hidden=cfg["net.disc_hidden"],
        seed=cfg["seed"], threads=cfg["threads"], hyper=train_hyper(cfg))
