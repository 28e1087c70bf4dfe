"""Batch command-line front-end; all pipeline state lives on disk.

Commands: gen-data, search, train, eval, report.  Exit codes: 0 success,
1 runtime failure, 2 config error.  Every command acquires an advisory lock
in the run directory, echoes its effective config there, and logs progress
lines (the only place timestamps appear) to stderr.
"""
from __future__ import annotations

import argparse
import glob
import json
import os
import re
import sys
import time

import numpy as np

from . import config as cfgmod
from . import data as datamod
from . import metrics, network, search, synth, transforms
from .util import ConfigError

LOCK_NAME = ".lock"
ABLATION_TAGS = ("noadapt", "dataonly", "featonly", "full")


def log(msg: str) -> None:
    stamp = time.strftime("%Y-%m-%d %H:%M:%S")
    print(f"[{stamp}] {msg}", file=sys.stderr)


class RunLock:
    """Advisory lock file guarding a run directory against concurrent writers."""

    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, LOCK_NAME)
        self.fd = None

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another command ({self.path}); "
                "remove the file if that command crashed") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            os.unlink(self.path)
        return False


def _write_json(path: str, obj) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(cfg: dict, run_dir: str, command: str) -> None:
    _write_json(os.path.join(run_dir, f"config_{command}.json"), cfg)


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("'--threads' must be at least 1")
        cfg["threads"] = args.threads
    return cfg


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    run_dir = args.out
    with RunLock(run_dir):
        _echo_config(cfg, run_dir, "gen-data")
        scene = cfgmod.scene_config(cfg)
        shift = cfgmod.domain_shift(cfg)
        log(f"generating {cfg['data.n_source']} source scenes")
        source = synth.gen_source(cfg["data.n_source"], scene)
        log(f"generating {cfg['data.n_target']} target scenes (hidden shift applied)")
        target, hidden = synth.gen_target(cfg["data.n_target"], scene, shift)
        base = os.path.join(run_dir, "data")
        datamod.save_dataset(source, os.path.join(base, "source"), labels=True)
        datamod.save_dataset(target, os.path.join(base, "target"), labels=False)
        datamod.save_points(hidden.points, os.path.join(base, "target_hidden"))
        manifest = {
            "n_source": cfg["data.n_source"],
            "n_target": cfg["data.n_target"],
            "scene": {"height": scene.height, "width": scene.width,
                      "poisson_mean": scene.poisson_mean,
                      "head_radius": scene.head_radius, "seed": scene.seed,
                      "sigma": scene.sigma, "kernel": scene.kernel},
            "shift": {"p_g": shift.p_g, "scale": shift.scale,
                      "angle_deg": shift.angle_deg,
                      "noise_sigma": shift.noise_sigma},
            "root_seed": cfg["seed"],
            "layout": {"source": "source/", "target": "target/",
                       "hidden_labels": "target_hidden/"},
        }
        _write_json(os.path.join(base, "manifest.json"), manifest)
        log(f"dataset written under {base}")
    return 0


def _load_datasets(run_dir: str, cfg: dict):
    base = os.path.join(run_dir, "data")
    source = datamod.load_dataset(os.path.join(base, "source"),
                                  cfg["imaging.sigma"], cfg["imaging.kernel"])
    if not source.labeled:
        raise RuntimeError(f"source dataset under {base} has no annotations")
    target = datamod.load_dataset(os.path.join(base, "target"),
                                  cfg["imaging.sigma"], cfg["imaging.kernel"])
    return source, target


def cmd_search(args) -> int:
    cfg = _load_cfg(args)
    run_dir = args.out
    with RunLock(run_dir):
        _echo_config(cfg, run_dir, "search")
        source, target = _load_datasets(run_dir, cfg)
        scfg = cfgmod.search_config(cfg)
        log(f"pretraining source-only baseline for {scfg.pretrain_steps} steps")
        g_hat = search.pretrain_source(source, scfg)
        model_dir = os.path.join(run_dir, "model")
        os.makedirs(model_dir, exist_ok=True)
        g_hat.save(os.path.join(model_dir, "pretrain.bin"))
        sink = None
        if cfg["search.save_candidates"]:
            def sink(round_idx, cand_idx, params):
                d = os.path.join(run_dir, "ckpt", f"round_{round_idx}")
                os.makedirs(d, exist_ok=True)
                params.save(os.path.join(d, f"cand_{cand_idx}.bin"))
        log(f"searching: {scfg.rounds} rounds x {scfg.n_d} candidates, "
            f"{scfg.cand_steps} steps each")
        best, trace = search.run_search(source, target, scfg, g_hat=g_hat,
                                        ckpt_sink=sink)
        _write_json(os.path.join(run_dir, "trace.json"), trace)
        with open(os.path.join(run_dir, "best_transform.json"), "w") as fh:
            fh.write(best.to_json())
            fh.write("\n")
        print(f"best transform: p_g={best.p_g:.4f} scale={best.scale:.4f} "
              f"angle_deg={best.angle_deg:.4f} (reward {trace['best']['reward']:.6f})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = args.out
    with RunLock(run_dir):
        _echo_config(cfg, run_dir, f"train_{args.tag}")
        source, target = _load_datasets(run_dir, cfg)
        try:
            with open(args.transform) as fh:
                spec = transforms.TransformSpec.from_json(fh.read())
        except OSError as exc:
            raise RuntimeError(f"cannot read transform file: {exc}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad transform file {args.transform}: {exc}") from exc
        spec.validate(cfg["tree.theta_max"])
        scfg = cfgmod.search_config(cfg)
        lam = args.lam if args.lam is not None else None
        if lam is not None and lam < 0:
            raise ConfigError("'--lam' must be nonnegative")
        model_dir = os.path.join(run_dir, "model")
        os.makedirs(model_dir, exist_ok=True)
        log_path = os.path.join(model_dir, f"{args.tag}_log.csv")
        eff_lam = scfg.hyper.lam if lam is None else lam
        log(f"training '{args.tag}' for {scfg.final_steps} steps "
            f"(lambda={eff_lam}, transform={args.transform})")
        with open(log_path, "w") as fh:
            fh.write("step,l_e,l_d,loss\n")
            hook = lambda s, le, ld, l: fh.write(f"{s},{le:.9g},{ld:.9g},{l:.9g}\n")
            params = search.final_train(source, spec, target, scfg, lam=lam,
                                        log_hook=hook)
        ckpt = os.path.join(model_dir, f"{args.tag}.bin")
        params.save(ckpt)
        print(f"checkpoint written: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    run_dir = args.out
    with RunLock(run_dir):
        tag = args.tag or os.path.splitext(os.path.basename(args.ckpt))[0]
        _echo_config(cfg, run_dir, f"eval_{tag}")
        params = network.ModelParams.load(args.ckpt)
        ds = datamod.load_dataset(args.data, cfg["imaging.sigma"],
                                  cfg["imaging.kernel"])
        if args.hidden_labels:
            pts = datamod.load_points(args.hidden_labels, len(ds))
            gts = np.array([len(p) for p in pts], dtype=np.float64)
        elif ds.labeled:
            gts = ds.counts()
        else:
            raise RuntimeError(
                f"dataset {args.data} is unlabeled; pass --hidden-labels DIR")
        log(f"evaluating {args.ckpt} on {len(ds)} images")
        preds = network.predict_counts(params, ds.images)
        result = metrics.eval_result(preds, gts)
        out_path = os.path.join(run_dir, "eval", f"{tag}.json")
        _write_json(out_path, result)
        print(f"n={result['n']} mae={result['mae']:.4f} mse={result['mse']:.4f} "
              f"-> {out_path}")
    return 0


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    run_dir = args.out
    with RunLock(run_dir):
        trace_path = os.path.join(run_dir, "trace.json")
        if not os.path.exists(trace_path):
            raise RuntimeError(f"missing search trace: {trace_path}")
        with open(trace_path) as fh:
            trace = json.load(fh)
        evals = {}
        missing = []
        for tag in ABLATION_TAGS:
            path = os.path.join(run_dir, "eval", f"{tag}.json")
            if not os.path.exists(path):
                missing.append(path)
                continue
            with open(path) as fh:
                evals[tag] = json.load(fh)
        if missing:
            raise RuntimeError("missing ablation eval files: " + ", ".join(missing))

        # candidate rewards keyed by (round, cand) for the fidelity join
        rewards = {}
        for rnd in trace["rounds"]:
            for c in rnd["candidates"]:
                if c["reward"] is not None:
                    rewards[(rnd["round"], c["cand"])] = (c["reward"], c["spec"])
        fid_rows = []
        pattern = re.compile(r"fidelity_r(\d+)_c(\d+)\.json$")
        for path in sorted(glob.glob(os.path.join(run_dir, "eval",
                                                  "fidelity_r*_c*.json"))):
            m = pattern.search(os.path.basename(path))
            if not m:
                continue
            key = (int(m.group(1)), int(m.group(2)))
            if key not in rewards:
                raise RuntimeError(f"{path} has no matching trace candidate")
            with open(path) as fh:
                true_mae = json.load(fh)["mae"]
            fid_rows.append((key[0], key[1], rewards[key][0], true_mae))

        abl_csv = os.path.join(run_dir, "report_ablation.csv")
        with open(abl_csv, "w") as fh:
            fh.write("arm,n,mae,mse\n")
            for tag in ABLATION_TAGS:
                e = evals[tag]
                fh.write(f"{tag},{e['n']},{_fmt(e['mae'])},{_fmt(e['mse'])}\n")

        rho = None
        if fid_rows:
            fid_csv = os.path.join(run_dir, "report_fidelity.csv")
            with open(fid_csv, "w") as fh:
                fh.write("round,cand,reward,true_mae\n")
                for r, k, rew, m in fid_rows:
                    fh.write(f"{r},{k},{_fmt(rew)},{_fmt(m)}\n")
            if len(fid_rows) >= 2:
                rho = metrics.spearman([row[2] for row in fid_rows],
                                       [-row[3] for row in fid_rows])

        lines = ["# Run report", ""]
        best = trace["best"]
        lines += [
            "## Searched transform",
            "",
            f"Best candidate (round {best['round']}, candidate {best['cand']}): "
            f"p_g={_fmt(best['spec']['p_g'])}, scale={_fmt(best['spec']['scale'])}, "
            f"angle_deg={_fmt(best['spec']['angle_deg'])}, "
            f"validation reward {_fmt(best['reward'])}.",
            "",
            "## Ablation",
            "",
            "| arm | n | MAE | MSE |",
            "| --- | --- | --- | --- |",
        ]
        for tag in ABLATION_TAGS:
            e = evals[tag]
            lines.append(f"| {tag} | {e['n']} | {_fmt(e['mae'])} | {_fmt(e['mse'])} |")
        lines += ["", "## Validation fidelity", ""]
        if fid_rows:
            lines += [
                "| round | cand | reward | true MAE |",
                "| --- | --- | --- | --- |",
            ]
            for r, k, rew, m in fid_rows:
                lines.append(f"| {r} | {k} | {_fmt(rew)} | {_fmt(m)} |")
            lines.append("")
            if rho is not None:
                lines.append(f"Spearman(reward, -true MAE) = {_fmt(rho)} "
                             f"over {len(fid_rows)} candidates.")
            else:
                lines.append("Too few candidates for a rank correlation.")
        else:
            lines.append("No per-candidate evaluations found (run `eval` on "
                         "`ckpt/round_r/cand_k.bin` checkpoints with tags "
                         "`fidelity_r{r}_c{k}` to populate this table).")
        lines.append("")
        report_path = os.path.join(run_dir, "report.md")
        with open(report_path, "w") as fh:
            fh.write("\n".join(lines))
        print(f"report written: {report_path}")
    return 0


# ------------------------------------------------------------------ driver

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdalign",
        description="Domain-adaptive density counting: data generation, "
                    "transform search, training, evaluation, reporting.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker processes for candidate training")

    p = sub.add_parser("gen-data", help="generate source/target datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("search", help="pretrain and run the transform search")
    common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train a model on a chosen transform")
    common(p)
    p.add_argument("--transform", required=True,
                   help="path to a transform JSON (e.g. best_transform.json)")
    p.add_argument("--tag", default="full", help="checkpoint name")
    p.add_argument("--lam", type=float, default=None,
                   help="override loss.lambda for this run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--hidden-labels", default=None,
                   help="directory of held-out annotation CSVs")
    p.add_argument("--tag", default=None, help="output name under eval/")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="assemble ablation and fidelity tables")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
