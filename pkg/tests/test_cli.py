import json
import os

import pytest

from crowdalign import cli

MICRO_CFG = {
    "data.n_source": 8, "data.n_target": 8,
    "data.height": 32, "data.width": 32,
    "data.poisson_mean": 4.0, "data.head_radius": 3.0,
    "net.channels": 4, "net.disc_hidden": 8,
    "search.n_d": 4, "search.rounds": 1,
    "search.pretrain_steps": 20, "search.cand_steps": 8,
    "search.final_steps": 20, "search.n_pairs": 4,
    "search.save_candidates": True,
    "controller.steps": 60,
}


def write_cfg(path, extra=None):
    cfg = dict(MICRO_CFG)
    if extra:
        cfg.update(extra)
    p = os.path.join(path, "cfg.json")
    with open(p, "w") as fh:
        json.dump(cfg, fh)
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full CLI pass: gen-data, search, 4 training arms, evals, report."""
    run = str(tmp_path_factory.mktemp("run"))
    cfg = write_cfg(run)
    ident = os.path.join(run, "identity.json")
    with open(ident, "w") as fh:
        json.dump({"p_g": 0.0, "scale": 1.0, "angle_deg": 0.0}, fh)

    assert cli.main(["gen-data", "--config", cfg, "--out", run]) == 0
    assert cli.main(["search", "--config", cfg, "--out", run]) == 0
    best = os.path.join(run, "best_transform.json")
    arms = {"noadapt": (ident, "0"), "dataonly": (best, "0"),
            "featonly": (ident, None), "full": (best, None)}
    for tag, (tf, lam) in arms.items():
        argv = ["train", "--config", cfg, "--out", run,
                "--transform", tf, "--tag", tag]
        if lam is not None:
            argv += ["--lam", lam]
        assert cli.main(argv) == 0
    for tag in arms:
        assert cli.main([
            "eval", "--config", cfg, "--out", run,
            "--ckpt", os.path.join(run, "model", f"{tag}.bin"),
            "--data", os.path.join(run, "data", "target"),
            "--hidden-labels", os.path.join(run, "data", "target_hidden"),
            "--tag", tag]) == 0
    for k in range(MICRO_CFG["search.n_d"]):
        ckpt = os.path.join(run, "ckpt", "round_0", f"cand_{k}.bin")
        assert cli.main([
            "eval", "--config", cfg, "--out", run, "--ckpt", ckpt,
            "--data", os.path.join(run, "data", "target"),
            "--hidden-labels", os.path.join(run, "data", "target_hidden"),
            "--tag", f"fidelity_r0_c{k}"]) == 0
    assert cli.main(["report", "--config", cfg, "--out", run]) == 0
    return run


def test_gen_data_layout_and_manifest(pipeline):
    base = os.path.join(pipeline, "data")
    with open(os.path.join(base, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["n_source"] == 8
    assert manifest["shift"]["p_g"] == 0.8
    assert len([f for f in os.listdir(os.path.join(base, "source"))
                if f.endswith(".png")]) == 8
    assert len([f for f in os.listdir(os.path.join(base, "source"))
                if f.endswith(".csv")]) == 8
    # target is unlabeled on disk; its labels live in the hidden store
    assert not [f for f in os.listdir(os.path.join(base, "target"))
                if f.endswith(".csv")]
    assert len(os.listdir(os.path.join(base, "target_hidden"))) == 8


def test_search_artifacts(pipeline):
    with open(os.path.join(pipeline, "trace.json")) as fh:
        trace = json.load(fh)
    assert len(trace["rounds"]) == 1
    assert len(trace["rounds"][0]["candidates"]) == 4
    with open(os.path.join(pipeline, "best_transform.json")) as fh:
        best = json.load(fh)
    assert set(best) == {"p_g", "scale", "angle_deg"}
    assert trace["best"]["spec"] == best
    for k in range(4):
        assert os.path.exists(
            os.path.join(pipeline, "ckpt", "round_0", f"cand_{k}.bin"))


def test_eval_artifacts(pipeline):
    for tag in cli.ABLATION_TAGS:
        with open(os.path.join(pipeline, "eval", f"{tag}.json")) as fh:
            result = json.load(fh)
        assert result["n"] == 8
        assert result["mae"] >= 0


def test_report_contents(pipeline):
    with open(os.path.join(pipeline, "report.md")) as fh:
        report = fh.read()
    for tag in cli.ABLATION_TAGS:
        assert f"| {tag} |" in report
    assert "Spearman" in report
    assert os.path.exists(os.path.join(pipeline, "report_ablation.csv"))
    with open(os.path.join(pipeline, "report_fidelity.csv")) as fh:
        assert len(fh.read().strip().splitlines()) == 5  # header + 4 rows


def test_config_echo_written(pipeline):
    with open(os.path.join(pipeline, "config_gen-data.json")) as fh:
        echo = json.load(fh)
    assert echo["search.n_d"] == 4
    assert echo["seed"] == 0


def test_gen_data_is_byte_deterministic(tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    cfg = write_cfg(str(tmp_path), {"data.n_source": 3, "data.n_target": 2})
    assert cli.main(["gen-data", "--config", cfg, "--out", out1]) == 0
    assert cli.main(["gen-data", "--config", cfg, "--out", out2]) == 0
    for sub in ("source", "target", "target_hidden"):
        d1 = os.path.join(out1, "data", sub)
        d2 = os.path.join(out2, "data", sub)
        assert sorted(os.listdir(d1)) == sorted(os.listdir(d2))
        for name in os.listdir(d1):
            with open(os.path.join(d1, name), "rb") as f1, \
                 open(os.path.join(d2, name), "rb") as f2:
                assert f1.read() == f2.read(), name


def test_seed_override_changes_data(tmp_path):
    out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
    cfg = write_cfg(str(tmp_path), {"data.n_source": 2, "data.n_target": 1})
    assert cli.main(["gen-data", "--config", cfg, "--out", out1]) == 0
    assert cli.main(["gen-data", "--config", cfg, "--out", out2,
                     "--seed", "3"]) == 0
    with open(os.path.join(out1, "data", "source", "img_0000.png"), "rb") as fh:
        a = fh.read()
    with open(os.path.join(out2, "data", "source", "img_0000.png"), "rb") as fh:
        b = fh.read()
    assert a != b


def test_unknown_config_key_exits_2(tmp_path, capsys):
    p = os.path.join(str(tmp_path), "bad.json")
    with open(p, "w") as fh:
        json.dump({"serach.n_d": 4}, fh)
    assert cli.main(["gen-data", "--config", p, "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    cfg = write_cfg(str(tmp_path))
    # search before gen-data: no datasets on disk
    assert cli.main(["search", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_lock_blocks_second_writer(tmp_path, capsys):
    cfg = write_cfg(str(tmp_path))
    lock = os.path.join(str(tmp_path), cli.LOCK_NAME)
    with open(lock, "w") as fh:
        fh.write("123")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "locked" in capsys.readouterr().err
    os.unlink(lock)


def test_lock_is_released_after_success(tmp_path):
    cfg = write_cfg(str(tmp_path), {"data.n_source": 1, "data.n_target": 1})
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert not os.path.exists(os.path.join(str(tmp_path), cli.LOCK_NAME))


def test_bad_transform_file_exits_2(tmp_path, pipeline, capsys):
    cfg = write_cfg(str(tmp_path))
    bad = os.path.join(str(tmp_path), "bad.json")
    with open(bad, "w") as fh:
        json.dump({"p_g": 0.5, "scale": 0.5, "bogus": 1}, fh)
    rc = cli.main(["train", "--config", cfg, "--out", pipeline,
                   "--transform", bad, "--tag", "junk"])
    assert rc == 2
    assert "bad transform file" in capsys.readouterr().err


def test_missing_subcommand_exits_2(capsys):
    assert cli.main([]) == 2
    capsys.readouterr()


def test_threads_validation(tmp_path, capsys):
    cfg = write_cfg(str(tmp_path))
    rc = cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path),
                   "--threads", "0"])
    assert rc == 2
    assert "--threads" in capsys.readouterr().err
