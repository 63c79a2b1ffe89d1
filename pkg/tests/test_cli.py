import json

import numpy as np
import pytest

from cloudfree import data
from cloudfree.cli import OUTPUT_ENV, main

TINY_MODEL = {"in_channels": 3, "n_temporal": 2, "width": 8}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.fixture
def toy(tmp_path, capsys):
    """A 4-sample 16x16 dataset and a config training the tiny model on it."""
    assert run(capsys, "gen-data", "--seed", 1, "--n", 4, "--hw", 16, "--N", 2, "--out", tmp_path / "train")[0] == 0
    assert run(capsys, "gen-data", "--seed", 2, "--n", 3, "--hw", 16, "--N", 2, "--split", "test", "--out", tmp_path / "test")[0] == 0

    def write(name="cfg.json", **overrides):
        cfg = {
            "version": 1,
            "model": TINY_MODEL,
            "train": {"lr": 1e-3, "batch_size": 2, "max_steps": 3, "ckpt_every": 2, "log_every": 0, "seed": 4},
            "schedule": {"kind": "sigmoid", "T": 100},
            "data": {"train": "train", "test": "test"},
            "output_dir": "run",
        }
        for k, v in overrides.items():
            cfg[k] = {**cfg[k], **v} if isinstance(v, dict) and isinstance(cfg.get(k), dict) else v
        (tmp_path / name).write_text(json.dumps(cfg))
        return tmp_path / name

    return tmp_path, write


def test_gen_data_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--seed", 7, "--n", 500, "--hw", 32, "--N", 3, "--out", tmp_path / name)
        assert code == 0
        assert json.loads(out)["count"] == 500
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["count"] == 500


def test_gen_data_rejects_bad_hw(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--n", 2, "--hw", 30, "--out", tmp_path / "x")
    assert code == 1
    assert "multiples of 8" in err
    assert not (tmp_path / "x").exists()


@pytest.mark.parametrize("target", ["data", "noise"])
def test_train_both_targets(toy, capsys, target):
    tmp, write = toy
    code, out, _ = run(capsys, "train", write(), "--target", target)
    assert code == 0
    report = json.loads(out)
    assert report["step"] == 3
    log = [json.loads(line) for line in (tmp / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3]
    saved = json.loads((tmp / "run" / "config.json").read_text())
    assert saved["train"]["target"] == target


def test_train_resume_matches_uninterrupted(toy, capsys, monkeypatch):
    tmp, write = toy
    monkeypatch.setenv(OUTPUT_ENV, str(tmp / "straight"))
    assert run(capsys, "train", write(train={"max_steps": 6}))[0] == 0
    monkeypatch.setenv(OUTPUT_ENV, str(tmp / "split"))
    assert run(capsys, "train", write(train={"max_steps": 3}))[0] == 0
    assert run(capsys, "train", write(train={"max_steps": 6}), "--resume")[0] == 0

    def losses(d):
        return [json.loads(line)["loss"] for line in (d / "train_log.jsonl").read_text().splitlines()]

    assert losses(tmp / "split") == losses(tmp / "straight")
    assert len(losses(tmp / "straight")) == 6


def test_train_resume_rejects_changed_config(toy, capsys):
    tmp, write = toy
    assert run(capsys, "train", write())[0] == 0
    code, _, err = run(capsys, "train", write(train={"lr": 5e-4}), "--resume")
    assert code == 1 and "differs" in err


def test_train_validation_errors(toy, capsys):
    tmp, write = toy
    cases = [
        (dict(data={"train": "missing"}), "does not exist"),
        (dict(model={"widht": 8}), "widht"),
        (dict(version=2), "version"),
        (dict(schedule={"kind": "sigmoid", "T": 100}, train={"T": 50}), "disagrees"),
        (dict(schedule={"kind": "quadratic"}), "quadratic"),
        (dict(model={"n_temporal": 3}), "N=2"),
        (dict(extra=1), "extra"),
    ]
    cases = [(write(f"bad{i}.json", **kw), needle) for i, (kw, needle) in enumerate(cases)]
    for path, needle in cases:
        code, _, err = run(capsys, "train", path)
        assert code == 1, needle
        assert needle in err, (needle, err)
    assert not (tmp / "run").exists()
    assert run(capsys, "train", tmp / "nope.json")[0] == 1
    assert run(capsys, "train", write(), "--resume")[0] == 1


def _trained(toy, capsys):
    tmp, write = toy
    assert run(capsys, "train", write())[0] == 0
    return tmp, tmp / "run" / "checkpoints" / "last"


def test_sample_outputs_and_timing(toy, capsys):
    tmp, ck = _trained(toy, capsys)
    code, out, _ = run(capsys, "sample", "--checkpoint", ck, "--dataset", tmp / "test", "--steps", 1, 10, "--png", "--out", tmp / "s")
    assert code == 0
    timing = json.loads(out)
    assert json.loads((tmp / "s" / "timing.json").read_text()) == timing
    runs = {r["steps"]: r for r in timing["runs"]}
    assert runs[10]["wall_s"] > runs[1]["wall_s"]
    for k in (1, 10):
        manifest, tensors = data.read_container(tmp / "s" / f"k{k}" / "predictions")
        assert manifest["kind"] == "predictions" and manifest["steps"] == k
        assert len(tensors) == 3
        assert all(v.shape == (1, 3, 16, 16) for v in tensors.values())
        assert len(list((tmp / "s" / f"k{k}" / "png").glob("*.png"))) == 3


def test_sample_is_byte_reproducible(toy, capsys):
    tmp, ck = _trained(toy, capsys)
    for name in ("a", "b"):
        assert run(capsys, "sample", "--checkpoint", ck, "--dataset", tmp / "test", "--steps", 3, "--png", "--out", tmp / name)[0] == 0
    assert files(tmp / "a" / "k3" / "png") == files(tmp / "b" / "k3" / "png")
    assert files(tmp / "a" / "k3" / "predictions") == files(tmp / "b" / "k3" / "predictions")


def test_sample_validation(toy, capsys):
    tmp, ck = _trained(toy, capsys)
    assert run(capsys, "sample", "--checkpoint", ck, "--dataset", tmp / "test", "--steps", 101, "--out", tmp / "s")[0] == 1
    assert run(capsys, "sample", "--checkpoint", tmp / "none", "--dataset", tmp / "test", "--out", tmp / "s")[0] == 1
    run(capsys, "gen-data", "--n", 1, "--hw", 16, "--N", 3, "--out", tmp / "n3")
    code, _, err = run(capsys, "sample", "--checkpoint", ck, "--dataset", tmp / "n3", "--out", tmp / "s")
    assert code == 1 and "N=3" in err


def _write_preds(path, pairs, values):
    data.write_container(path, [(p.id, v) for p, v in zip(pairs, values)], {"kind": "predictions"})


def test_eval_identity_order_and_missing(toy, capsys):
    tmp, _ = toy
    ref = data.load_dataset(tmp / "test")
    _write_preds(tmp / "same", ref.pairs, [p.y0 for p in ref.pairs])
    code, out, _ = run(capsys, "eval", tmp / "same", tmp / "test")
    assert code == 0
    rep = json.loads(out)
    assert rep["aggregate"] == {"psnr_db": "inf", "ssim": 1.0, "count": 3}
    assert all(r["psnr_db"] == "inf" for r in rep["records"])

    noisy = [np.clip(p.y0 + 0.1 * np.sign(p.y0), -1, 1) for p in ref.pairs]
    _write_preds(tmp / "fwd", ref.pairs, noisy)
    _write_preds(tmp / "rev", ref.pairs[::-1], noisy[::-1])
    a = json.loads(run(capsys, "eval", tmp / "fwd", tmp / "test")[1])
    b = json.loads(run(capsys, "eval", tmp / "rev", tmp / "test")[1])
    assert a == b and a["aggregate"]["psnr_db"] < 100

    _write_preds(tmp / "short", ref.pairs[1:], noisy[1:])
    code, _, err = run(capsys, "eval", tmp / "short", tmp / "test")
    assert code == 1 and ref.pairs[0].id in err
    assert run(capsys, "eval", tmp / "nothing", tmp / "test")[0] == 1


def test_count_tiny_and_reference(toy, capsys):
    tmp, write = toy
    cfg = write(
        model={"in_channels": 1, "n_temporal": 1, "width": 2, "channel_mults": [1], "enc_depths": [1], "dec_depths": [0], "mid_depth": 0, "time_dim": 2}
    )
    code, out, _ = run(capsys, "count", "--config", cfg, "--hw", 4, 4)
    assert code == 0
    rep = json.loads(out)
    assert (rep["params"], rep["macs"]) == (205, 2032)
    rep = json.loads(run(capsys, "count")[1])
    assert rep["reference_params_m"] == 22.91 and rep["reference_macs_g"] == 45.86 and rep["hw"] == 256
    code, _, err = run(capsys, "count", "--config", write("four.json"), "--hw", 12, 12)
    assert code == 1 and "divisible by 8" in err


def test_selfcheck(capsys, tmp_path):
    code, _, _ = run(capsys, "selfcheck", "--out", tmp_path / "sc.json")
    assert code == 0
    rep = json.loads((tmp_path / "sc.json").read_text())
    assert rep["ok"] and set(rep["errors"]) >= {"ssa", "sca", "sem", "frm", "tcf_block", "time_mlp", "denoiser"}
