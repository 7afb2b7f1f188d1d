import hashlib
import json
import os

import numpy as np
import pytest

from gevst import cli

pytestmark = pytest.mark.filterwarnings(
    "ignore:CIDEr-D over a single-document corpus")

TINY = dict(d_model=16, heads=2, expand_ratio=2, fusion_cells=1, layers=2,
            raw_feat_dim=32, enc_width=16, enc_heads=2, enc_layers=1,
            batch_size=4, val_every=1, min_count=1, max_len=10,
            xe_epochs=2, warmup_epochs=2, scst_epochs=1, beam=2, seed=3)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Dataset + config + one trained XE checkpoint, shared by the commands."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data.jsonl")
    cfg = str(root / "config.json")
    with open(cfg, "w") as f:
        json.dump(TINY, f)
    assert cli.main(["gen-data", "--seed", "4", "--n", "6", "--out", data]) == 0
    run = str(root / "xe")
    assert cli.main(["train", "--data", data, "--config", cfg, "--out", run]) == 0
    return {"root": root, "data": data, "cfg": cfg, "run": run,
            "ckpt": os.path.join(run, "checkpoint.bin")}


def test_gen_data_outputs_and_manifest(workdir):
    data = workdir["data"]
    manifest = json.load(open(data + ".manifest.json"))
    assert manifest["command"] == "gen-data"
    assert manifest["seed"] == 4
    assert manifest["outputs"] == [data]
    assert manifest["dataset_sha256"] == hashlib.sha256(
        open(data, "rb").read()).hexdigest()
    assert set(manifest) == {"command", "config", "seed", "dataset_sha256",
                             "outputs", "timings_s"}


def test_gen_data_rerun_byte_identical(workdir, tmp_path):
    out = str(tmp_path / "again.jsonl")
    assert cli.main(["gen-data", "--seed", "4", "--n", "6", "--out", out]) == 0
    assert open(out, "rb").read() == open(workdir["data"], "rb").read()


def test_train_xe_artifacts(workdir):
    run = workdir["run"]
    assert os.path.exists(os.path.join(run, "loss_curve.csv"))
    assert os.path.exists(workdir["ckpt"])
    manifest = json.load(open(os.path.join(run, "manifest.json")))
    assert manifest["command"] == "train-xe"
    assert manifest["config"]["d_model"] == 16
    curve = open(os.path.join(run, "loss_curve.csv")).read().splitlines()
    assert curve[0] == "epoch,loss" and len(curve) == 1 + TINY["xe_epochs"]


def test_train_rerun_byte_identical(workdir, tmp_path):
    run2 = str(tmp_path / "xe2")
    assert cli.main(["train", "--data", workdir["data"], "--config",
                     workdir["cfg"], "--out", run2]) == 0
    for name in ("checkpoint.bin", "loss_curve.csv"):
        a = open(os.path.join(workdir["run"], name), "rb").read()
        b = open(os.path.join(run2, name), "rb").read()
        assert a == b, f"{name} differs between reruns"


def test_caption_and_eval_flow(workdir, tmp_path):
    pred = str(tmp_path / "pred.jsonl")
    assert cli.main(["caption", "--ckpt", workdir["ckpt"], "--data",
                     workdir["data"], "--beam", "2", "--out", pred]) == 0
    rows = [json.loads(l) for l in open(pred) if l.strip()]
    assert [r["id"] for r in rows] == [f"s{i:05d}" for i in range(6)]
    for r in rows:
        assert set(r) == {"id", "caption", "logprob"}
        assert isinstance(r["caption"], str) and r["logprob"] <= 0.0

    # rerun is byte-identical
    pred2 = str(tmp_path / "pred2.jsonl")
    cli.main(["caption", "--ckpt", workdir["ckpt"], "--data", workdir["data"],
              "--beam", "2", "--out", pred2])
    assert open(pred, "rb").read() == open(pred2, "rb").read()

    out = str(tmp_path / "metrics.json")
    assert cli.main(["eval", "--pred", pred, "--refs", workdir["data"],
                     "--out", out]) == 0
    report = json.load(open(out))
    assert set(report) == {"bleu1", "bleu2", "bleu3", "bleu4", "rouge_l",
                           "cider_d", "n"}
    assert report["n"] == 6


def test_eval_unknown_id_fails(workdir, tmp_path, capsys):
    pred = tmp_path / "bad.jsonl"
    pred.write_text(json.dumps({"id": "zzz", "caption": "a thing"}) + "\n")
    out = str(tmp_path / "m.json")
    assert cli.main(["eval", "--pred", str(pred), "--refs", workdir["data"],
                     "--out", out]) == 1
    assert "zzz" in capsys.readouterr().err


def test_scst_requires_init(workdir, tmp_path, capsys):
    code = cli.main(["train", "--data", workdir["data"], "--phase", "scst",
                     "--out", str(tmp_path / "s")])
    assert code == 1
    assert "requires --init" in capsys.readouterr().err


def test_scst_from_checkpoint(workdir, tmp_path):
    run = str(tmp_path / "scst")
    assert cli.main(["train", "--data", workdir["data"], "--phase", "scst",
                     "--init", workdir["ckpt"], "--out", run]) == 0
    curve = open(os.path.join(run, "reward_curve.csv")).read().splitlines()
    assert curve[0] == "epoch,reward" and len(curve) == 2
    manifest = json.load(open(os.path.join(run, "manifest.json")))
    assert manifest["command"] == "train-scst"


def test_dump_attention_contents(workdir, tmp_path):
    out = str(tmp_path / "attn")
    assert cli.main(["dump-attention", "--ckpt", workdir["ckpt"], "--data",
                     workdir["data"], "--sample-id", "s00002", "--out", out]) == 0

    fusion_files = [f for f in os.listdir(out) if f.startswith("fusion_")]
    assert sorted(fusion_files) == ["fusion_sv_cell1_content.csv",
                                    "fusion_sv_cell1_geometry.csv",
                                    "fusion_vs_cell1_content.csv",
                                    "fusion_vs_cell1_geometry.csv"]
    for name in fusion_files:
        rows = [[float(v) for v in line.split(",")]
                for line in open(os.path.join(out, name)) if line.strip()]
        for row in rows:
            assert abs(sum(row) - 1.0) < 1e-9

    for b in ("ss", "sv", "vs", "vv"):
        lines = open(os.path.join(out, f"gesa_gates_{b}.csv")).read().splitlines()
        assert lines[0] == "layer,c1,c2,c3"
        assert len(lines) == 1 + TINY["layers"]
        for line in lines[1:]:
            vals = [float(v) for v in line.split(",")[1:] if v != ""]
            assert abs(sum(vals) - 1.0) < 1e-9

    dec = open(os.path.join(out, "decoder_gates.csv")).read().splitlines()
    assert dec[0] == "step,ss,sv,vs,vv"
    assert len(dec) >= 2

    manifest = json.load(open(os.path.join(out, "manifest.json")))
    assert len(manifest["outputs"]) == len(fusion_files) + 4 + 1


def test_dump_attention_unknown_sample(workdir, tmp_path, capsys):
    code = cli.main(["dump-attention", "--ckpt", workdir["ckpt"], "--data",
                     workdir["data"], "--sample-id", "nope", "--out",
                     str(tmp_path / "x")])
    assert code == 1
    assert "nope" in capsys.readouterr().err


def test_ablate_worker_count_does_not_change_bytes(workdir, tmp_path, monkeypatch, capsys):
    serial, parallel = str(tmp_path / "serial"), str(tmp_path / "parallel")
    args = ["ablate", "--data", workdir["data"], "--axis", "gesa", "--config",
            workdir["cfg"], "--epochs", "1"]
    monkeypatch.delenv("GEVST_THREADS", raising=False)
    assert cli.main(args + ["--out", serial]) == 0
    assert "direction check" in capsys.readouterr().out
    monkeypatch.setenv("GEVST_THREADS", "2")
    assert cli.main(args + ["--out", parallel]) == 0
    for name in ("table.csv", "table.md"):
        a = open(os.path.join(serial, name), "rb").read()
        b = open(os.path.join(parallel, name), "rb").read()
        assert a == b
    table = open(os.path.join(serial, "table.csv")).read().splitlines()
    assert len(table) == 4


def test_missing_file_fails_cleanly(tmp_path, capsys):
    assert cli.main(["train", "--data", str(tmp_path / "absent.jsonl"),
                     "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_usage_errors_exit_two(capsys):
    for argv in ([], ["train"], ["gen-data", "--seed", "1"],
                 ["ablate", "--data", "x", "--axis", "bogus", "--out", "y"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2
    capsys.readouterr()
