"""CLI verbs: reproducibility, error contract, report artifacts."""

import json
import re

import numpy as np
import pytest

from srstack import scene as sc
from srstack.cli import main
from srstack.dataset import load_dataset

DATA_TOML = """
[dataset]
n_examples = 5
master_seed = 11
stored_frames = 8
raw_frames = 12
{extra}

[dataset.scene]
extent_m = 120.0
count_range = [1, 8]
"""

TRAIN_TOML = """
[model]
frames = 4

[train]
steps = {steps}
batch_size = 2
crop_lr = 16
eval_center_crop_lr = 12
seed = 1
{extra}
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "data.toml").write_text(DATA_TOML.format(extra=""))
    assert main(["gen-data", "--config", str(root / "data.toml"), "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def trained(work):
    cfg = work / "train.toml"
    cfg.write_text(TRAIN_TOML.format(steps=5, extra=""))
    run = work / "run1"
    assert main(["train", "--dataset", str(work / "data"), "--config", str(cfg), "--out", str(run)]) == 0
    return run


def test_gen_data_byte_identical(work, tmp_path):
    out2 = tmp_path / "data2"
    assert main(["gen-data", "--config", str(work / "data.toml"), "--out", str(out2)]) == 0
    for name in ("arrays.bin", "manifest.json"):
        assert (work / "data" / name).read_bytes() == (out2 / name).read_bytes()


def test_gen_data_has_height_fraction_zero(tmp_path):
    cfg = tmp_path / "d.toml"
    cfg.write_text(DATA_TOML.format(extra="has_height_fraction = 0.0"))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    ds = load_dataset(tmp_path / "d")
    assert all(not ds.record(i).has_height for i in range(len(ds)))


def test_gen_data_true_counts_match_recount_oracle(work):
    ds = load_dataset(work / "data")
    total = 0
    for i in range(len(ds)):
        rec = ds.record(i)
        scn = sc.sample_scene(rec.scene_seed, ds.scene_config)
        assert rec.true_count == sc.true_count(scn)
        total += rec.true_count
    assert total == sum(ds.record(i).true_count for i in range(len(ds)))


def test_gen_data_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[dataset]\nn_examples = 2\nbanana = 1\n")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert err.startswith("ERROR ")
    payload = json.loads(err[len("ERROR ") :])
    assert "banana" in payload["message"]


def test_train_smoke_logs_one_entry_per_step(trained):
    lines = (trained / "loss_log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 5
    steps = [json.loads(l)["step"] for l in lines]
    assert steps == list(range(5))
    assert all(np.isfinite(json.loads(l)["loss"]) for l in lines)


def test_train_invalid_lr_preflight_error(work, capsys, tmp_path):
    cfg = tmp_path / "bad_train.toml"
    cfg.write_text(TRAIN_TOML.format(steps=5, extra="learning_rate = -1.0"))
    rc = main(["train", "--dataset", str(work / "data"), "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "learning rate" in capsys.readouterr().err


def test_train_frames_conflict_preflight(work, capsys, tmp_path):
    cfg = tmp_path / "conflict.toml"
    # 16 frames requested from 8 stored: rejected before any training
    cfg.write_text("[model]\nframes = 16\n\n[train]\nsteps = 2\nbatch_size = 1\ncrop_lr = 16\neval_center_crop_lr = 12\n")
    rc = main(["train", "--dataset", str(work / "data"), "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert rc == 2
    assert "16" in capsys.readouterr().err


def test_train_resume_after_completion(work, trained, capsys):
    rc = main(
        ["train", "--dataset", str(work / "data"), "--config", str(work / "train.toml"),
         "--out", str(trained), "--resume"]
    )
    assert rc == 0
    assert "already complete" in capsys.readouterr().out


def test_eval_deterministic_bytes(work, trained, tmp_path):
    outs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        assert main(["eval", "--run", str(trained), "--dataset", str(work / "data"), "--out", str(out)]) == 0
        outs.append(out)
    for fname in ("report.json", "metrics.csv", "counts.csv", "height_ae.csv"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


def test_eval_oracle_injection_is_perfect(work, trained, tmp_path):
    ecfg = tmp_path / "eval.toml"
    ecfg.write_text("[eval]\noracle_injection = true\n")
    out = tmp_path / "oracle_eval"
    assert main(
        ["eval", "--run", str(trained), "--dataset", str(work / "data"), "--out", str(out),
         "--eval-config", str(ecfg)]
    ) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["miou"] == 1.0
    assert report["count_r2"] > 0.99


def test_eval_missing_checkpoint_errors(work, tmp_path, capsys):
    run = tmp_path / "empty_run"
    run.mkdir()
    (run / "run_manifest.json").write_text(json.dumps({"config": {}, "config_hash": "x", "dataset_hash": "y"}))
    rc = main(["eval", "--run", str(run), "--dataset", str(work / "data"), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_report_tables_and_svg(work, trained, tmp_path):
    # evaluate into the conventional run/eval location first
    assert main(["eval", "--run", str(trained), "--dataset", str(work / "data"),
                 "--out", str(trained / "eval")]) == 0
    out = tmp_path / "rep"
    assert main(["report", "--runs", str(trained), "--out", str(out)]) == 0
    lines = (out / "comparison.csv").read_text().strip().splitlines()
    assert len(lines) == 2  # header + one run
    assert lines[0].startswith("run,frames,fusion")

    svg = (out / f"counts_{trained.name}.svg").read_text()
    m = {k: float(v) for k, v in re.findall(r'data-(x-min|x-max|y-min|y-max)="([^"]+)"', svg).__iter__()}
    rows = (trained / "eval" / "counts.csv").read_text().strip().splitlines()[1:]
    truths = [float(r.split(",")[1]) for r in rows]
    ests = [float(r.split(",")[2]) for r in rows]
    assert m["x-min"] <= min(truths) and m["x-max"] >= max(truths)
    assert m["y-min"] <= min(ests) and m["y-max"] >= max(ests)


def test_report_rejects_mixed_datasets(work, trained, tmp_path, capsys):
    other_data = tmp_path / "data_b"
    cfg = tmp_path / "d.toml"
    cfg.write_text(
        "[dataset]\nn_examples = 5\nmaster_seed = 99\nstored_frames = 8\nraw_frames = 12\n\n"
        "[dataset.scene]\nextent_m = 120.0\ncount_range = [1, 8]\n"
    )
    assert main(["gen-data", "--config", str(cfg), "--out", str(other_data)]) == 0
    run2 = tmp_path / "run2"
    tcfg = tmp_path / "t.toml"
    tcfg.write_text(TRAIN_TOML.format(steps=2, extra=""))
    assert main(["train", "--dataset", str(other_data), "--config", str(tcfg), "--out", str(run2)]) == 0
    assert main(["eval", "--run", str(run2), "--dataset", str(other_data), "--out", str(run2 / "eval")]) == 0
    rc = main(["report", "--runs", str(trained), str(run2), "--out", str(tmp_path / "rep2")])
    assert rc == 2
    assert "different datasets" in capsys.readouterr().err


def test_ablate_runs_and_aggregates(work, tmp_path):
    base = tmp_path / "base.toml"
    base.write_text(TRAIN_TOML.format(steps=2, extra=""))
    spec = tmp_path / "ablate.toml"
    spec.write_text(
        """
[[ablation]]
name = "one_frame"
repeats = 1
[ablation.overrides]
"model.frames" = 2

[[ablation]]
name = "four_frames"
repeats = 1
[ablation.overrides]
"model.frames" = 4
"""
    )
    out = tmp_path / "ablations"
    assert main(
        ["ablate", "--dataset", str(work / "data"), "--config", str(base), "--spec", str(spec),
         "--out", str(out)]
    ) == 0
    lines = (out / "ablations.csv").read_text().strip().splitlines()
    assert len(lines) == 3
    assert (out / "one_frame" / "rep0" / "ckpt_final.bin").exists()


def test_ablate_duplicate_names_rejected(work, tmp_path, capsys):
    base = tmp_path / "base.toml"
    base.write_text(TRAIN_TOML.format(steps=2, extra=""))
    spec = tmp_path / "dup.toml"
    spec.write_text('[[ablation]]\nname = "a"\n\n[[ablation]]\nname = "a"\n')
    rc = main(["ablate", "--dataset", str(work / "data"), "--config", str(base), "--spec", str(spec),
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "unique" in capsys.readouterr().err