"""Subcommand wiring: exit codes, config merging, artifact layout, reruns."""

import argparse
import csv
import json

import numpy as np
import pytest

from voicemap import cli, dsp, model, rollout, train
from voicemap.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny corpus taken through synth, featurize, and both presets."""
    root = tmp_path_factory.mktemp("cli")
    corpus_dir = root / "corpus"
    feats = root / "feats"
    assert main(["synth", "--out", str(corpus_dir), "--n-healthy", "8",
                 "--n-patho", "16", "--seconds", "1.0", "--seed", "7"]) == 0
    config = root / "run.json"
    config.write_text(json.dumps({
        "ratios": [0.5, 0.25, 0.25],
        "features": str(feats),
        "model": {"embed_dim": 16, "layers": 1, "heads": 2},
        "train": {"epochs": 2},
    }))
    assert main(["featurize", "--manifest", str(corpus_dir / "manifest.csv"),
                 "--out", str(feats), "--max-seconds", "1.0",
                 "--config", str(config)]) == 0
    run_a = root / "run_a"
    run_b = root / "run_b"
    assert main(["train", "--preset", "freeze", "--config", str(config),
                 "--out", str(run_a)]) == 0
    assert main(["train", "--preset", "finetune", "--config", str(config),
                 "--out", str(run_b), "--seed", "1"]) == 0
    return {"root": root, "corpus": corpus_dir, "feats": feats,
            "config": config, "ckpt_a": run_a / "model.astc",
            "ckpt_b": run_b / "model.astc"}


# ----------------------------------------------------------- presets

def test_freeze_preset_resolves_published_values():
    args = argparse.Namespace(preset="freeze", seed=None)
    resolved, name = cli._resolve_train_config(args, {})
    assert name == "freeze"
    assert resolved.learning_rate == pytest.approx(1e-3)
    assert resolved.epochs == 10
    assert resolved.early_stopping_patience == 5
    assert resolved.backbone_trainable is False


def test_finetune_preset_resolves_published_values():
    args = argparse.Namespace(preset="finetune", seed=None)
    resolved, name = cli._resolve_train_config(args, {})
    assert name == "finetune"
    assert resolved.learning_rate == pytest.approx(2.5e-4)
    assert resolved.epochs == 40
    assert resolved.early_stopping_patience == 8
    assert resolved.backbone_trainable is True


def test_config_overrides_preset_and_flags_override_config():
    args = argparse.Namespace(preset="freeze", seed=9)
    resolved, _ = cli._resolve_train_config(
        args, {"train": {"epochs": 3, "seed": 4}})
    assert resolved.epochs == 3
    assert resolved.seed == 9  # flag beats config


def test_unknown_train_override_rejected():
    args = argparse.Namespace(preset="freeze", seed=None)
    with pytest.raises(ValueError, match="bad train config override"):
        cli._resolve_train_config(args, {"train": {"optimizer": "sgd"}})


# ----------------------------------------------------------- exit codes

def test_unknown_flag_prints_usage_and_exits_1(capsys):
    assert main(["synth", "--bogus", "x"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_exits_1(capsys):
    assert main(["synth"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_manifest_is_validation_error(tmp_path, capsys):
    rc = main(["featurize", "--manifest", str(tmp_path / "nope.csv"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_bad_split_name_is_validation_error(pipeline, capsys):
    rc = main(["eval", "--checkpoint", str(pipeline["ckpt_a"]),
               "--split", "holdout", "--features", str(pipeline["feats"])])
    assert rc == 1
    assert "unknown split" in capsys.readouterr().err


def test_train_without_features_is_validation_error(tmp_path, capsys):
    rc = main(["train", "--preset", "freeze", "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "feature directory" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_projection_is_runtime_failure(pipeline, tmp_path, capsys):
    eval_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pipeline["ckpt_a"]),
                 "--split", "train", "--features", str(pipeline["feats"]),
                 "--out", str(eval_out)]) == 0
    rc = main(["project", "--embeddings", str(eval_out / "embeddings.csv"),
               "--perplexity", "3", "--iterations", "260",
               "--learning-rate", "1e300", "--out", str(tmp_path / "proj")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "runtime failure" in err and "iteration" in err


# ----------------------------------------------------------- featurize

def test_featurize_layout_and_split_counts(pipeline):
    feats = pipeline["feats"]
    fbnk = sorted(p.name for p in (feats / "features").glob("*.fbnk"))
    assert len(fbnk) == 24
    with open(feats / "splits.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "split"]
    counts = {}
    for _, split in rows[1:]:
        counts[split] = counts.get(split, 0) + 1
    assert counts == {"train": 12, "dev": 6, "test": 6}
    stats = json.loads((feats / "stats.json").read_text())
    assert set(stats) == {"mean", "std"} and stats["std"] > 0
    assert (feats / "featurize_config.json").exists()
    assert (feats / "manifest.csv").exists()


def test_featurize_flag_beats_config_max_seconds(pipeline, tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"max_seconds": 3.0,
                                  "ratios": [0.5, 0.25, 0.25]}))
    out = tmp_path / "feats"
    assert main(["featurize", "--manifest",
                 str(pipeline["corpus"] / "manifest.csv"), "--out", str(out),
                 "--max-seconds", "1.0", "--config", str(config)]) == 0
    spec = dsp.load_spectrogram(out / "features" / "h0000.fbnk")
    assert spec.padded_frames == 100  # the flag's 1.0 s, not the config's 3.0


def test_featurize_rerun_is_byte_identical(pipeline, tmp_path):
    out = tmp_path / "feats2"
    for _ in range(2):
        assert main(["featurize", "--manifest",
                     str(pipeline["corpus"] / "manifest.csv"),
                     "--out", str(out), "--max-seconds", "1.0",
                     "--config", str(pipeline["config"])]) == 0
    reference = pipeline["feats"]
    for rel in ("features/h0000.fbnk", "features/p0003.fbnk", "splits.csv",
                "stats.json"):
        assert (out / rel).read_bytes() == (reference / rel).read_bytes()


# ----------------------------------------------------------- train / eval

def test_train_rerun_reproduces_checkpoint(pipeline, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--preset", "freeze",
                 "--config", str(pipeline["config"]), "--out", str(out)]) == 0
    assert (out / "model.astc").read_bytes() == pipeline["ckpt_a"].read_bytes()
    history = json.loads((out / "history.json").read_text())
    assert {"history", "stopped_by", "best_epoch", "best_uar"} <= set(history)
    snapshot = json.loads((out / "train_config.json").read_text())
    assert snapshot["preset"] == "freeze"
    assert snapshot["train"]["epochs"] == 2


def test_eval_prints_table_layout_matching_metric_ops(pipeline, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["eval", "--checkpoint", str(pipeline["ckpt_a"]),
               "--split", "test", "--features", str(pipeline["feats"]),
               "--out", str(out), "--name", "freeze"])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "\tfreeze"
    assert lines[1].startswith("Unweighted Average Recall (UAR)\t")
    assert lines[2].startswith("Area Under the Curve (AUC)\t")
    printed_uar = float(lines[1].split("\t")[1])
    printed_auc = float(lines[2].split("\t")[1])

    params, mcfg = model.load_checkpoint(pipeline["ckpt_a"])
    _, samples = cli._load_feature_split(pipeline["feats"], "test")
    logits = train.predict(params, mcfg, samples)
    truth = np.array([label for _, label in samples])
    expect = train.evaluate(truth, logits.argmax(axis=1),
                            train.scores_from_logits(logits))
    assert printed_uar == pytest.approx(expect.uar, abs=5e-5)
    assert printed_auc == pytest.approx(expect.auc, abs=5e-5)

    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["uar"] == pytest.approx(expect.uar)
    assert metrics["n"] == 6


def test_eval_embeddings_csv_shape(pipeline, tmp_path):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pipeline["ckpt_b"]),
                 "--split", "dev", "--features", str(pipeline["feats"]),
                 "--out", str(out)]) == 0
    with open(out / "embeddings.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "gender", "status"] + [f"e{j}" for j in range(16)]
    assert len(rows) == 7
    floats = [float(v) for v in rows[1][3:]]
    assert np.isfinite(floats).all()


# ----------------------------------------------------------- rollout / render

def test_rollout_writes_map_and_sidecar(pipeline, tmp_path):
    out = tmp_path / "m.rmap"
    rc = main(["rollout", "--checkpoint", str(pipeline["ckpt_b"]),
               "--input", str(pipeline["feats"] / "features" / "h0000.fbnk"),
               "--class", "0", "--out", str(out)])
    assert rc == 0
    final = rollout.load_map(out)
    assert final.shape == (128, 100)
    assert 0.0 <= final.min() and final.max() <= 1.0
    sidecar = json.loads((out.parent / (out.name + ".json")).read_text())
    assert sidecar["class_explained"] == 0
    assert len(sidecar["logits"]) == 2


def test_rollout_class_out_of_range(pipeline, tmp_path, capsys):
    rc = main(["rollout", "--checkpoint", str(pipeline["ckpt_b"]),
               "--input", str(pipeline["feats"] / "features" / "h0000.fbnk"),
               "--class", "5", "--out", str(tmp_path / "m.rmap")])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_render_geometry_and_determinism(pipeline, tmp_path):
    rmap = tmp_path / "m.rmap"
    assert main(["rollout", "--checkpoint", str(pipeline["ckpt_a"]),
                 "--input", str(pipeline["feats"] / "features" / "p0001.fbnk"),
                 "--out", str(rmap)]) == 0
    png = tmp_path / "m.png"
    argv = ["render", "--spec",
            str(pipeline["feats"] / "features" / "p0001.fbnk"),
            "--map", str(rmap),
            "--alignment", str(pipeline["corpus"] / "p0001.align.json"),
            "--title", "demo", "--out", str(png)]
    assert main(argv) == 0
    first = png.read_bytes()
    assert main(argv) == 0
    assert png.read_bytes() == first
    import struct
    w, h = struct.unpack(">II", first[16:24])
    assert (w, h) == (100, 128 + 11 + 11)  # frames x (bins + strip + title)


# ----------------------------------------------------------- project / cases

def test_project_consumes_eval_embeddings(pipeline, tmp_path):
    eval_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pipeline["ckpt_a"]),
                 "--split", "train", "--features", str(pipeline["feats"]),
                 "--out", str(eval_out)]) == 0
    out = tmp_path / "proj"
    rc = main(["project", "--embeddings", str(eval_out / "embeddings.csv"),
               "--perplexity", "3", "--iterations", "260",
               "--out", str(out)])
    assert rc == 0
    with open(out / "projection.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "x", "y", "gender", "status"]
    assert len(rows) == 13
    assert (out / "projection_by_gender.png").exists()
    assert (out / "projection_by_status.png").exists()
    snapshot = json.loads((out / "project_config.json").read_text())
    assert snapshot["n"] == 12
    assert snapshot["final_kl"] >= 0.0


def test_project_perplexity_too_large_for_split(pipeline, tmp_path, capsys):
    eval_out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(pipeline["ckpt_a"]),
                 "--split", "test", "--features", str(pipeline["feats"]),
                 "--out", str(eval_out)]) == 0
    rc = main(["project", "--embeddings", str(eval_out / "embeddings.csv"),
               "--out", str(tmp_path / "proj")])
    assert rc == 1  # default perplexity 30 cannot fit 6 points
    assert "too large" in capsys.readouterr().err


def test_cases_partitions_and_renders(pipeline, tmp_path):
    out = tmp_path / "cases"
    rc = main(["cases", "--checkpoint-a", str(pipeline["ckpt_a"]),
               "--checkpoint-b", str(pipeline["ckpt_b"]),
               "--split", "test", "--features", str(pipeline["feats"]),
               "--limit", "3", "--out", str(out)])
    assert rc == 0
    with open(out / "cases.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "speaker", "gender", "status", "truth",
                       "pred_a", "pred_b", "case"]
    body = rows[1:]
    assert len(body) == 6
    for row in body:
        label = train.case_label(int(row[5]), int(row[6]), int(row[4]))
        assert row[7] == label
    counts = json.loads((out / "cases_config.json").read_text())["counts"]
    assert sum(counts.values()) == 6

    pngs = sorted(p.name for p in out.glob("*.png"))
    assert len(pngs) == 3
    for name in pngs:
        case, rest = name.split("-", 1)
        assert case in "OXAB"
        assert rest.count("_") >= 2  # speaker_gender_status
