"""Pipeline executable: one subcommand per stage, JSON config, flag overrides.

Exit codes: 0 success, 1 validation problem (bad flags, missing or malformed
inputs), 2 runtime failure. Every subcommand that writes artifacts also drops
a resolved-config snapshot next to them, and reruns with the same config and
seed produce byte-identical outputs.
"""

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import corpus, dsp, model, project, rollout, train, viz

DEFAULT_MAX_SECONDS = 2.0
DEFAULT_RATIOS = (0.8, 0.1, 0.1)


class Parser(argparse.ArgumentParser):
    """argparse, but flag mistakes exit 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _pick(*values):
    for v in values:
        if v is not None:
            return v
    return None


def _write_snapshot(out_dir: Path, name: str, resolved: dict) -> None:
    """Provenance record for the run; content is deterministic."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / name, "w") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


# -- feature-set layout ---------------------------------------------------------
# featurize writes a self-contained directory:
#   manifest.csv, splits.csv, stats.json, features/<id>.fbnk (normalized, padded)

def _read_splits(path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["id", "split"]:
        raise ValueError(f"{path}: expected header id,split")
    out = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2 or row[1] not in corpus.SPLIT_NAMES:
            raise ValueError(f"{path} line {lineno}: bad split row {row}")
        out[row[0]] = row[1]
    return out


def _load_feature_split(features_dir, split_name: str):
    """Records plus (spectrogram, label) samples for one split, manifest order."""
    d = Path(features_dir)
    if split_name not in corpus.SPLIT_NAMES:
        raise ValueError(f"unknown split {split_name!r}; "
                         f"expected one of {', '.join(corpus.SPLIT_NAMES)}")
    manifest = corpus.load_manifest(d / "manifest.csv")
    assignment = _read_splits(d / "splits.csv")
    records, samples = [], []
    for rec in manifest.records:
        if assignment.get(rec.id) != split_name:
            continue
        spec = dsp.load_spectrogram(d / "features" / f"{rec.id}.fbnk")
        records.append(rec)
        samples.append((spec, corpus.binary_label(rec)))
    if not records:
        raise ValueError(f"split {split_name!r} has no records in {d}")
    return records, samples


def _feature_frames(features_dir) -> int:
    d = Path(features_dir)
    manifest = corpus.load_manifest(d / "manifest.csv")
    first = d / "features" / f"{manifest.records[0].id}.fbnk"
    return dsp.load_spectrogram(first).padded_frames


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = corpus.SynthConfig(healthy=args.n_healthy, pathological=args.n_patho,
                             seconds=args.seconds)
    out = Path(args.out)
    manifest = corpus.synth_corpus(cfg, args.seed, out)
    _write_snapshot(out, "synth_config.json", {
        "command": "synth", "out": str(out), "seed": args.seed,
        **asdict(cfg)})
    print(f"wrote {len(manifest)} recordings to {out}")
    return 0


def cmd_featurize(args) -> int:
    cfg = _load_json_config(args.config)
    max_seconds = float(_pick(args.max_seconds, cfg.get("max_seconds"),
                              DEFAULT_MAX_SECONDS))
    seed = int(_pick(args.seed, cfg.get("seed"), 0))
    ratios = tuple(cfg.get("ratios", DEFAULT_RATIOS))
    manifest = corpus.load_manifest(args.manifest)
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)

    specs = {}
    for rec in manifest.records:
        wave = dsp.resample(dsp.decode_wav(rec.audio_path), dsp.SAMPLE_RATE)
        specs[rec.id] = dsp.log_mel_spectrogram(wave)
    split = corpus.stratified_split(manifest, ratios=ratios, seed=seed)
    for note in split.warnings:
        print(f"warning: {note}", file=sys.stderr)
    train_specs = [specs[r.id] for r in manifest.records
                   if split.assignment[r.id] == "train"]
    if not train_specs:
        raise ValueError("train split is empty; nothing to compute stats on")
    stats = dsp.compute_stats(train_specs)
    for rec in manifest.records:
        normed = dsp.normalize_spectrogram(specs[rec.id], stats)
        padded = dsp.pad_or_truncate(normed, max_seconds)
        dsp.save_spectrogram(padded, out / "features" / f"{rec.id}.fbnk")

    corpus.write_manifest(manifest, out / "manifest.csv")
    with open(out / "splits.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "split"])
        for rec in manifest.records:
            writer.writerow([rec.id, split.assignment[rec.id]])
    with open(out / "stats.json", "w") as f:
        json.dump({"mean": stats.mean, "std": stats.std}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    _write_snapshot(out, "featurize_config.json", {
        "command": "featurize", "manifest": str(args.manifest),
        "out": str(out), "max_seconds": max_seconds, "seed": seed,
        "ratios": list(ratios), "mean": stats.mean, "std": stats.std})
    counts = {name: sum(1 for v in split.assignment.values() if v == name)
              for name in corpus.SPLIT_NAMES}
    print(f"featurized {len(manifest)} recordings to {out} "
          f"(train {counts['train']}, dev {counts['dev']}, test {counts['test']})")
    return 0


def _resolve_train_config(args, cfg):
    preset = _pick(args.preset, cfg.get("preset"))
    if preset is None:
        raise ValueError("no preset given (--preset or config key 'preset')")
    if preset not in train.PRESETS:
        raise ValueError(f"unknown preset {preset!r}; "
                         f"expected one of {', '.join(sorted(train.PRESETS))}")
    resolved = train.PRESETS[preset]
    overrides = dict(cfg.get("train", {}))
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides.get("class_weight") is not None:
        overrides["class_weight"] = tuple(overrides["class_weight"])
    try:
        return replace(resolved, **overrides), preset
    except TypeError as e:
        raise ValueError(f"bad train config override: {e}") from None


def _resolve_model_config(cfg, features_dir) -> model.ModelConfig:
    fields = {"embed_dim": 64, "layers": 4, "heads": 4, "patch": 16,
              "stride": 16, "mel_bins": 128, "num_classes": 2,
              "max_frames": _feature_frames(features_dir)}
    overrides = dict(cfg.get("model", {}))
    unknown = set(overrides) - set(fields) - {"backbone_trainable"}
    if unknown:
        raise ValueError(f"unknown model config keys: {sorted(unknown)}")
    fields.update(overrides)
    return model.ModelConfig(**fields)


def cmd_train(args) -> int:
    cfg = _load_json_config(args.config)
    features = _pick(args.features, cfg.get("features"))
    if features is None:
        raise ValueError("no feature directory (--features or config key "
                         "'features')")
    train_cfg, preset = _resolve_train_config(args, cfg)
    model_cfg = _resolve_model_config(cfg, features)
    model_cfg = replace(model_cfg, backbone_trainable=train_cfg.backbone_trainable)
    _, train_samples = _load_feature_split(features, "train")
    _, dev_samples = _load_feature_split(features, "dev")

    params = model.init_params(model_cfg, seed=train_cfg.seed)
    result = train.train(params, train_cfg, train_samples, dev_samples, model_cfg)
    for row in result.history:
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.4f}  "
              f"dev UAR {row['dev_uar']:.4f}  dev AUC {row['dev_auc']:.4f}  "
              f"lr {row['lr']:.6f}")
    print(f"stopped by {result.stopped_by}; best epoch {result.best_epoch} "
          f"(dev UAR {result.best_uar:.4f})")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(result.params, model_cfg, out / "model.astc")
    with open(out / "history.json", "w") as f:
        json.dump({"history": result.history, "stopped_by": result.stopped_by,
                   "best_epoch": result.best_epoch, "best_uar": result.best_uar},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    _write_snapshot(out, "train_config.json", {
        "command": "train", "preset": preset, "features": str(features),
        "out": str(out), "train": asdict(train_cfg),
        "model": asdict(model_cfg)})
    print(f"checkpoint written to {out / 'model.astc'}")
    return 0


def _forward_split(params, model_cfg, samples):
    """Logits and CLS representations for every sample, one pass each."""
    n = len(samples)
    logits = np.empty((n, model_cfg.num_classes))
    reps = np.empty((n, model_cfg.embed_dim))
    for i, (spec, _) in enumerate(samples):
        trace = model.forward(spec, params, model_cfg)
        logits[i] = trace.logits
        reps[i] = trace.cls_representation
    return logits, reps


def cmd_eval(args) -> int:
    cfg = _load_json_config(args.config)
    features = _pick(args.features, cfg.get("features"))
    if features is None:
        raise ValueError("no feature directory (--features or config key "
                         "'features')")
    params, model_cfg = model.load_checkpoint(args.checkpoint)
    records, samples = _load_feature_split(features, args.split)
    truth = np.array([label for _, label in samples])
    logits, reps = _forward_split(params, model_cfg, samples)
    pred = logits.argmax(axis=1)
    scores = train.scores_from_logits(logits)
    metrics = train.evaluate(truth, pred, scores)

    name = _pick(args.name, Path(args.checkpoint).stem)
    print(f"\t{name}")
    print(f"Unweighted Average Recall (UAR)\t{metrics.uar:.4f}")
    print(f"Area Under the Curve (AUC)\t{metrics.auc:.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as f:
            json.dump({"uar": metrics.uar, "auc": metrics.auc,
                       "per_class_recall": metrics.per_class_recall,
                       "confusion": metrics.confusion.tolist(),
                       "split": args.split, "n": len(records)},
                      f, indent=2, sort_keys=True)
            f.write("\n")
        with open(out / "embeddings.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id", "gender", "status"]
                            + [f"e{j}" for j in range(reps.shape[1])])
            for rec, row in zip(records, reps):
                writer.writerow([rec.id, rec.gender, rec.status]
                                + [f"{v:.8e}" for v in row])
        _write_snapshot(out, "eval_config.json", {
            "command": "eval", "checkpoint": str(args.checkpoint),
            "split": args.split, "features": str(features), "out": str(out)})
    return 0


def cmd_rollout(args) -> int:
    params, model_cfg = model.load_checkpoint(args.checkpoint)
    spec = dsp.load_spectrogram(args.input)
    class_index = None
    if args.cls not in (None, "pred"):
        class_index = int(args.cls)
        if not 0 <= class_index < model_cfg.num_classes:
            raise ValueError(f"class {class_index} out of range "
                             f"[0, {model_cfg.num_classes})")
    explanation = rollout.explain(spec, params, model_cfg, class_index)
    rollout.save_map(explanation.map, args.out, meta={
        "command": "rollout", "checkpoint": str(args.checkpoint),
        "input": str(args.input),
        "predicted_class": explanation.predicted_class,
        "class_explained": explanation.class_explained,
        "logits": explanation.logits})
    print(f"predicted class {explanation.predicted_class}, explained class "
          f"{explanation.class_explained}; map written to {args.out}")
    return 0


def cmd_render(args) -> int:
    spec = dsp.load_spectrogram(args.spec)
    final = rollout.load_map(args.map)
    rmap = rollout.RelevanceMap(patch_scores=np.zeros(0), grid=(0, 0),
                                pixels=final, final=final)
    image = viz.compose(spec, rmap)
    if args.alignment:
        image = viz.overlay(image, viz.load_alignment(args.alignment))
    if args.title:
        image = viz.add_title(image, args.title)
    viz.write_image(image, args.out)
    print(f"rendered {image.width}x{image.height} image to {args.out}")
    return 0


def _read_embeddings_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:3] != ["id", "gender", "status"]:
        raise ValueError(f"{path}: expected header id,gender,status,e0,...")
    dim = len(rows[0]) - 3
    if dim < 1:
        raise ValueError(f"{path}: no embedding columns")
    metas, vectors = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise ValueError(f"{path} line {lineno}: expected {len(rows[0])} "
                             f"fields, got {len(row)}")
        metas.append((row[0], row[1], row[2]))
        vectors.append([float(v) for v in row[3:]])
    return metas, np.array(vectors, dtype=np.float64)


def cmd_project(args) -> int:
    metas, vectors = _read_embeddings_csv(args.embeddings)
    projection = project.tsne(vectors, perplexity=args.perplexity,
                              iterations=args.iterations,
                              learning_rate=args.learning_rate, seed=args.seed)
    out = Path(args.out)
    paths = project.export_projection(projection, metas, out)
    _write_snapshot(out, "project_config.json", {
        "command": "project", "embeddings": str(args.embeddings),
        "out": str(out), "perplexity": args.perplexity,
        "iterations": args.iterations, "learning_rate": args.learning_rate,
        "seed": args.seed,
        "n": len(metas), "final_kl": projection.final_kl,
        "post_exaggeration_kl": projection.post_exaggeration_kl})
    print(f"projected {len(metas)} points; final KL {projection.final_kl:.4f} "
          f"(post-exaggeration {projection.post_exaggeration_kl:.4f})")
    print(f"wrote {paths['csv']}, {paths['by_gender']}, {paths['by_status']}")
    return 0


def _prediction_word(label: int) -> str:
    return "healthy" if label == 0 else "patho"


def _alignment_for(rec):
    candidate = Path(str(Path(rec.audio_path).with_suffix("")) + ".align.json")
    return candidate if candidate.exists() else None


def _case_panels(rec, spec, explanations, names, case):
    """Spectrogram panel plus one relevance panel per model, equal heights."""
    zero = rollout.RelevanceMap(patch_scores=np.zeros(0), grid=(0, 0),
                                pixels=np.zeros_like(explanations[0].map.final),
                                final=np.zeros_like(explanations[0].map.final))
    alignment_path = _alignment_for(rec)
    alignment = viz.load_alignment(alignment_path) if alignment_path else None

    def panel(rmap, title):
        img = viz.compose(spec, rmap)
        if alignment is not None:
            img = viz.overlay(img, alignment)
        return viz.add_title(img, title)

    big = f"{case}-{rec.speaker_id}_{rec.gender}_{rec.status}"
    panels = [panel(zero, big)]
    for expl, name in zip(explanations, names):
        panels.append(panel(expl.map,
                            f"{name}-pred_{_prediction_word(expl.predicted_class)}"))
    image = panels[0]
    for extra in panels[1:]:
        image = viz.side_by_side(image, extra)
    return image


def cmd_cases(args) -> int:
    cfg = _load_json_config(args.config)
    features = _pick(args.features, cfg.get("features"))
    if features is None:
        raise ValueError("no feature directory (--features or config key "
                         "'features')")
    params_a, cfg_a = model.load_checkpoint(args.checkpoint_a)
    params_b, cfg_b = model.load_checkpoint(args.checkpoint_b)
    records, samples = _load_feature_split(features, args.split)
    truth = np.array([label for _, label in samples])
    logits_a, _ = _forward_split(params_a, cfg_a, samples)
    logits_b, _ = _forward_split(params_b, cfg_b, samples)
    pred_a = logits_a.argmax(axis=1)
    pred_b = logits_b.argmax(axis=1)
    labels = [train.case_label(int(a), int(b), int(t))
              for a, b, t in zip(pred_a, pred_b, truth)]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cases.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["id", "speaker", "gender", "status", "truth",
                         "pred_a", "pred_b", "case"])
        for rec, t, a, b, case in zip(records, truth, pred_a, pred_b, labels):
            writer.writerow([rec.id, rec.speaker_id, rec.gender, rec.status,
                             int(t), int(a), int(b), case])

    name_a = Path(args.checkpoint_a).stem
    name_b = Path(args.checkpoint_b).stem
    limit = len(records) if args.limit is None else max(0, args.limit)
    used = set()
    rendered = 0
    for rec, (spec, _), case in zip(records, samples, labels):
        if rendered >= limit:
            break
        expl_a = rollout.explain(spec, params_a, cfg_a)
        expl_b = rollout.explain(spec, params_b, cfg_b)
        image = _case_panels(rec, spec, [expl_a, expl_b], [name_a, name_b], case)
        stem = f"{case}-{rec.speaker_id}_{rec.gender}_{rec.status}"
        if stem in used:
            stem = f"{stem}-{rec.id}"
        used.add(stem)
        viz.write_image(image, out / f"{stem}.png")
        rendered += 1

    counts = {c: labels.count(c) for c in ("O", "X", "A", "B")}
    _write_snapshot(out, "cases_config.json", {
        "command": "cases", "checkpoint_a": str(args.checkpoint_a),
        "checkpoint_b": str(args.checkpoint_b), "split": args.split,
        "features": str(features), "out": str(out),
        "counts": counts, "rendered": rendered})
    print(f"cases on {len(records)} samples: "
          f"O {counts['O']}, X {counts['X']}, A {counts['A']}, B {counts['B']}; "
          f"{rendered} figure(s) rendered to {out}")
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser() -> Parser:
    parser = Parser(prog="voicemap",
                    description="Spectrogram-transformer pipeline for voice "
                                "pathology screening and explanation.")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-healthy", type=int, default=100)
    p.add_argument("--n-patho", type=int, default=100)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("featurize", help="extract, normalize, split features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-seconds", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a classifier from a preset")
    p.add_argument("--preset", choices=sorted(train.PRESETS))
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--features")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--features")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--name")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="explain one input as a relevance map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--class", dest="cls")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("render", help="compose a relevance map over features")
    p.add_argument("--spec", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--alignment")
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("project", help="t-SNE projection of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("cases", help="four-way agreement study of two checkpoints")
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--features")
    p.add_argument("--config")
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cases)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, FileNotFoundError,
            IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - boundary: anything else is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
