"""Command-line entry point.

Subcommands: analyze | synth | train | eval | predict | report.
Exit codes: 0 success, 1 config/usage error, 2 data/checkpoint error,
3 training divergence. Every run writes a run_manifest.json into its output
directory listing the produced artifacts. The default output root is taken
from $ROADSEG_OUTPUT_ROOT (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import evaluation as ev
from . import training as tr
from .errors import (
    CheckpointError,
    ConfigError,
    DivergenceError,
    EmptyCorpusError,
    EmptyEvaluationError,
    FormatError,
    GenerationError,
    MaskShapeError,
    RoadSegError,
    ShapeError,
    UnknownClassError,
)
from .model import build_model, load_checkpoint, predict_mask, save_checkpoint
from .schema import colorize_mask, default_schema, schema_from_json
from .synthetic import default_road_profile, generate_corpus

_USAGE_ERRORS = (ConfigError,)
_DATA_ERRORS = (
    FormatError,
    MaskShapeError,
    UnknownClassError,
    EmptyCorpusError,
    CheckpointError,
    GenerationError,
    ShapeError,
    EmptyEvaluationError,
    FileNotFoundError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _default_out(command: str) -> Path:
    root = Path(os.environ.get("ROADSEG_OUTPUT_ROOT", "runs"))
    return root / command


def _load_schema(path: str | None):
    return schema_from_json(path) if path else default_schema()


class _Manifest:
    """Collects artifact paths and writes run_manifest.json on success."""

    def __init__(self, command: str, out_dir: Path, args: argparse.Namespace):
        self.data = {
            "command": command,
            "arguments": {k: str(v) for k, v in vars(args).items() if k != "func" and v is not None},
            "config_path": str(getattr(args, "config", "") or ""),
            "seed": getattr(args, "seed", None),
            "output_dir": str(out_dir),
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "artifacts": [],
        }
        self.out_dir = out_dir
        out_dir.mkdir(parents=True, exist_ok=True)

    def add(self, *paths) -> None:
        self.data["artifacts"].extend(str(p) for p in paths)

    def write(self) -> Path:
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(self.data, indent=2) + "\n", encoding="utf-8")
        return path


def cmd_analyze(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("analyze")
    manifest = _Manifest("analyze", out_dir, args)
    corpus = []
    violations = []
    for image_path, mask_path in ds.read_manifest(args.manifest):
        try:
            corpus.append(ds.load_sample(image_path, mask_path, schema))
        except RoadSegError as exc:
            violations.append(ds.Violation(str(image_path), "load_failure", str(exc)))
    report = ds.validate_corpus(corpus, schema)
    violations.extend(report.violations)
    if violations:
        for v in violations:
            print(f"violation [{v.kind}] {v.sample_id}: {v.message}", file=sys.stderr)
        print(f"{len(violations)} violation(s) found", file=sys.stderr)
        return 2
    dist = ds.compute_class_distribution(corpus, schema)
    csv_path = out_dir / "distribution.csv"
    json_path = out_dir / "distribution.json"
    ds.write_distribution_report(dist, schema, csv_path, json_path)
    weights = {
        scheme: tr.compute_class_weights(dist, scheme).weights.tolist()
        for scheme in tr.WEIGHT_SCHEMES
    }
    weights_path = out_dir / "weights.json"
    weights_path.write_text(json.dumps(weights, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "weights.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "name"] + list(tr.WEIGHT_SCHEMES))
        for c in schema.classes:
            writer.writerow([c.id, c.name] + [repr(weights[s][c.id]) for s in tr.WEIGHT_SCHEMES])
    manifest.add(csv_path, json_path, weights_path, out_dir / "weights.csv")
    manifest.write()
    for c in schema.classes:
        print(f"{c.name}: {dist.fractions[c.id] * 100:.2f}%")
    return 0


def cmd_synth(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("synth")
    manifest = _Manifest("synth", out_dir, args)
    profile = default_road_profile(schema).fractions
    width, height, noise = 64, 64, 1.0
    if args.recipe:
        try:
            recipe = json.loads(Path(args.recipe).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"recipe config {args.recipe} is not valid JSON: {exc}") from exc
        width = int(recipe.get("width", width))
        height = int(recipe.get("height", height))
        noise = float(recipe.get("noise_level", noise))
        if "profile" in recipe:
            by_name = dict(recipe["profile"])
            unknown = set(by_name) - set(schema.names)
            if unknown:
                raise ConfigError(f"profile names not in schema: {sorted(unknown)}")
            profile = np.array([float(by_name.get(name, 0.0)) for name in schema.names])
    samples = generate_corpus(
        args.n, profile, args.seed, width=width, height=height, noise_level=noise, schema=schema
    )
    pairs = []
    for i, sample in enumerate(samples):
        image_path = out_dir / f"image_{i:04d}.png"
        mask_path = out_dir / f"mask_{i:04d}.png"
        ds.save_sample(sample, image_path, mask_path, schema)
        pairs.append((image_path, mask_path))
    manifest_path = out_dir / "corpus.manifest"
    ds.write_manifest(pairs, manifest_path)
    palette_path = out_dir / "palette.json"
    ds.write_palette(schema, palette_path)
    manifest.add(manifest_path, palette_path, *(p for pair in pairs for p in pair))
    manifest.write()
    print(f"wrote {len(samples)} samples to {out_dir}")
    return 0


def cmd_train(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("train")
    manifest = _Manifest("train", out_dir, args)
    if args.config:
        config = tr.load_run_config(args.config, final=args.final)
    elif args.preset:
        config = tr.preset_configuration(args.preset, final=args.final)
    else:
        raise ConfigError("train needs --config or --preset")
    corpus = ds.load_manifest_corpus(args.manifest, schema)
    result = tr.run_configuration(config, corpus, args.seed, schema)

    for i, ckpt in enumerate(result.stage_checkpoints):
        path = out_dir / f"checkpoint_stage{i + 1}.pt"
        save_checkpoint(ckpt, path)
        manifest.add(path)
    final_path = out_dir / "checkpoint.pt"
    save_checkpoint(result.checkpoint, final_path)
    history_path = out_dir / "history.csv"
    result.history.to_csv(history_path, schema)
    written = ev.render_report(result.report, schema, out_dir, include_class_mean=args.class_mean)
    history_fig = out_dir / "history.png"
    _render_history_figure(result.history, history_fig)
    config_path = out_dir / "config.json"
    config_path.write_text(
        json.dumps(tr.configuration_to_dict(config), indent=2) + "\n", encoding="utf-8"
    )
    manifest.add(final_path, history_path, history_fig, config_path, *written.values())
    manifest.write()
    print(f"total validation accuracy: {result.report.total_accuracy:.4f}")
    return 0


def _render_history_figure(history: tr.TrainingHistory, path: Path) -> None:
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    xs = range(1, len(history.records) + 1)
    ax_loss.plot(xs, [r.train_loss for r in history.records], label="train")
    ax_loss.plot(xs, [r.val_loss for r in history.records], label="validation")
    ax_loss.set_xlabel("epoch (all stages)")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(xs, [r.val_accuracy for r in history.records])
    ax_acc.set_xlabel("epoch (all stages)")
    ax_acc.set_ylabel("validation accuracy")
    boundaries = [i for i in range(1, len(history.records)) if history.records[i].epoch == 1]
    for b in boundaries:
        ax_loss.axvline(b + 0.5, color="gray", linestyle=":")
        ax_acc.axvline(b + 0.5, color="gray", linestyle=":")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _model_from_checkpoint(path: str):
    checkpoint = load_checkpoint(path)
    model = build_model(checkpoint.model_config)
    from .model import transfer_parameters

    transfer_parameters(checkpoint, model)
    return model, checkpoint


def cmd_eval(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("eval")
    manifest = _Manifest("eval", out_dir, args)
    model, checkpoint = _model_from_checkpoint(args.checkpoint)
    corpus = ds.load_manifest_corpus(args.manifest, schema)
    if not corpus:
        raise EmptyCorpusError(f"manifest {args.manifest} lists no samples")
    matrix = ev.ConfusionMatrix(np.zeros((schema.num_classes, schema.num_classes), dtype=np.int64))
    for sample in corpus:
        pred = predict_mask(model, sample.image[None], checkpoint.normalization)[0]
        matrix = matrix.merge(ev.accumulate_confusion(pred, sample.mask, schema.num_classes))
    name = checkpoint.training_meta.get("stage", "")
    report = ev.derive_metrics(matrix, config_name=str(name).split("/")[0])
    written = ev.render_report(report, schema, out_dir, include_class_mean=args.class_mean)
    manifest.add(*written.values())
    manifest.write()
    print(f"total accuracy: {report.total_accuracy:.4f}")
    return 0


def cmd_predict(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("predict")
    manifest = _Manifest("predict", out_dir, args)
    model, checkpoint = _model_from_checkpoint(args.checkpoint)
    image = np.asarray(Image.open(args.image).convert("RGB"))
    pred = predict_mask(model, image[None], checkpoint.normalization)[0]
    stem = Path(args.image).stem
    mask_path = out_dir / f"{stem}_mask.png"
    ds.save_mask(pred, mask_path, schema)
    colored = colorize_mask(pred, schema)
    overlay = (0.5 * image.astype(np.float64) + 0.5 * colored).astype(np.uint8)
    overlay_path = out_dir / f"{stem}_overlay.png"
    Image.fromarray(overlay).save(overlay_path)
    manifest.add(mask_path, overlay_path)
    manifest.write()
    print(f"wrote {mask_path} and {overlay_path}")
    return 0


def cmd_report(args) -> int:
    schema = _load_schema(args.schema)
    out_dir = Path(args.out) if args.out else _default_out("report")
    manifest = _Manifest("report", out_dir, args)
    report = ev.read_report_json(args.metrics)
    written = ev.render_report(report, schema, out_dir, include_class_mean=args.class_mean)
    manifest.add(*written.values())
    manifest.write()
    print(f"re-rendered report into {out_dir}")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="roadseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="class distribution + suggested weights")
    p.add_argument("--manifest", required=True, help="corpus manifest (image<TAB>mask lines)")
    p.add_argument("--schema", help="schema JSON (default: built-in 12 classes)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("-n", type=int, required=True, help="number of samples")
    p.add_argument("--recipe", help="recipe JSON (width/height/noise_level/profile)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run a training configuration")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--preset", help=f"preset name, one of {', '.join(tr.PRESET_NAMES)}")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--final", action="store_true", help="final mode: DW presets run 100 epochs/stage")
    p.add_argument("--class-mean", action="store_true", help="also report class-mean accuracy")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--class-mean", action="store_true", help="also report class-mean accuracy")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="re-render report files from metrics JSON")
    p.add_argument("--metrics", required=True, help="metrics.json from train/eval")
    p.add_argument("--class-mean", action="store_true")
    p.add_argument("--schema", help="schema JSON")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
