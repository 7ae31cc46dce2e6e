"""Command-line front end.

Each subcommand writes its outputs atomically and records a JSON manifest
next to them; ``uatriage replay MANIFEST`` re-runs the recorded command.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .deep_taylor import heatmap_pgm, relevance, relevance_csv
from .fileio import PGMError, atomic_write_bytes, atomic_write_text, fmt, read_pgm, staged_directory
from .mc_uncertainty import (DEFAULT_BINS, DEFAULT_PASSES, histogram, histogram_csv, mc_predict,
                             sample_csv, summarize)
from .network import (BadMagicError, ShapeMismatchError, TruncatedFileError, VersionMismatchError,
                      WeightFileError, build_reference_model, forward, load_weights, save_weights)
from .synthgen import SynthSpec, generate_dataset, write_dataset
from .trainer import TrainConfig, TrainingError, load_image_dir, train
from .triage import (DEFAULT_PERCENTILE, DEFAULT_WINDOW, CalibrationError, ThresholdTable,
                     calibrate_thresholds, evaluate_with_referral, removal_curve)

log = logging.getLogger("uatriage")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- manifests ---------------------------------------------------------------

def _manifest(args, inputs, outputs) -> str:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "manifest", "verbose")}
    doc = {
        "command": args.command,
        "parameters": params,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": params.get("seed"),
        "version": __version__,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write_manifest(args, path: Path, inputs, outputs) -> None:
    atomic_write_text(path, _manifest(args, inputs, outputs))


def _sibling_manifest(args, out: Path) -> Path:
    return Path(args.manifest) if args.manifest else out.with_name(out.name + ".manifest.json")


# -- helpers -----------------------------------------------------------------

def _load_model(path):
    return load_weights(path)


def _load_image(path, config):
    image = read_pgm(path)
    if image.shape != config.input_shape:
        raise CliError("shape_mismatch", f"image {path} has shape {image.shape}, model expects {config.input_shape}")
    return image


def _summaries(config, weights, data, passes, seed):
    out = []
    for n, image in enumerate(data.images):
        out.append(summarize(mc_predict(config, weights, image, passes, seed)))
        log.debug("mc %d/%d", n + 1, len(data))
    return out


def _csv_list(text: str, kind=int) -> tuple:
    try:
        return tuple(kind(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated values, got {text!r}") from exc


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    spec = SynthSpec(image_size=args.size, class_counts=args.counts, noise_sigma=args.sigma,
                     ambiguous_fraction=args.ambiguous, seed=args.seed)
    out = Path(args.out)
    ds = generate_dataset(spec)
    write_dataset(ds, out)
    manifest = Path(args.manifest) if args.manifest else out / "manifest.json"
    _write_manifest(args, manifest, [], [out])


def cmd_train(args) -> None:
    data = load_image_dir(args.data)
    if len(data) == 0:
        raise CliError("empty_dataset", f"no PGM images under {args.data}")
    shapes = {img.shape for img in data.images}
    if len(shapes) != 1:
        raise CliError("shape_mismatch", f"images have differing shapes: {sorted(shapes)}")
    config = build_reference_model(shapes.pop(), data.class_names)
    tc_ = TrainConfig(epochs=args.epochs, learning_rate=args.lr, momentum=args.momentum,
                      batch_size=args.batch_size, seed=args.seed, augmentation_limit=args.augment_limit,
                      validation_fraction=args.val_fraction)
    weights, history = train(config, data, tc_)
    out = Path(args.out)
    hist_path = Path(args.history) if args.history else out.with_name(out.stem + ".history.csv")
    save_weights(config, weights, out)
    atomic_write_text(hist_path, history.to_csv())
    _write_manifest(args, _sibling_manifest(args, out), [args.data], [out, hist_path])


def cmd_predict(args) -> None:
    config, weights = _load_model(args.model)
    result = forward(config, weights, _load_image(args.image, config))
    k = int(np.argmax(result.probs))
    lines = [f"predicted,{config.class_names[k]}", "class_name,probability"]
    lines += [f"{n},{fmt(p)}" for n, p in zip(config.class_names, result.probs)]
    sys.stdout.write("\n".join(lines) + "\n")
    if args.manifest:
        _write_manifest(args, Path(args.manifest), [args.model, args.image], [])


def cmd_mc_predict(args) -> None:
    config, weights = _load_model(args.model)
    sample = mc_predict(config, weights, _load_image(args.image, config), args.passes, args.seed)
    out = Path(args.out)
    atomic_write_text(out, sample_csv(sample, config.class_names))
    outputs = [out]
    if args.hist:
        atomic_write_text(Path(args.hist), histogram_csv(histogram(sample, args.bins), config.class_names))
        outputs.append(Path(args.hist))
    s = summarize(sample)
    sys.stdout.write(f"predicted,{config.class_names[s.predicted_class]}\nconfidence,{fmt(s.confidence)}\n")
    _write_manifest(args, _sibling_manifest(args, out), [args.model, args.image], outputs)


def cmd_explain(args) -> None:
    config, weights = _load_model(args.model)
    target = None
    if args.target is not None:
        if args.target in config.class_names:
            target = config.class_names.index(args.target)
        else:
            try:
                target = int(args.target)
            except ValueError:
                raise CliError("bad_class", f"unknown class {args.target!r}") from None
    amap = relevance(config, weights, _load_image(args.image, config), target)
    out = Path(args.out)
    atomic_write_bytes(out, heatmap_pgm(amap))
    outputs = [out]
    if args.raw:
        atomic_write_text(Path(args.raw), relevance_csv(amap))
        outputs.append(Path(args.raw))
    _write_manifest(args, _sibling_manifest(args, out), [args.model, args.image], outputs)


def cmd_calibrate(args) -> None:
    config, weights = _load_model(args.model)
    data = load_image_dir(args.data, config.class_names)
    summaries = _summaries(config, weights, data, args.passes, args.seed)
    table = calibrate_thresholds(summaries, data.labels, config.class_names, args.percentile, args.group_by)
    out = Path(args.out)
    atomic_write_text(out, table.to_text())
    _write_manifest(args, _sibling_manifest(args, out), [args.model, args.data], [out])


def cmd_triage(args) -> None:
    config, weights = _load_model(args.model)
    table = ThresholdTable.from_text(Path(args.thresholds).read_text())
    if table.class_names != config.class_names:
        raise CliError("shape_mismatch", f"threshold classes {table.class_names} != model classes {config.class_names}")
    data = load_image_dir(args.data, config.class_names)
    summaries = _summaries(config, weights, data, args.passes, args.seed)
    report = evaluate_with_referral(summaries, data.labels, table)
    names = config.class_names
    rows = ["filename,true_class,predicted_class,confidence,threshold,decision"]
    for fname, label, outcome in zip(data.names, data.labels, report.outcomes):
        s = outcome.summary
        rows.append(f"{fname},{names[label]},{names[s.predicted_class]},{fmt(s.confidence)},"
                    f"{fmt(outcome.threshold_applied)},{'refer' if outcome.referred else 'accept'}")
    out = Path(args.out)
    with staged_directory(out) as tmp:
        (tmp / "report.csv").write_text(report.to_csv())
        (tmp / "decisions.csv").write_text("\n".join(rows) + "\n")
        if not args.manifest:
            (tmp / "manifest.json").write_text(_manifest(args, [args.model, args.data, args.thresholds], [out]))
    if args.manifest:
        _write_manifest(args, Path(args.manifest), [args.model, args.data, args.thresholds], [out])


def cmd_curve(args) -> None:
    config, weights = _load_model(args.model)
    data = load_image_dir(args.data, config.class_names)
    summaries = _summaries(config, weights, data, args.passes, args.seed)
    curve = removal_curve(summaries, data.labels, args.window)
    out = Path(args.out)
    atomic_write_text(out, curve.to_csv())
    _write_manifest(args, _sibling_manifest(args, out), [args.model, args.data], [out])


def cmd_replay(args) -> None:
    doc = json.loads(Path(args.manifest_file).read_text())
    params = dict(doc["parameters"])
    if args.out:
        params["out"] = args.out
    params["manifest"] = None
    params["verbose"] = args.verbose
    replay_args = argparse.Namespace(**params)
    if replay_args.command == "replay":
        raise CliError("invalid", "cannot replay a replay manifest")
    COMMANDS[replay_args.command](replay_args)


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "mc-predict": cmd_mc_predict,
    "explain": cmd_explain, "calibrate": cmd_calibrate, "triage": cmd_triage, "curve": cmd_curve,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uatriage", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--manifest", help="manifest path (default: next to the output)")
        return sp

    s = add("synth", "generate the synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--counts", type=_csv_list, default=(20, 25, 40, 50, 90))
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--ambiguous", type=float, default=0.2)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = add("train", "train the reference model on a class-per-directory dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int, default=45)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--augment-limit", type=float, default=0.10)
    s.add_argument("--val-fraction", type=float, default=0.10)
    s.add_argument("--history")

    s = add("predict", "deterministic class probabilities for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)

    s = add("mc-predict", "Monte-Carlo dropout distribution for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--hist")
    s.add_argument("--bins", type=int, default=DEFAULT_BINS)

    s = add("explain", "Deep Taylor heatmap for one image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--raw")
    s.add_argument("--class", dest="target", help="class name or index (default: predicted)")

    s = add("calibrate", "per-class referral thresholds from training images")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    s.add_argument("--percentile", type=float, default=DEFAULT_PERCENTILE)
    s.add_argument("--group-by", choices=("predicted", "true"), default="predicted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("triage", "accept/refer a test set and report metrics")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--thresholds", required=True)
    s.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = add("curve", "accuracy as the least confident images are removed")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    s.add_argument("--passes", type=int, default=DEFAULT_PASSES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    s.add_argument("manifest_file")
    s.add_argument("--out", help="redirect the primary output")
    return p


_ERROR_CODES = [
    (CliError, None), (BadMagicError, "bad_magic"), (VersionMismatchError, "version_mismatch"),
    (TruncatedFileError, "truncated"), (ShapeMismatchError, "shape_mismatch"),
    (WeightFileError, "bad_weights"), (PGMError, "bad_image"), (CalibrationError, "calibration"),
    (TrainingError, "training"), (FileNotFoundError, "not_found"), (FileExistsError, "exists"),
    (ValueError, "invalid"), (OSError, "io"),
]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one stderr line
        code = "internal"
        for kind, name in _ERROR_CODES:
            if isinstance(exc, kind):
                code = exc.code if isinstance(exc, CliError) else name
                break
        message = " ".join(str(exc).split())
        sys.stderr.write(f"uatriage: error: {code}: {message}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
