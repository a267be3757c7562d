"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 failed check. Errors are written to stderr as one JSON object; training
progress is written to stdout as one JSON record per line.
"""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import gradcheck
from .config import ConfigError, RunConfig
from .data import ConfusionMatrix, DataError, LabelMap, export_attention, format_iou_table, read_labels, read_scan, scan_files, write_attention, write_labels
from .pipeline import CheckpointError, SampleSource, dataset_frequencies, infer_points, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
BUNDLED_CONFIGS = ("default", "toy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_config(name: str) -> RunConfig:
    path = Path(name)
    if path.exists():
        return RunConfig.load(path)
    if name in BUNDLED_CONFIGS:
        import yaml

        text = resources.files("s3net.configs").joinpath(f"{name}.yaml").read_text()
        return RunConfig.from_dict(yaml.safe_load(text), Path.cwd())
    raise ConfigError(f"config not found: {name}")


def _emit(record: dict, stream=None) -> None:
    print(json.dumps(record), file=stream or sys.stdout, flush=True)


def cmd_freqs(args) -> int:
    cfg = load_config(args.config)
    label_map = LabelMap.load(cfg.label_map)
    files = scan_files(cfg.dataset_root, cfg.train_sequences)
    freqs = dataset_frequencies(SampleSource(cfg, label_map), files, cfg.network.class_count)
    out = Path(args.out or cfg.loss.frequencies or Path(cfg.output_dir) / "frequencies.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    freqs.save(out, label_map.class_names)
    _emit({"frequencies": str(out), "points": freqs.total, "scans": len(files)})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    log_file = open(args.log, "w") if args.log else None
    try:
        def record(rec):
            _emit(rec)
            if log_file:
                _emit(rec, log_file)

        train(cfg, record)
    finally:
        if log_file:
            log_file.close()
    _emit({"checkpoint": str(Path(cfg.output_dir) / "model.ckpt")})
    return EXIT_OK


def _inputs(args, cfg) -> list[tuple[Path, Path]]:
    """(scan path, output path) pairs for --scan or --sequence."""
    if args.scan:
        return [(Path(args.scan), Path(args.out))]
    files = scan_files(cfg.dataset_root, [args.sequence], require_labels=False)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [(s, out_dir / (s.stem + args.suffix)) for s, _ in files]


def cmd_infer(args) -> int:
    cfg = load_config(args.config)
    label_map = LabelMap.load(cfg.label_map)
    model = load_model(cfg, args.checkpoint)
    source = SampleSource(cfg, label_map)
    args.suffix = ".label"
    pairs = _inputs(args, cfg)
    for scan_path, out_path in pairs:
        pred = infer_points(model, source.get(scan_path, None), np.dtype(cfg.dtype))
        write_labels(out_path, label_map.to_raw(pred))
    _emit({"predictions": len(pairs), "out": args.out})
    return EXIT_OK


def _label_pairs(pred: Path, truth: Path) -> list[tuple[Path, Path]]:
    if pred.is_dir():
        preds = sorted(pred.glob("*.label"))
        if not preds:
            raise DataError(f"no .label files in {pred}")
        return [(p, truth / p.name) for p in preds]
    return [(pred, truth)]


def cmd_eval(args) -> int:
    label_map = LabelMap.load(args.label_map)
    cm = ConfusionMatrix(label_map.class_count)
    for pred_path, truth_path in _label_pairs(Path(args.pred), Path(args.labels)):
        truth = label_map.remap(read_labels(truth_path))
        pred = label_map.remap(read_labels(pred_path, truth.shape[0]))
        cm.update(pred, truth, label_map.ignore_index)
    print(format_iou_table(cm.iou(), label_map.class_names, cm.miou()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed
    if seed is None:
        seed = load_config(args.config).seed if args.config else 0
    failed = 0
    for r in gradcheck.run_suite(seed):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.name:<22} max_rel_err={r.max_error:.3e} checked={r.checked} skipped_kinks={r.skipped}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_attention(args) -> int:
    cfg = load_config(args.config)
    label_map = LabelMap.load(cfg.label_map)
    model = load_model(cfg, args.checkpoint)
    scan = read_scan(args.scan)
    sample = SampleSource(cfg, label_map).get(Path(args.scan), None)
    infer_points(model, sample, np.dtype(cfg.dtype))
    feats = model.last_decoder_features.F[sample.point_to_row]
    idx = export_attention(feats, args.fraction)
    paths = write_attention(args.out, idx, scan.points)
    _emit({"selected": int(idx.size), "points": len(scan), "files": [str(p) for p in paths]})
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .synthetic import write_street_dataset

    written = write_street_dataset(args.root, {0: args.train_scans, 8: args.val_scans}, args.seed, args.points)
    _emit({"root": args.root, "scans": len(written)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="s3net", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, required=True):
        sp.add_argument("--config", required=required, help="YAML run config, or a bundled name: " + ", ".join(BUNDLED_CONFIGS))
        return sp

    sp = with_config(sub.add_parser("freqs", help="write the class-frequency manifest"))
    sp.add_argument("--out", help="manifest path (default: loss.frequencies from the config)")
    sp.set_defaults(func=cmd_freqs)

    sp = with_config(sub.add_parser("train", help="train and write <output_dir>/model.ckpt"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--log", help="also write the JSON records to this file")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("infer", help="write per-point predictions as .label files"))
    sp.add_argument("--checkpoint", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--scan", help="single .bin scan")
    src.add_argument("--sequence", type=int, help="every scan of a sequence under dataset_root")
    sp.add_argument("--out", required=True, help="output file (--scan) or directory (--sequence)")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="per-class IoU and mIoU of predicted vs true label files")
    sp.add_argument("--pred", required=True, help=".label file or directory")
    sp.add_argument("--labels", required=True, help=".label file or directory")
    sp.add_argument("--label-map", help="remap YAML (default: bundled)")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("gradcheck", help="finite-difference gradient suite"), required=False)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)

    sp = with_config(sub.add_parser("attention", help="export the top fraction of last-decoder activations"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--scan", required=True)
    sp.add_argument("--out", required=True, help="output prefix; writes <prefix>.txt and <prefix>.xyz")
    sp.add_argument("--fraction", type=float, default=0.02)
    sp.set_defaults(func=cmd_attention)

    sp = sub.add_parser("make-toy", help="write a small synthetic dataset in SemanticKITTI layout")
    sp.add_argument("--root", default="toy-data")
    sp.add_argument("--train-scans", type=int, default=5)
    sp.add_argument("--val-scans", type=int, default=2)
    sp.add_argument("--points", type=int, default=4000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_toy)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    _emit({"error": kind, "message": message}, sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_USAGE)
    except (DataError, FileNotFoundError, ValueError) as exc:
        return _fail("data", str(exc), EXIT_DATA)
    except CheckpointError as exc:
        return _fail("check", str(exc), EXIT_CHECK)


if __name__ == "__main__":
    sys.exit(main())
