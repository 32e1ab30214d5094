"""Command-line entry point: ``ledcnet {train,eval,predict,profile,ablate}``.

Exit codes: 0 success, 1 validation error (one JSON line on stderr),
2 runtime failure.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import (PRESETS, RunConfig, apply_overrides, load_config, parse_override, preset,
                     save_config)
from .data import DatasetManifest, LabelPalette, read_image
from .errors import LEDCNetError
from .model import LEDCNet, load_checkpoint
from .profiler import count_macs, format_table, profile
from .train import (evaluate, format_ablation, make_dataset, predict, run_ablation,
                    seed_everything, tiling_spec, train)

log = logging.getLogger("ledcnet")

COMMANDS = ("train", "eval", "predict", "profile", "ablate")


class UsageError(LEDCNetError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; route it through run() instead
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--preset", choices=sorted(PRESETS), default="base")
    common.add_argument("--manifest", type=Path, help="dataset manifest (JSON)")
    common.add_argument("--checkpoint", type=Path, help="model archive (.npz)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="overrides train.seed")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="config override, repeatable")

    parser = _Parser(prog="ledcnet", description="LEDCNet segmentation toolkit")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}",
                                parser_class=_Parser)
    sub.required = True
    sub.add_parser("train", parents=[common], help="fit a model on the manifest's train split")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p = sub.add_parser("predict", parents=[common], help="segment a whole raster")
    p.add_argument("--image", type=Path)
    p = sub.add_parser("profile", parents=[common], help="params, MACs, size and FPS")
    p.add_argument("--input-size", type=int, default=512)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--element-bytes", type=int, default=4)
    p.add_argument("--no-fps", action="store_true", help="skip the throughput measurement")
    sub.add_parser("ablate", parents=[common], help="train the four ASPP/OCR toggles")
    return parser


def effective_config(args) -> RunConfig:
    """Preset, then config file, then --set pairs, then --seed."""
    cfg = preset(args.preset)
    if args.config is not None:
        cfg = load_config(args.config, cfg)
    pairs = dict(parse_override(text) for text in args.overrides)
    if args.seed is not None:
        pairs["train.seed"] = str(args.seed)
    return apply_overrides(cfg, pairs) if pairs else cfg


def _require(args, *names):
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            raise UsageError(f"missing {name}_path")
        if not value.exists():
            raise UsageError(f"{name} not found: {value}")


def _manifest(args):
    _require(args, "manifest")
    return DatasetManifest.load(args.manifest)


def _load_model(args, cfg):
    _require(args, "checkpoint")
    model, extra = load_checkpoint(args.checkpoint)
    cfg.model = model.config
    return model, extra


def cmd_train(args, cfg):
    manifest = _manifest(args)
    seed_everything(cfg.train.seed)
    if args.checkpoint is not None:
        model, _ = _load_model(args, cfg)
    else:
        model = LEDCNet(cfg.model)
    save_config(cfg, args.out / "effective.cfg")
    result = train(model, manifest, cfg, args.out)
    plotting.plot_training_curves(result.history, args.out / "training_curves.png")
    last = result.history[-1]
    print(f"best_val_mIoU = {100 * result.best_miou:.2f}")
    print(f"last_train_loss = {last['train_loss']:.6f}")
    print(f"best_checkpoint = {result.best_checkpoint}")


def cmd_eval(args, cfg):
    model, _ = _load_model(args, cfg)
    manifest = _manifest(args)
    save_config(cfg, args.out / "effective.cfg")
    dataset = make_dataset(manifest, args.split, cfg)
    report, cm = evaluate(model, dataset, cfg.train.batch_size, cfg.train.ignore_index)
    text = report.to_text()
    (args.out / "metrics.txt").write_text(text)
    names = manifest.palette.names
    with open(args.out / "confusion.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["truth\\pred", *names])
        for name, row in zip(names, cm.counts):
            writer.writerow([name, *row.tolist()])
    plotting.plot_confusion_matrix(cm.counts, names, args.out / "confusion.png")
    sys.stdout.write(text)


def cmd_predict(args, cfg):
    model, extra = _load_model(args, cfg)
    _require(args, "image")
    if args.manifest is not None:
        palette = _manifest(args).palette
    elif "palette" in extra:
        palette = LabelPalette.from_json(extra["palette"])
    else:
        palette = LabelPalette()
    save_config(cfg, args.out / "effective.cfg")
    spec = tiling_spec(cfg, overlap=cfg.data.predict_overlap)
    index, index_path, rgb_path = predict(model, args.image, spec, palette, args.out,
                                          cfg.data.mean, cfg.data.std, cfg.data.blend)
    overlay = args.out / f"{args.image.stem}_overlay.png"
    plotting.plot_prediction(read_image(args.image), index, palette, overlay)
    counts = np.bincount(index.ravel(), minlength=len(palette))
    for name, n in zip(palette.names, counts):
        print(f"pixels.{name} = {int(n)}")
    print(f"index_mask = {index_path}")
    print(f"rgb_mask = {rgb_path}")


def cmd_profile(args, cfg):
    if args.checkpoint is not None:
        model, _ = _load_model(args, cfg)
        label = args.checkpoint.stem
    else:
        model = LEDCNet(cfg.model)
        label = args.preset
    save_config(cfg, args.out / "effective.cfg")
    model.eval()
    shape = (args.batch, cfg.model.in_channels, args.input_size, args.input_size)
    report = profile(model, shape, args.warmup, args.iters, args.element_bytes,
                     measure_speed=not args.no_fps)
    rows = {label: report}
    doc = json.loads(report.to_json())
    base_model = preset("base").model
    if cfg.model != base_model:
        base = profile(LEDCNet(base_model), shape, element_bytes=args.element_bytes,
                       measure_speed=False)
        rows["base"] = base
        doc["base_params"] = base.params
        doc["params_ratio_to_base"] = report.params / base.params
    _, per_module = count_macs(model, shape, breakdown=True)
    plotting.plot_mac_breakdown(per_module, args.out / "mac_breakdown.png")
    table = format_table(rows)
    (args.out / "profile.json").write_text(json.dumps(doc, indent=2) + "\n")
    (args.out / "profile.txt").write_text(table)
    print(json.dumps(doc))
    sys.stdout.write(table)


def cmd_ablate(args, cfg):
    manifest = _manifest(args)
    save_config(cfg, args.out / "effective.cfg")
    rows = run_ablation(manifest, cfg, args.out)
    table = format_ablation(rows)
    (args.out / "ablation.txt").write_text(table)
    with open(args.out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "use_aspp", "use_ocr", "OA", "meanF1", "mIoU", "params"])
        for r in rows:
            writer.writerow([r.label, r.use_aspp, r.use_ocr, f"{r.report.oa:.6f}",
                             f"{r.report.mean_f1:.6f}", f"{r.report.miou:.6f}", r.params])
    plotting.plot_ablation(rows, args.out / "ablation.png")
    sys.stdout.write(table)


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "profile": cmd_profile, "ablate": cmd_ablate}


def _fail(code, kind, reason):
    print(json.dumps({"error": kind, "reason": reason}), file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, "usage", str(exc))
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = effective_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](args, cfg)
    except ValueError as exc:
        # config, shape, data and parameter errors are all ValueErrors
        return _fail(1, "validation", str(exc))
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        return _fail(2, type(exc).__name__, str(exc))
    return 0


def main():
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
