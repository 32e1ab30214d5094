"""Training, evaluation, whole-raster prediction and the decoder ablation sweep."""
import contextlib
import csv
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim import AdamW
from torch.optim.lr_scheduler import ReduceLROnPlateau
from torch.utils.data import DataLoader

from .config import ModelConfig, RunConfig, from_dict, to_dict
from .data import (DatasetManifest, LabelPalette, SegmentationDataset, TilingSpec,
                   decode_mask, normalize, read_image, stitch_tiles, tile_image, write_png)
from .decoder import DecoderOutput
from .errors import ConfigError, TrainingDiverged
from .losses import combined_loss
from .metrics import ConfusionMatrix, MetricReport
from .model import LEDCNet, save_checkpoint
from .profiler import count_params

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "lr", "train_loss", "val_OA", "val_meanF1", "val_mIoU")
ABLATION_ROWS = (
    ("Baseline", False, False),
    ("Baseline + ASPP", True, False),
    ("Baseline + OCR", False, True),
    ("Baseline + ASPP + OCR", True, True),
)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def tiling_spec(cfg: RunConfig, overlap=None) -> TilingSpec:
    return TilingSpec(tile_size=cfg.data.tile_size,
                      overlap=cfg.data.overlap if overlap is None else overlap,
                      pad_value=cfg.data.pad_value,
                      mask_pad_label=cfg.train.ignore_index)


def make_dataset(manifest, split, cfg: RunConfig, augment=False):
    return SegmentationDataset(manifest, split, tiling_spec(cfg), cfg.data.mean, cfg.data.std,
                               augment=augment)


def _check_classes(model_classes, palette: LabelPalette):
    if model_classes != len(palette):
        raise ConfigError(
            f"model predicts {model_classes} classes but the manifest palette has {len(palette)}")


def _refined(output):
    return output.refined_logits if isinstance(output, DecoderOutput) else output


def _autocast(enabled):
    if not enabled:
        return contextlib.nullcontext()
    return torch.autocast("cpu", dtype=torch.bfloat16)


@torch.no_grad()
def evaluate(model, dataset, batch_size=8, ignore_index=255, class_names=None):
    """Stream ``dataset`` through ``model`` and score the argmax predictions.

    ``model`` may be any callable mapping an image batch to logits or a
    DecoderOutput. Returns ``(MetricReport, ConfusionMatrix)``.
    """
    palette = getattr(dataset, "palette", None)
    names = class_names or (palette.names if palette is not None else None)
    num_classes = getattr(model, "num_classes", None) or len(names)
    if palette is not None:
        _check_classes(num_classes, palette)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    cm = ConfusionMatrix(num_classes)
    try:
        for images, targets in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            logits = _refined(model(images))
            cm.update(logits.argmax(dim=1), targets, ignore_index)
    finally:
        if was_training:
            model.train()
    return cm.report(names), cm


@dataclass
class TrainResult:
    history: list
    best_checkpoint: Path
    last_checkpoint: Path
    best_miou: float


def _append_log(path, row):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow(row)


def train(model: LEDCNet, manifest: DatasetManifest, cfg: RunConfig, out_dir, quiet=False):
    """Fit ``model`` on the train split, validating and checkpointing every epoch.

    Writes ``train_log.csv``, ``best.npz`` (by val mIoU) and ``last.npz`` into
    ``out_dir``.
    """
    tc = cfg.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _check_classes(model.num_classes, manifest.palette)
    train_set = make_dataset(manifest, "train", cfg, augment=cfg.data.augment)
    val_set = make_dataset(manifest, "val", cfg)

    generator = torch.Generator().manual_seed(tc.seed)
    loader = DataLoader(train_set, batch_size=tc.batch_size, shuffle=True, generator=generator,
                        num_workers=tc.num_workers, drop_last=False)
    optimizer = AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    scheduler = ReduceLROnPlateau(optimizer, mode="max", factor=tc.factor, patience=tc.patience,
                                  min_lr=tc.min_lr)
    log_path = out_dir / "train_log.csv"
    best_path, last_path = out_dir / "best.npz", out_dir / "last.npz"
    history, best = [], -math.inf

    for epoch in range(tc.epochs):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        total, seen = 0.0, 0
        for batch_index, (images, targets) in enumerate(loader):
            with _autocast(tc.mixed_precision):
                out = model(images)
                out = DecoderOutput(out.coarse_logits.float(), out.refined_logits.float())
                loss = combined_loss(out, targets, tc.focal, tc.aux_weight, tc.ignore_index)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, batch_index, loss.item())
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * images.shape[0]
            seen += images.shape[0]

        report, _ = evaluate(model, val_set, tc.batch_size, tc.ignore_index)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen,
               "val_OA": report.oa, "val_meanF1": report.mean_f1, "val_mIoU": report.miou}
        history.append(row)
        _append_log(log_path, row)
        monitored = {"val_mIoU": report.miou, "val_OA": report.oa,
                     "val_meanF1": report.mean_f1}[tc.monitor]
        scheduler.step(monitored)

        extra = {"epoch": epoch, "val_mIoU": report.miou, "palette": manifest.palette.to_json()}
        save_checkpoint(model, last_path, extra)
        if report.miou > best:
            best = report.miou
            save_checkpoint(model, best_path, extra)
        if not quiet:
            log.info("epoch %d lr %.2e loss %.4f val OA %.4f mF1 %.4f mIoU %.4f",
                     epoch, lr, row["train_loss"], report.oa, report.mean_f1, report.miou)
    return TrainResult(history, best_path, last_path, best)


@torch.no_grad()
def predict_probabilities(model, image, spec: TilingSpec, mean=(0.5, 0.5, 0.5),
                          std=(0.5, 0.5, 0.5), blend="average", batch_size=4):
    """Class probabilities (H, W, C) for a whole uint8 (H, W, 3) raster."""
    was_training = model.training
    model.eval()
    tiles = tile_image(image, spec)
    probs = []
    try:
        for start in range(0, len(tiles), batch_size):
            chunk = tiles[start:start + batch_size]
            batch = torch.stack([normalize(t, mean, std) for t, _ in chunk])
            p = torch.softmax(_refined(model(batch)), dim=1).permute(0, 2, 3, 1)
            probs.extend((arr, origin) for arr, (_, origin) in zip(p.numpy(), chunk))
    finally:
        model.train(was_training)
    return stitch_tiles(probs, image.shape[:2], blend)


def predict(model, image_path, spec: TilingSpec, palette: LabelPalette, out_dir,
            mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), blend="average"):
    """Segment one raster and write ``<stem>_index.png`` and ``<stem>_rgb.png``.

    Argmax ties resolve to the lower class index. Returns
    ``(index_mask, index_path, rgb_path)``.
    """
    image_path = Path(image_path)
    _check_classes(model.num_classes, palette)
    image = read_image(image_path)
    probs = predict_probabilities(model, image, spec, mean, std, blend)
    index = probs.argmax(axis=-1).astype(np.uint8)
    out_dir = Path(out_dir)
    index_path = out_dir / f"{image_path.stem}_index.png"
    rgb_path = out_dir / f"{image_path.stem}_rgb.png"
    write_png(index_path, index)
    write_png(rgb_path, decode_mask(index, palette))
    return index, index_path, rgb_path


@dataclass
class AblationRow:
    label: str
    use_aspp: bool
    use_ocr: bool
    params: int
    report: MetricReport


def run_ablation(manifest: DatasetManifest, cfg: RunConfig, out_dir):
    """Train and evaluate the four ASPP/OCR toggle combinations in turn."""
    rows = []
    out_dir = Path(out_dir)
    for label, use_aspp, use_ocr in ABLATION_ROWS:
        run_cfg = RunConfig(model=_with_toggles(cfg, use_aspp, use_ocr), train=cfg.train,
                            data=cfg.data)
        seed_everything(cfg.train.seed)
        model = LEDCNet(run_cfg.model)
        slug = label.lower().replace(" + ", "_").replace(" ", "_")
        train(model, manifest, run_cfg, out_dir / slug, quiet=True)
        report, _ = evaluate(model, make_dataset(manifest, "val", run_cfg),
                             cfg.train.batch_size, cfg.train.ignore_index)
        rows.append(AblationRow(label, use_aspp, use_ocr, count_params(model), report))
        log.info("%s: mIoU %.4f", label, report.miou)
    return rows


def _with_toggles(cfg: RunConfig, use_aspp, use_ocr):
    model_cfg = from_dict(ModelConfig, to_dict(cfg.model))
    model_cfg.use_aspp, model_cfg.use_ocr = use_aspp, use_ocr
    return model_cfg


def format_ablation(rows) -> str:
    header = ("Method", "Overall Accuracy", "Mean F1-Score", "mIoU", "Params")
    body = [(r.label, f"{100 * r.report.oa:.2f}", f"{100 * r.report.mean_f1:.2f}",
             f"{100 * r.report.miou:.2f}", str(r.params)) for r in rows]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = [" | ".join([row[0].ljust(widths[0])] +
                        [c.rjust(w) for c, w in zip(row[1:], widths[1:])])
             for row in [header, *body]]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
