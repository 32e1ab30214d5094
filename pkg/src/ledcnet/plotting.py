"""Figures written next to the text/CSV reports of each CLI command."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import decode_mask  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_training_curves(history, path):
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [row["train_loss"] for row in history], color="k")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_loss.set_yscale("log")
    ax_lr = ax_loss.twinx()
    ax_lr.step(epochs, [row["lr"] for row in history], where="post", color="tab:gray",
               linestyle="--", linewidth=1)
    ax_lr.set_ylabel("learning rate")
    for key, label in (("val_OA", "OA"), ("val_meanF1", "mean F1"), ("val_mIoU", "mIoU")):
        ax_metric.plot(epochs, [100 * row[key] for row in history], label=label)
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("validation (%)")
    ax_metric.set_ylim(0, 100)
    ax_metric.legend(loc="best", frameon=False)
    return _save(fig, path)


def plot_confusion_matrix(counts, class_names, path):
    counts = np.asarray(counts, dtype=np.float64)
    rows = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    n = len(class_names)
    fig, ax = plt.subplots(figsize=(1.2 * n + 2, 1.2 * n + 1.5))
    im = ax.imshow(frac, vmin=0, vmax=1, cmap="Blues")
    ax.set_xticks(range(n), class_names, rotation=45, ha="right")
    ax.set_yticks(range(n), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{100 * frac[i, j]:.1f}", ha="center", va="center",
                    color="white" if frac[i, j] > 0.5 else "black", fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_ablation(rows, path):
    labels = [r.label for r in rows]
    metrics = (("OA", lambda r: r.report.oa), ("Mean F1", lambda r: r.report.mean_f1),
               ("mIoU", lambda r: r.report.miou))
    x = np.arange(len(rows))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(9, 4))
    for k, (name, get) in enumerate(metrics):
        ax.bar(x + (k - 1) * width, [100 * get(r) for r in rows], width, label=name)
    ax.set_xticks(x, labels, rotation=15)
    ax.set_ylabel("%")
    ax.set_ylim(0, 100)
    ax.legend(frameon=False, ncol=3)
    return _save(fig, path)


def plot_mac_breakdown(per_module, path, depth=2):
    """Horizontal bars of GMACs grouped by the first ``depth`` name components."""
    groups = {}
    for name, macs in per_module.items():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + macs
    names = sorted(groups, key=groups.get)
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.2))
    ax.barh(names, [groups[n] / 1e9 for n in names], color="tab:blue")
    ax.set_xlabel("GMACs")
    return _save(fig, path)


def plot_prediction(image, index_mask, palette, path, alpha=0.5):
    rgb = decode_mask(index_mask, palette).astype(np.float64)
    overlay = (1 - alpha) * image.astype(np.float64) + alpha * rgb
    fig, axes = plt.subplots(1, 2, figsize=(10, 5))
    axes[0].imshow(image)
    axes[0].set_title("image")
    axes[1].imshow(overlay.astype(np.uint8))
    axes[1].set_title("prediction")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
