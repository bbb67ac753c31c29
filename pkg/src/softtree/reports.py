"""Rendered reports: training curves, evaluation charts, inspection sheets.

Figures are written next to the line-delimited outputs (metrics.jsonl,
eval.json, report.txt) so every run directory is self-describing.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_training_curves(records: list, path) -> None:
    """Loss and accuracy per epoch, with stage boundaries marked."""
    if not records:
        return
    xs = np.arange(1, len(records) + 1)
    loss = [r["train_loss"] for r in records]
    train_acc = [r["train_top1"] for r in records]
    val_acc = [r["val_top1"] for r in records]
    stage_changes = [i for i in range(1, len(records))
                     if records[i]["stage"] != records[i - 1]["stage"]]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(xs, loss, color="tab:red")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(xs, train_acc, label="train top-1")
    ax2.plot(xs, val_acc, label="val top-1")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("top-1 accuracy")
    ax2.set_ylim(0, 1.02)
    ax2.legend(loc="lower right")
    for ax in (ax1, ax2):
        for b in stage_changes:
            ax.axvline(b + 0.5, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_eval_figure(report: dict, class_names: list, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    per_class = report["per_class_top1"]
    names = class_names if len(class_names) == len(per_class) else \
        [str(i) for i in range(len(per_class))]
    ax1.bar(range(len(per_class)), per_class, color="tab:blue")
    ax1.set_xticks(range(len(per_class)), names, rotation=45, ha="right")
    ax1.set_ylim(0, 1.02)
    ax1.set_title(f"per-class top-1 (overall {report['top1']:.3f})")
    leaves = report["per_leaf_top1"]
    ax2.bar(range(1, len(leaves) + 1), leaves, color="tab:green")
    ax2.set_xlabel("leaf")
    ax2.set_ylim(0, 1.02)
    ax2.set_title("per-leaf top-1")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_metrics_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_eval_report(report: dict, class_names: list, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.json", "w", encoding="utf-8") as f:
        json.dump({**report, "class_names": list(class_names)}, f,
                  sort_keys=True, indent=2)
        f.write("\n")
    save_eval_figure(report, list(class_names), out_dir / "eval.png")


def write_inspection_report(path, prediction, class_names: list) -> None:
    """Structured text: gates, per-node accumulated probabilities, leaf
    distributions, and the final distribution, for a single sample."""
    lines = ["# inspection report"]
    final = prediction.final.data[0]
    top = int(np.argmax(final))
    name = class_names[top] if top < len(class_names) else str(top)
    lines.append(f"predicted = {top} ({name}) confidence = {final[top]!r}")
    for (k, i), g in sorted(prediction.gates.items()):
        lines.append(f"gate {k} {i} = {float(g.data[0])!r}")
    for (k, i), r in sorted(prediction.path_probs.items()):
        lines.append(f"r {k} {i} = {float(r.data[0])!r}")
    for j, leaf in enumerate(prediction.leaf_probs, start=1):
        dist = ",".join(repr(float(v)) for v in leaf.data[0])
        lines.append(f"leaf {j} dist = {dist}")
    lines.append("final = " + ",".join(repr(float(v)) for v in final))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_inspection_figure(image: np.ndarray, heatmaps: dict, prediction,
                           path) -> None:
    """Source image plus one panel per site heatmap, gate/r bars below."""
    n_maps = len(heatmaps)
    cols = max(3, min(4, n_maps + 1))
    rows_maps = int(np.ceil((n_maps + 1) / cols))
    fig = plt.figure(figsize=(3 * cols, 3 * (rows_maps + 1)))
    grid = fig.add_gridspec(rows_maps + 1, cols)

    ax = fig.add_subplot(grid[0, 0])
    ax.imshow(np.transpose(image, (1, 2, 0)))
    ax.set_title("input")
    ax.axis("off")
    for idx, (site, hm) in enumerate(heatmaps.items(), start=1):
        ax = fig.add_subplot(grid[idx // cols, idx % cols])
        ax.imshow(hm.values, cmap="magma", vmin=0.0, vmax=1.0)
        title = site + (" (degenerate)" if hm.degenerate else "")
        ax.set_title(title, fontsize=9)
        ax.axis("off")

    ax = fig.add_subplot(grid[rows_maps, :])
    h = max(k for k, _ in prediction.path_probs)
    leaf_r = [float(prediction.path_probs[(h, i)].data[0])
              for i in range(1, 2 ** (h - 1) + 1)]
    ax.bar(range(1, len(leaf_r) + 1), leaf_r, color="tab:purple")
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("leaf")
    ax.set_ylabel("path probability")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
