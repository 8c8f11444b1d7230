"""Report figures rendered next to the delimited outputs.

Every reporting command pairs its text/CSV artifact with a PNG: training
writes a loss curve, evaluation a metric bar chart, and the ablation
harness one line chart per grid. PNG metadata is pinned so reruns produce
identical bytes.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_BAR_METRICS = ("bleu1", "bleu2", "bleu3", "bleu4", "cider", "rouge_l")
_PNG_META = {"Software": "convcap"}


def _save(fig, path):
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(history, path):
    """history: training log records with epoch/mean_loss (+ dev_loss)."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = [r["epoch"] for r in history]
    ax.plot(epochs, [r["mean_loss"] for r in history], label="train", color="#1f6fb2")
    if history and "dev_loss" in history[0]:
        ax.plot(epochs, [r["dev_loss"] for r in history], label="dev", color="#c44e52")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean masked cross-entropy")
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def metric_bars(report, path, title=""):
    """Bar chart of one MetricReport."""
    data = report.as_dict()
    labels = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "CIDEr", "ROUGE-L"]
    values = [data[m] for m in _BAR_METRICS]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.bar(labels, values, color="#1f6fb2")
    ax.set_ylabel("score")
    if title:
        ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def ablation_chart(grid_name, cells, path):
    """cells: [(label, MetricReport-or-None)] in grid order; failed cells
    are skipped on the chart but keep their slot on the x axis."""
    labels = [str(label) for label, _ in cells]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for metric, shade in zip(_BAR_METRICS, ("#9ecae1", "#6baed6", "#4292c6",
                                            "#1f6fb2", "#c44e52", "#55a868")):
        xs, ys = [], []
        for x, (_, report) in enumerate(cells):
            if report is not None:
                xs.append(x)
                ys.append(report.as_dict()[metric])
        ax.plot(xs, ys, marker="o", label=metric, color=shade)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel(grid_name)
    ax.set_ylabel("score")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    _save(fig, path)
