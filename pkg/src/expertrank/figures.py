"""Figure rendering for reports.

Every CLI stage that writes a delimited output also drops a PNG next to it:
loss curves for training runs, a rank histogram for evaluation reports, and
metric-vs-value curves for sweeps. Rendering failures never abort a run.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_pretrain_losses(log_path, out_path) -> Path:
    """Loss components per step from a pretrain log."""
    steps, wm, ql, vs, total = [], [], [], [], []
    with open(log_path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            steps.append(int(cells[0]))
            wm.append(float(cells[1]))
            ql.append(float(cells[2]))
            vs.append(float(cells[3]))
            total.append(float(cells[4]))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, wm, label="word mlm", lw=1)
    ax.plot(steps, ql, label="question mlm", lw=1)
    ax.plot(steps, vs, label="vote", lw=1)
    ax.plot(steps, total, label="total", lw=1.5, color="k")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, out_path)


def plot_finetune_curve(log_path, out_path) -> Path:
    """Train loss and validation MRR per epoch from a finetune log."""
    epochs, loss, mrr = [], [], []
    with open(log_path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            cells = line.rstrip("\n").split("\t")
            epochs.append(int(cells[0]))
            loss.append(float(cells[1]))
            mrr.append(float(cells[2]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, loss, marker="o", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, mrr, marker="s", color="tab:green", label="val MRR")
    ax2.set_ylabel("validation MRR")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="best")
    return _save(fig, out_path)


def plot_rank_histogram(ranks, out_path, max_rank: int = 20) -> Path:
    """Distribution of the ground-truth expert's rank."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(ranks), bins=[b + 0.5 for b in range(max_rank + 1)],
            edgecolor="black", linewidth=0.5)
    ax.set_xlabel("rank of ground-truth expert")
    ax.set_ylabel("questions")
    ax.set_xticks(range(1, max_rank + 1, 2))
    return _save(fig, out_path)


def plot_sweep(values, metric_rows: dict[str, list[float]], param_name: str, out_path) -> Path:
    """One line per metric across a swept parameter."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in metric_rows.items():
        ax.plot(values, ys, marker="o", label=name)
    ax.set_xlabel(param_name)
    ax.set_ylabel("metric value")
    ax.legend()
    return _save(fig, out_path)
