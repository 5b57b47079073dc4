"""Matplotlib figures for training logs and metric reports."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .io import atomic_write  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path):
    buf = io.BytesIO()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return Path(path)


def _series(records, key):
    pts = [(r["step"], r[key]) for r in records if not r.get("skipped") and r.get(key) is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_training_curves(log, path):
    """Losses, sampled/greedy rewards and learning rate against the step index."""
    recs = log.records
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
        ax = axes[0]
        for key, label in (("L_a", "$L_a$"), ("L_s", "$L_s$"), ("L", "$L$")):
            x, y = _series(recs, key)
            ax.plot(x, y, label=label, lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()

        ax = axes[1]
        for key, label, style, color in (
            ("r_sem_sampled", "semantic (sampled)", "-", "C0"),
            ("r_sem_greedy", "semantic (greedy)", "--", "C0"),
            ("r_attr_sampled", "attribute (sampled)", "-", "C1"),
            ("r_attr_greedy", "attribute (greedy)", "--", "C1"),
        ):
            x, y = _series(recs, key)
            ax.plot(x, y, style, color=color, label=label, lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("reward")
        ax.legend(fontsize=7)

        ax = axes[2]
        x = [r["step"] for r in recs]
        ax.plot(x, [r["lr"] for r in recs], color="k", lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel("learning rate")
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_report(report, path):
    """Bar charts of the n-gram metrics and the diversity/CLIP-S columns."""
    d = report.to_dict()
    supervised = [("B@1", d["bleu1"]), ("B@2", d["bleu2"]), ("B@3", d["bleu3"]), ("B@4", d["bleu4"]),
                  ("ROUGE-L", d["rouge_l"])]
    other = [("CIDEr", d["cider"]), ("CLIP-S", d["clip_s"]), ("%Novel", d["pct_novel"]),
             ("%Unique", d["pct_unique"]), ("Length", d["mean_length"]), ("Vocab", d["vocab"])]
    other = [(k, v) for k, v in other if v is not None]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(10, 3.2), gridspec_kw={"width_ratios": [5, len(other)]})
        a.bar([k for k, _ in supervised], [100 * v for _, v in supervised], color="0.35")
        a.set_ylabel("score x 100")
        b.bar([k for k, _ in other], [v for _, v in other], color="0.65")
        b.tick_params(axis="x", labelrotation=30)
        fig.tight_layout()
        return _save(fig, path)
