"""Figures written next to the CSV reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io_utils import atomic_write_bytes  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    buf = io.BytesIO()
    # no software/date metadata, so reruns give identical bytes
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def _col(rows, key):
    return np.array([r[key] for r in rows], dtype=float)


def acc_vs_t(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = _col(rows, "t")
    ax.plot(t, _col(rows, "acc_raw_xt"), "o-", label="noisy x_t")
    ax.plot(t, _col(rows, "acc_xhat0"), "s-", label="clean estimate")
    ax.set_xlabel("timestep t")
    ax.set_ylabel("classifier accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def degradation_curves(rows, path):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    t = _col(rows, "t")
    for ax, m, label in ((axes[0], "psnr", "PSNR (dB)"), (axes[1], "fsd", "FSD")):
        ax.plot(t, _col(rows, f"{m}_ind"), label="InD")
        ax.plot(t, _col(rows, f"{m}_ood"), "--", label="OOD")
        ax.set_xlabel("timestep t")
        ax.set_ylabel(f"median {label}")
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def sweep(rows, key, path, xlabel=None):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(_col(rows, key), _col(rows, "auroc"), "o-")
    ax.set_xlabel(xlabel or key)
    ax.set_ylabel("AUROC")
    fig.tight_layout()
    return _save(fig, path)


def cleangrad_ablation(rows, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    names = [f"x0={'on' if r['use_xhat0'] else 'off'}\ncut={'on' if r['use_cutout'] else 'off'}"
             for r in rows]
    ax.bar(range(len(rows)), _col(rows, "auroc"))
    ax.set_xticks(range(len(rows)), names)
    ax.set_ylabel("AUROC")
    lo = min(_col(rows, "auroc"))
    ax.set_ylim(max(0.0, lo - 0.1), 1.0)
    fig.tight_layout()
    return _save(fig, path)


def aes_threshold_table(rows, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for metric in dict.fromkeys(r["metric"] for r in rows):
        sub = [r for r in rows if r["metric"] == metric]
        ax.plot(_col(sub, "factor"), _col(sub, "auroc"), "o-", label=metric)
    ax.set_xlabel("threshold / calibrated threshold")
    ax.set_ylabel("AUROC")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def roc_points(scores, is_ood):
    """(fpr, tpr) with OOD as the positive class, one point per distinct score."""
    scores = np.asarray(scores, float)
    is_ood = np.asarray(is_ood, bool)
    thr = np.unique(scores)[::-1]
    tpr = [0.0] + [float(np.mean(scores[is_ood] >= s)) for s in thr]
    fpr = [0.0] + [float(np.mean(scores[~is_ood] >= s)) for s in thr]
    return np.array(fpr), np.array(tpr)


def eval_figures(named_scores: dict[str, np.ndarray], is_ood, roc_path, hist_path):
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for name, s in named_scores.items():
        fpr, tpr = roc_points(s, is_ood)
        ax.plot(fpr, tpr, label=name)
    ax.plot([0, 1], [0, 1], ":", color="grey")
    ax.set_xlabel("false positive rate (InD flagged)")
    ax.set_ylabel("true positive rate (OOD flagged)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, roc_path)

    final = np.asarray(next(iter(named_scores.values())), float)
    is_ood = np.asarray(is_ood, bool)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    bins = np.linspace(final.min(), final.max() + 1e-12, 30)
    ax.hist(final[~is_ood], bins=bins, alpha=0.6, label="InD")
    ax.hist(final[is_ood], bins=bins, alpha=0.6, label="OOD")
    ax.set_xlabel("final score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    return _save(fig, hist_path)
