"""AUROC, FPR at a target TPR, and parameter sweeps.

Scores are oriented so that larger means more OOD. For FPR@TPR the InD class
is the accepted (positive) class, the convention of the OpenOOD benchmark:
a sample is accepted when its score is <= the threshold.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError


def _split(scores, is_ood) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    if scores.shape != is_ood.shape:
        raise ConfigError("scores and labels differ in length")
    if not np.all(np.isfinite(scores)):
        raise ConfigError("scores must be finite")
    ind, ood = scores[~is_ood], scores[is_ood]
    if len(ind) == 0 or len(ood) == 0:
        raise ConfigError("need at least one InD and one OOD sample")
    return ind, ood


def auroc(scores, is_ood) -> float:
    """P(score_OOD > score_InD) + P(tie) / 2 over all cross pairs."""
    ind, ood = _split(scores, is_ood)
    s = np.sort(ind)
    below = np.searchsorted(s, ood, side="left")
    below_eq = np.searchsorted(s, ood, side="right")
    # twice the Mann-Whitney U as an exact integer
    u2 = int(2 * below.sum() + (below_eq - below).sum())
    return u2 / (2 * len(ind) * len(ood))


def fpr_at_tpr(scores, is_ood, tpr: float = 0.95) -> tuple[float, float]:
    """(FPR, threshold) where threshold is the ceil(tpr * n_ind)-th smallest InD score."""
    ind, ood = _split(scores, is_ood)
    if not 0 < tpr <= 1:
        raise ConfigError(f"tpr must lie in (0, 1], got {tpr}")
    if len(ind) < 20:
        warnings.warn(f"only {len(ind)} InD samples; the {tpr:.0%} quantile is coarse")
    k = math.ceil(round(tpr * len(ind), 9))
    thr = float(np.sort(ind)[k - 1])
    return float(np.mean(ood <= thr)), thr


@dataclass
class EvalReport:
    auroc: float
    fpr_at_95_tpr: float
    threshold: float
    n_ind: int
    n_ood: int
    label: str = ""
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def evaluate(scores, is_ood, label: str = "", **extra) -> EvalReport:
    a = auroc(scores, is_ood)
    f, thr = fpr_at_tpr(scores, is_ood)
    is_ood = np.asarray(is_ood, bool)
    return EvalReport(a, f, thr, int((~is_ood).sum()), int(is_ood.sum()), label, dict(extra))


def sweep(param: str, values: Iterable, runner: Callable[[object], EvalReport]) -> list[dict]:
    rows = []
    for v in values:
        rep = runner(v)
        row = {param: v}
        row.update(rep.row())
        rows.append(row)
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    keys = list(rows[0])
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def summary_text(rep: EvalReport) -> str:
    return (
        "# OOD is the positive class for scores (larger = more OOD).\n"
        "# FPR@95: threshold accepts >= 95% of InD (score <= threshold); FPR = OOD accepted.\n"
        f"label: {rep.label}\n"
        f"n_ind: {rep.n_ind}\n"
        f"n_ood: {rep.n_ood}\n"
        f"auroc: {rep.auroc:.6f}\n"
        f"fpr_at_95_tpr: {rep.fpr_at_95_tpr:.6f}\n"
        f"threshold: {rep.threshold!r}\n"
    )
