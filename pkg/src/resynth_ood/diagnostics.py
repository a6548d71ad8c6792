"""Diagnostic curves and ablation tables over a trained run.

Each function returns a list of row dicts (one CSV row each). Detection runs
go through a memoising :class:`Runner`, so cells shared between tables, such
as the default classifier-path config, are computed once.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .aes import AesConfig, calibrate_thresholds
from .config import RunConfig
from .data import Dataset
from .detection import DetectionRecord, DetectorConfig, Models, detect
from .diffusion import invert_trajectory, make_tau
from .errors import ConfigError
from .evaluation import evaluate
from .kvconfig import to_flat
from .models import accuracy_vs_timestep, eps_model, predict
from .pipeline import EvalSet, eval_set
from .rng import RngStream
from .similarity import metric_value


class Runner:
    """Runs detection on a fixed evaluation set, caching by detector config."""

    def __init__(self, models: Models, es: EvalSet):
        self.models = models
        self.es = es
        self._cache: dict[str, list[DetectionRecord]] = {}

    def records(self, dcfg: DetectorConfig) -> list[DetectionRecord]:
        key = repr(sorted(to_flat(dcfg).items()))
        if key not in self._cache:
            es = self.es
            self._cache[key] = detect(dcfg, self.models, es.pixels, es.ids, es.labels, es.is_ood)
        return self._cache[key]

    def report_row(self, dcfg: DetectorConfig, **tags) -> dict:
        recs = self.records(dcfg)
        ok = [r for r in recs if r.valid]
        if not ok:
            raise ConfigError("every detection record is invalid")
        ood = np.array([r.truth == "OOD" for r in ok])
        rep = evaluate(np.array([r.final for r in ok]), ood)
        t_stop = np.array([r.t_stop for r in ok])
        row = dict(tags)
        row.update(auroc=rep.auroc, fpr_at_95_tpr=rep.fpr_at_95_tpr,
                   median_t_stop_ind=float(np.median(t_stop[~ood])),
                   median_t_stop_ood=float(np.median(t_stop[ood])),
                   n_ind=rep.n_ind, n_ood=rep.n_ood, n_invalid=len(recs) - len(ok))
        return row


def make_runner(cfg: RunConfig, models: Models, ds: Dataset) -> Runner:
    return Runner(models, eval_set(ds, cfg.eval.split, cfg.eval.max_ind, cfg.eval.max_ood))


def _guided(cfg: RunConfig, **kw) -> DetectorConfig:
    return replace(cfg.detector, guidance=replace(cfg.detector.guidance, **kw))


# ---------------------------------------------------------------- curves


def acc_vs_t(cfg: RunConfig, models: Models, ds: Dataset) -> list[dict]:
    """Classifier accuracy on noisy x_t versus its clean estimate, per level."""
    es = eval_set(ds, cfg.eval.split, cfg.eval.max_ind, 0)
    grid = [t for t in cfg.diagnose.acc_grid if 0 <= t <= models.schedule.T]
    rng = RngStream(cfg.detector.seed, ("diagnose", "acc_vs_t"))
    out = {}
    for mode in ("raw_xt", "xhat0"):
        out[mode] = dict(accuracy_vs_timestep(models.classifier, models.score, es.pixels,
                                              es.labels, models.schedule, grid, mode, rng))
    return [{"t": t, "acc_raw_xt": out["raw_xt"][t], "acc_xhat0": out["xhat0"][t]} for t in grid]


def degradation_curves(cfg: RunConfig, models: Models, ds: Dataset) -> list[dict]:
    """Median PSNR / FSD of x-hat_0 against the input along a full inversion."""
    es = eval_set(ds, cfg.eval.split, cfg.eval.max_ind, cfg.eval.max_ood)
    sched = models.schedule
    tau = make_tau(sched.T, cfg.detector.resolved_tau_len)
    x = torch.as_tensor(es.pixels)
    inv = invert_trajectory(x, eps_model(models.score), sched, tau, refine=cfg.detector.refine)
    ood = es.is_ood
    pred = predict(models.classifier, x)
    rows = []
    for p in inv.points:
        row = {"t": p.t}
        for m in ("psnr", "fsd"):
            v = metric_value(m, models.classifier, x, p.xhat0, cfg.detector.fsd)
            row[f"{m}_ind"] = float(np.median(v[~ood]))
            row[f"{m}_ood"] = float(np.median(v[ood])) if ood.any() else float("nan")
        agree = predict(models.classifier, p.xhat0) == pred
        row["label_kept_ind"] = float(agree[~ood].mean())
        row["label_kept_ood"] = float(agree[ood].mean()) if ood.any() else float("nan")
        rows.append(row)
    return rows


# ---------------------------------------------------------------- ablations


def cutpoint_sweep(cfg: RunConfig, runner: Runner) -> list[dict]:
    rows = []
    for c in cfg.diagnose.cutpoints:
        dcfg = _guided(cfg, mode="classifier_free", cam_cutpoint=float(c))
        rows.append(runner.report_row(dcfg, cam_cutpoint=float(c)))
    return rows


def steps_sweep(cfg: RunConfig, runner: Runner) -> list[dict]:
    rows = []
    for n in cfg.diagnose.steps:
        dcfg = replace(_guided(cfg, mode="classifier_free"), tau_len=int(n))
        rows.append(runner.report_row(dcfg, tau_len=int(n)))
    return rows


def cleangrad_ablation(cfg: RunConfig, runner: Runner) -> list[dict]:
    rows = []
    for xhat0 in (True, False):
        for cut in (True, False):
            dcfg = _guided(cfg, mode="classifier", use_xhat0=xhat0, use_cutout=cut)
            rows.append(runner.report_row(dcfg, use_xhat0=xhat0, use_cutout=cut))
    return rows


def aes_threshold_table(cfg: RunConfig, runner: Runner, ds: Dataset) -> list[dict]:
    """Thresholds calibrated on InD validation data, then scaled by each factor."""
    models = runner.models
    val = eval_set(ds, "val", cfg.eval.max_ind, 0)
    sched = models.schedule
    tau = make_tau(sched.T, cfg.detector.resolved_tau_len)
    rows = []
    for metric in ("psnr", "fsd"):
        (thr,), t_ref, _ = calibrate_thresholds(
            torch.as_tensor(val.pixels), val.labels, eps_model(models.score), sched, tau,
            models.classifier, (metric,), refine=cfg.detector.refine, fsd_cfg=cfg.detector.fsd)
        for f in cfg.diagnose.aes_factors:
            aes = AesConfig(metrics=(metric,), thresholds=(thr * f,), combine="any",
                            t_max=cfg.detector.aes.t_max)
            dcfg = replace(_guided(cfg, mode="classifier"), aes=aes, aes_enabled=True)
            rows.append(runner.report_row(dcfg, metric=metric, factor=float(f),
                                          threshold=thr * f, calibration_t=t_ref))
    return rows


def label_source_comparison(cfg: RunConfig, runner: Runner) -> list[dict]:
    """Classifier-predicted versus oracle conditioning labels on both paths."""
    rows = []
    for mode in ("classifier", "classifier_free"):
        for src in ("classifier", "oracle"):
            dcfg = replace(_guided(cfg, mode=mode), label_source=src)
            rows.append(runner.report_row(dcfg, mode=mode, label_source=src))
    return rows
