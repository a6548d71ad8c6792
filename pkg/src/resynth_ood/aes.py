"""Adaptive early stop of the inversion.

At every inversion level the clean estimate x-hat_0(x_t) is compared with the
input. Once the configured degradation condition holds, that sample's latent
is frozen and synthesis starts from there.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import EpsFn, NoiseSchedule, invert_trajectory
from .errors import ConfigError
from .similarity import FsdConfig, metric_value

AES_METRICS = ("psnr", "fsd")


@dataclass
class AesConfig:
    metrics: tuple[str, ...] = ("psnr",)
    thresholds: tuple[float, ...] = (20.5,)  # see calibrate_thresholds
    combine: str = "any"  # any | all
    t_max: int | None = None  # None -> round(0.6 * T)

    def validate(self) -> None:
        if not self.metrics:
            raise ConfigError("AES needs at least one metric")
        if len(self.metrics) != len(self.thresholds):
            raise ConfigError("one AES threshold per metric is required")
        for m in self.metrics:
            if m not in AES_METRICS:
                raise ConfigError(f"unknown AES metric {m!r}; choose from {AES_METRICS}")
        if not all(np.isfinite(self.thresholds)):
            raise ConfigError("AES thresholds must be finite")
        if self.combine not in ("any", "all"):
            raise ConfigError(f"combine must be 'any' or 'all', got {self.combine!r}")

    def resolved_t_max(self, T: int) -> int:
        return int(round(0.6 * T)) if self.t_max is None else self.t_max


@dataclass
class AesTrace:
    t: list[int] = field(default_factory=list)
    values: dict[str, list[np.ndarray]] = field(default_factory=dict)
    t_stop: np.ndarray | None = None
    fired_metric: list[str] | None = None

    def to_csv(self, sample: int = 0) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "psnr", "fsd", "fired"])
        for i, t in enumerate(self.t):
            row = [t]
            for m in ("psnr", "fsd"):
                row.append(f"{self.values[m][i][sample]:.6f}" if m in self.values else "")
            row.append(int(self.t_stop is not None and self.t_stop[sample] == t))
            w.writerow(row)
        return buf.getvalue()


def degradation_value(x0, xhat0, metric: str, clf=None, fsd_cfg: FsdConfig | None = None) -> np.ndarray:
    """PSNR (lower = worse) or FSD (higher = worse) of the estimate against the input."""
    if metric not in AES_METRICS:
        raise ConfigError(f"unknown AES metric {metric!r}")
    return metric_value(metric, clf, x0, xhat0, fsd_cfg)


def crossed(metric: str, value, threshold: float) -> np.ndarray:
    value = np.asarray(value)
    return value < threshold if metric == "psnr" else value > threshold


def should_stop(trace: AesTrace, cfg: AesConfig, T: int) -> np.ndarray:
    """Per-sample stop flag for the latest recorded step."""
    if not trace.t:
        raise ConfigError("should_stop needs at least one recorded step")
    flags = [crossed(m, trace.values[m][-1], thr) for m, thr in zip(cfg.metrics, cfg.thresholds)]
    hit = np.all(flags, axis=0) if cfg.combine == "all" else np.any(flags, axis=0)
    return hit | (trace.t[-1] >= cfg.resolved_t_max(T))


def invert_with_aes(x0: torch.Tensor, eps_fn: EpsFn, schedule: NoiseSchedule, tau,
                    cfg: AesConfig, clf=None, fsd_cfg: FsdConfig | None = None,
                    refine: int = 0):
    """Inversion with per-sample early stop. Returns (latent, t_stop, trace, inversion)."""
    cfg.validate()
    t_max = cfg.resolved_t_max(schedule.T)
    # record every metric we can compute; only cfg.metrics drive the stop
    recorded = [m for m in AES_METRICS if m in cfg.metrics or clf is not None]
    trace = AesTrace(values={m: [] for m in recorded})
    B = x0.shape[0]
    fired = [""] * B
    done = np.zeros(B, dtype=bool)

    def hook(points):
        p = points[-1]
        trace.t.append(p.t)
        for m in recorded:
            trace.values[m].append(degradation_value(x0, p.xhat0, m, clf, fsd_cfg))
        stop = should_stop(trace, cfg, schedule.T)
        for b in np.nonzero(stop & ~done)[0]:
            names = [m for m, thr in zip(cfg.metrics, cfg.thresholds)
                     if crossed(m, trace.values[m][-1][b], thr)]
            fired[b] = "+".join(names) if names and (cfg.combine == "any" or
                                                     len(names) == len(cfg.metrics)) else "none"
        done[:] |= stop
        return stop

    inv = invert_trajectory(x0, eps_fn, schedule, tau, stop=hook, t_max=t_max,
                            refine=refine)
    trace.t_stop = inv.t_stop
    trace.fired_metric = [f or "none" for f in fired]
    return inv.latent(), inv.t_stop, trace, inv


def calibrate_thresholds(x0: torch.Tensor, labels, eps_fn: EpsFn, schedule: NoiseSchedule, tau,
                         clf, metrics=("psnr",), acc_drop: float = 0.02, refine: int = 0,
                         fsd_cfg: FsdConfig | None = None, t_max: int | None = None):
    """Thresholds from InD validation data where x-hat_0 starts losing its class.

    Walks the inversion, classifying x-hat_0 at every level. The reference level
    is the first one whose accuracy falls more than ``acc_drop`` below the
    accuracy on the clean inputs; each threshold is the median metric value
    there. Returns (thresholds, reference t, per-level accuracy).
    """
    from .models import predict

    labels = np.asarray(labels)
    base = float(np.mean(predict(clf, x0) == labels))
    t_max = schedule.T if t_max is None else t_max
    inv = invert_trajectory(x0, eps_fn, schedule, tau, t_max=t_max, refine=refine)
    accs = []
    ref = inv.points[-1]
    for p in inv.points:
        acc = float(np.mean(predict(clf, p.xhat0) == labels))
        accs.append((p.t, acc))
        if acc < base - acc_drop:
            ref = p
            break
    thr = tuple(float(np.median(degradation_value(x0, ref.xhat0, m, clf, fsd_cfg))) for m in metrics)
    return thr, ref.t, accs
