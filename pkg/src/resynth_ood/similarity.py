"""Distances between an input and its re-synthesis.

Every function takes batches shaped (B, C, H, W) and returns a float64 array of
length B. ``ood_score`` flips orientation so that larger always means more OOD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError

PSNR_CAP = 99.0
METRICS = ("psnr", "l2", "logits_l1", "fsd")
# True where a larger raw value means the pair is more alike
LARGER_IS_SIMILAR = {"psnr": True, "l2": False, "logits_l1": False, "fsd": False}


@dataclass
class FsdConfig:
    layers: tuple[str, ...] = ("pixels", "block1", "block2", "block3")
    c1: float = 1e-6
    c2: float = 1e-6

    def validate(self):
        if not self.layers:
            raise ConfigError("fsd needs at least one layer")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("fsd stability constants must be positive")


def _pair(a, b):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    return a, b


def mse(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    d = (a.double() - b.double()).reshape(a.shape[0], -1)
    return (d * d).mean(dim=1).numpy()


def psnr(a, b) -> np.ndarray:
    m = mse(a, b)
    with np.errstate(divide="ignore"):
        val = 10.0 * np.log10(1.0 / m)
    return np.where(m < 1e-10, PSNR_CAP, np.minimum(val, PSNR_CAP))


def l2(a, b) -> np.ndarray:
    return np.sqrt(mse(a, b))


def logits_l1(clf, a, b) -> np.ndarray:
    a, b = _pair(a, b)
    with torch.no_grad():
        la, lb = clf(a).double(), clf(b).double()
    return (la - lb).abs().sum(dim=1).numpy()


def _layer_terms(fa: torch.Tensor, fb: torch.Tensor, c1: float, c2: float) -> torch.Tensor:
    """Per-channel luminance x structure products, shape (B, C)."""
    fa = fa.double().flatten(2)
    fb = fb.double().flatten(2)
    mu_a, mu_b = fa.mean(-1), fb.mean(-1)
    var_a = ((fa - mu_a[..., None]) ** 2).mean(-1)
    var_b = ((fb - mu_b[..., None]) ** 2).mean(-1)
    cov = ((fa - mu_a[..., None]) * (fb - mu_b[..., None])).mean(-1)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    struct = (2 * cov + c2) / (var_a + var_b + c2)
    return lum * struct


def fsd(clf, a, b, cfg: FsdConfig | None = None) -> np.ndarray:
    """Feature structure distance over raw pixels and classifier feature maps.

    Each layer gets weight 1/L, split evenly across its channels.
    """
    cfg = cfg or FsdConfig()
    cfg.validate()
    a, b = _pair(a, b)
    if cfg.layers == ("pixels",):
        feats_a, feats_b = {"pixels": a}, {"pixels": b}
    else:
        with torch.no_grad():
            feats_a, feats_b = clf.features(a), clf.features(b)
    total = torch.zeros(a.shape[0], dtype=torch.float64)
    for name in cfg.layers:
        if name not in feats_a:
            raise ConfigError(f"classifier has no feature layer {name!r}")
        total += _layer_terms(feats_a[name], feats_b[name], cfg.c1, cfg.c2).mean(dim=1)
    return (1.0 - total / len(cfg.layers)).numpy()


def metric_value(metric: str, clf, a, b, fsd_cfg: FsdConfig | None = None) -> np.ndarray:
    if metric == "psnr":
        return psnr(a, b)
    if metric == "l2":
        return l2(a, b)
    if metric == "logits_l1":
        return logits_l1(clf, a, b)
    if metric == "fsd":
        return fsd(clf, a, b, fsd_cfg)
    raise ConfigError(f"unknown metric {metric!r}; choose from {METRICS}")


def ood_score(metric: str, clf, inputs, synthesis, fsd_cfg: FsdConfig | None = None) -> np.ndarray:
    value = metric_value(metric, clf, inputs, synthesis, fsd_cfg)
    return -value if LARGER_IS_SIMILAR[metric] else value
