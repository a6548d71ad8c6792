"""End-to-end semantic-mismatch detector, logit baselines and tandem combination."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .aes import AesConfig, invert_with_aes
from .diffusion import NoiseSchedule, invert_trajectory, make_tau, sample_trajectory
from .errors import ConfigError, ResynthError
from .guidance import (GuidanceConfig, cam_mask, cfg_combine, classifier_guided_eps,
                       clean_grad, masked_blend)
from .models import Classifier, ScoreNetwork, classifier_logits, eps_model, score_eval
from .rng import RngStream
from .similarity import METRICS, FsdConfig, ood_score

log = logging.getLogger(__name__)


@dataclass
class DetectorConfig:
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    tau_len: int | None = None  # None -> 50 (classifier path) or 25 (classifier-free)
    refine: int = 1  # fixed-point passes per inversion step
    aes: AesConfig = field(default_factory=AesConfig)
    aes_enabled: bool | None = None  # None -> on for the classifier path only
    metric: str = "fsd"
    label_source: str = "classifier"  # classifier | oracle
    fsd: FsdConfig = field(default_factory=FsdConfig)
    batch_size: int = 200
    seed: int = 0

    def validate(self):
        self.guidance.validate()
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; choose from {METRICS}")
        if self.label_source not in ("classifier", "oracle"):
            raise ConfigError(f"unknown label_source {self.label_source!r}")
        if self.refine < 0:
            raise ConfigError("refine must be >= 0")
        if self.use_aes:
            self.aes.validate()

    @property
    def resolved_tau_len(self) -> int:
        if self.tau_len is not None:
            return self.tau_len
        return 50 if self.guidance.mode == "classifier" else 25

    @property
    def use_aes(self) -> bool:
        if self.aes_enabled is None:
            return self.guidance.mode == "classifier"
        return self.aes_enabled


@dataclass
class Models:
    score: ScoreNetwork
    classifier: Classifier
    schedule: NoiseSchedule
    fill: float = 0.0  # cutout fill when the config leaves it unset


@dataclass
class DetectionRecord:
    input_id: int
    truth: str  # InD | OOD
    label: int
    t_stop: int
    synthesis: np.ndarray
    scores: dict[str, float]
    mls: float
    ebo: float
    final: float
    valid: bool = True
    error: str = ""
    trace_csv: str = ""  # AES trace (t, psnr, fsd, fired) when early stop ran

    def verdict(self, threshold: float) -> str:
        return "OOD" if self.final > threshold else "InD"


# ---------------------------------------------------------------- baselines


def mls_from_logits(logits) -> np.ndarray:
    return np.max(np.asarray(logits, dtype=np.float64), axis=-1)


def ebo_from_logits(logits, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(z - m).sum(axis=-1))
    return -temperature * lse


def mls_score(clf, x) -> np.ndarray:
    """Maximum logit; larger means more in-distribution."""
    return mls_from_logits(classifier_logits(clf, torch.as_tensor(x)).numpy())


def ebo_score(clf, x, temperature: float = 1.0) -> np.ndarray:
    """Free energy -T logsumexp(logits / T); larger means more OOD."""
    return ebo_from_logits(classifier_logits(clf, torch.as_tensor(x)).numpy(), temperature)


# ---------------------------------------------------------------- labels


def predict_label(logits, label_source: str = "classifier", truth=None, is_ood=None,
                  num_classes: int | None = None, rng: RngStream | None = None,
                  ids=None) -> np.ndarray:
    """Conditioning label per sample.

    Oracle mode returns the ground truth for InD rows and a seeded uniform InD
    class for OOD rows (stream ``oracle/<id>``).
    """
    logits = np.asarray(logits)
    if label_source == "classifier":
        return np.argmax(logits, axis=-1)
    if label_source != "oracle":
        raise ConfigError(f"unknown label_source {label_source!r}")
    if truth is None or is_ood is None:
        raise ConfigError("oracle labels need ground-truth labels and InD/OOD flags")
    n = num_classes or logits.shape[-1]
    rng = rng or RngStream(0)
    ids = np.arange(len(truth)) if ids is None else ids
    out = np.asarray(truth, dtype=np.int64).copy()
    for i, (ood, sid) in enumerate(zip(is_ood, ids)):
        if ood:
            out[i] = int(rng.split("oracle", int(sid)).integers(0, n))
    return out


# ---------------------------------------------------------------- pipeline


def _classifier_guidance(cfg: DetectorConfig, models: Models, labels: torch.Tensor, rngs):
    g = cfg.guidance
    net, clf, sched = models.score, models.classifier, models.schedule
    if g.cutout.fill is None:
        g = _with_fill(g, models.fill)

    def guide(x_t, t, eps, idx):
        grad = clean_grad(clf, x_t, t, labels[idx], net, sched, g,
                          rngs=[rngs[i] for i in idx], eps=eps)
        return classifier_guided_eps(eps, grad, g.scale, t, sched, g.grad_sign)

    return guide


def _with_fill(g: GuidanceConfig, fill: float) -> GuidanceConfig:
    from dataclasses import replace

    return replace(g, cutout=replace(g.cutout, fill=fill))


def _free_guidance(cfg: DetectorConfig, models: Models, labels: torch.Tensor, mask: torch.Tensor):
    net, omega = models.score, cfg.guidance.omega

    def guide(x_t, t, eps, idx):
        with torch.no_grad():
            eps_c = score_eval(net, x_t, t, labels[idx])
        return masked_blend(mask[idx], cfg_combine(eps, eps_c, omega), eps)

    return guide


@dataclass
class BatchResult:
    labels: np.ndarray
    t_stop: np.ndarray
    synthesis: torch.Tensor
    trace: object = None


def synthesize(cfg: DetectorConfig, models: Models, x: torch.Tensor, labels: np.ndarray,
               ids, tau=None, predicted=None) -> BatchResult:
    """Invert (with AES where enabled) and re-synthesise toward ``labels``.

    The classifier-free path masks guidance with the CAM of the classifier's
    own prediction (``predicted``, defaulting to ``labels``), whichever label
    drives the synthesis.
    """
    sched = models.schedule
    tau = tau or make_tau(sched.T, cfg.resolved_tau_len)
    eps_fn = eps_model(models.score)
    trace = None
    if cfg.use_aes:
        latent, t_stop, trace, _ = invert_with_aes(x, eps_fn, sched, tau, cfg.aes,
                                                   models.classifier, cfg.fsd, cfg.refine)
    else:
        inv = invert_trajectory(x, eps_fn, sched, tau, refine=cfg.refine)
        latent, t_stop = inv.latent(), inv.t_stop
    y = torch.as_tensor(labels, dtype=torch.long)
    if cfg.guidance.mode == "classifier":
        root = RngStream(cfg.seed, ("detect", "cutout"))
        rngs = [root.split(int(i)) for i in ids]
        guide = _classifier_guidance(cfg, models, y, rngs)
    else:
        if not models.score.conditional:
            raise ConfigError("classifier-free path needs a conditional score network")
        y_cam = y if predicted is None else torch.as_tensor(predicted, dtype=torch.long)
        mask = cam_mask(models.classifier, x, y_cam, cfg.guidance.cam_cutpoint)
        guide = _free_guidance(cfg, models, y, mask)
    synth = sample_trajectory(latent, t_stop, eps_fn, sched, tau, guide)
    return BatchResult(np.asarray(labels), np.asarray(t_stop), synth, trace)


def detect(cfg: DetectorConfig, models: Models, images, ids=None, truth_labels=None,
           is_ood=None) -> list[DetectionRecord]:
    """Score a set of images; records come back ordered by input id."""
    cfg.validate()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    n = len(images)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    is_ood = np.zeros(n, bool) if is_ood is None else np.asarray(is_ood, bool)
    order = np.argsort(ids, kind="stable")
    records: list[DetectionRecord] = []
    for start in range(0, n, cfg.batch_size):
        sel = order[start:start + cfg.batch_size]
        x = images[sel]
        logits = classifier_logits(models.classifier, x).numpy()
        labels = predict_label(logits, cfg.label_source,
                               None if truth_labels is None else np.asarray(truth_labels)[sel],
                               is_ood[sel], models.classifier.cfg.num_classes,
                               RngStream(cfg.seed), ids[sel])
        try:
            res = synthesize(cfg, models, x, labels, ids[sel],
                             predicted=np.argmax(logits, axis=-1))
            scores = {m: ood_score(m, models.classifier, x, res.synthesis, cfg.fsd) for m in METRICS}
            valid = np.isfinite(res.synthesis.numpy()).reshape(len(sel), -1).all(axis=1)
            err = ""
        except ResynthError as exc:
            log.error("batch starting at id %d failed: %s", ids[sel[0]], exc)
            res = BatchResult(labels, np.zeros(len(sel), int), torch.full_like(x, float("nan")))
            scores = {m: np.full(len(sel), np.nan) for m in METRICS}
            valid = np.zeros(len(sel), bool)
            err = str(exc)
        mls = mls_from_logits(logits)
        ebo = ebo_from_logits(logits)
        for k, i in enumerate(sel):
            final = float(scores[cfg.metric][k]) if valid[k] else float("nan")
            records.append(DetectionRecord(
                input_id=int(ids[i]), truth="OOD" if is_ood[i] else "InD",
                label=int(res.labels[k]), t_stop=int(res.t_stop[k]),
                synthesis=res.synthesis[k].numpy(),
                scores={m: float(scores[m][k]) for m in METRICS},
                mls=float(mls[k]), ebo=float(ebo[k]), final=final,
                valid=bool(valid[k]), error=err if not valid[k] else "",
                trace_csv=res.trace.to_csv(k) if res.trace is not None else ""))
    return records


def detect_one(cfg: DetectorConfig, models: Models, x, input_id: int = 0,
               truth_label: int | None = None, is_ood: bool = False) -> DetectionRecord:
    x = np.asarray(x)[None]
    truth = None if truth_label is None else [truth_label]
    return detect(cfg, models, x, [input_id], truth, [is_ood])[0]


# ---------------------------------------------------------------- tandem


@dataclass
class TandemConfig:
    baseline: str = "ebo"  # mls | ebo
    low_q: float = 0.05
    high_q: float = 0.95
    low: float | None = None
    high: float | None = None
    scale: float = 1.0

    def validate(self):
        if self.baseline not in ("mls", "ebo"):
            raise ConfigError(f"unknown tandem baseline {self.baseline!r}")
        if self.low is None or self.high is None:
            raise ConfigError("tandem band is not calibrated")
        if not self.low < self.high:
            raise ConfigError("tandem band needs low < high")


def baseline_ood_score(kind: str, mls, ebo):
    """Baseline oriented so larger means more OOD."""
    return -np.asarray(mls) if kind == "mls" else np.asarray(ebo)


def calibrate_tandem(tcfg: TandemConfig, baseline_val, detector_val) -> TandemConfig:
    """Band from quantiles of InD validation baseline scores (already OOD-oriented)."""
    from dataclasses import replace

    lo, hi = np.quantile(np.asarray(baseline_val, float), [tcfg.low_q, tcfg.high_q])
    spread = float(np.median(np.abs(np.asarray(detector_val, float)))) or 1.0
    return replace(tcfg, low=float(lo), high=float(hi), scale=spread)


def tandem_combine(baseline_score, detector_score, tcfg: TandemConfig):
    """Trust the baseline outside its confidence band, the detector inside.

    In-band scores map into (-0.5, 0.5) through a scaled arctan; confident-InD
    baseline scores land below -1 and confident-OOD above +1, each through an
    affine map of the baseline score.
    """
    tcfg.validate()
    b = np.asarray(baseline_score, dtype=np.float64)
    d = np.asarray(detector_score, dtype=np.float64)
    inband = np.arctan(d / tcfg.scale) / math.pi
    out = np.where(b < tcfg.low, -1.0 - (tcfg.low - b),
                   np.where(b > tcfg.high, 1.0 + (b - tcfg.high), inband))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- persistence


CSV_COLUMNS = ["input_id", "truth", "label", "t_stop", *(f"score_{m}" for m in METRICS),
               "mls", "ebo", "final", "valid"]


def records_to_csv(records: list[DetectionRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([r.input_id, r.truth, r.label, r.t_stop,
                    *(repr(r.scores[m]) for m in METRICS),
                    repr(r.mls), repr(r.ebo), repr(r.final), int(r.valid)])
    return buf.getvalue()


def read_detection_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    missing = set(CSV_COLUMNS[:4] + ["final"]) - set(rows[0] if rows else CSV_COLUMNS)
    if missing:
        raise ConfigError(f"detection CSV lacks columns {sorted(missing)}")
    return rows
