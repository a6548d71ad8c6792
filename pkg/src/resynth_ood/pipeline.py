"""Stage functions shared by the command line and the reference experiment.

Every stage reads its prerequisites from the run directory, writes its
artifacts atomically and records them in a JSON manifest together with the
config echo, package version and wall-clock per stage. Downstream stages check
their inputs against the upstream manifest before trusting them.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .data import SPLITS, Dataset, generate_dataset, load_dataset, save_dataset
from .detection import (DetectionRecord, Models, baseline_ood_score, calibrate_tandem,
                        detect, ebo_from_logits, mls_from_logits, records_to_csv,
                        tandem_combine)
from .diffusion import make_schedule
from .errors import ChecksumError, MissingPrerequisiteError
from .evaluation import EvalReport, evaluate
from .io_utils import atomic_write_bytes, atomic_write_text, sha256_file
from .kvconfig import to_flat
from .models import (Classifier, ScoreNetwork, accuracy, classifier_logits, load_model,
                     save_model, train_classifier, train_score)
from .similarity import METRICS

STAGE_OF = {"dataset": "gen-data", "score_model": "train-score",
            "classifier_model": "train-classifier"}


# ---------------------------------------------------------------- manifests


@dataclass
class Manifest:
    command: str
    cfg: RunConfig
    root: Path
    stages: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = round(time.perf_counter() - t0, 3)

    def _rel(self, path: Path) -> str:
        try:
            return str(Path(path).resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(path)

    def add_artifact(self, path: Path) -> None:
        self.artifacts[self._rel(path)] = sha256_file(path)

    def add_input(self, path: Path) -> None:
        self.inputs[self._rel(path)] = sha256_file(path)

    def to_json(self) -> str:
        doc = {"command": self.command, "version": __version__,
               "config": to_flat(self.cfg), "artifacts": self.artifacts,
               "inputs": self.inputs, "wall_clock_s": self.stages}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def write(self) -> Path:
        path = manifest_path(self.cfg, self.command)
        atomic_write_text(path, self.to_json())
        return path


def manifest_path(cfg: RunConfig, command: str) -> Path:
    return Path(cfg.paths.workdir) / "manifests" / f"{command}.json"


def require(cfg: RunConfig, name: str) -> Path:
    """Path of an upstream artifact, verified against its producer's manifest."""
    path = cfg.paths.resolve(name)
    stage = STAGE_OF[name]
    if not path.is_file():
        raise MissingPrerequisiteError(
            f"{path} not found; run the '{stage}' stage first")
    mpath = manifest_path(cfg, stage)
    if mpath.is_file():
        recorded = json.loads(mpath.read_text()).get("artifacts", {})
        key = str(path.resolve().relative_to(Path(cfg.paths.workdir).resolve()))
        if key in recorded and recorded[key] != sha256_file(path):
            raise ChecksumError(
                f"{path} does not match the checksum recorded by '{stage}'; rerun that stage")
    return path


# ---------------------------------------------------------------- stages


def losses_csv(losses) -> str:
    return "step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))


def gen_data(cfg: RunConfig) -> Dataset:
    man = Manifest("gen-data", cfg, Path(cfg.paths.workdir))
    with man.stage("generate"):
        ds = generate_dataset(cfg.data)
    path = cfg.paths.resolve("dataset")
    with man.stage("write"):
        save_dataset(ds, path)
    man.add_artifact(path)
    man.write()
    return ds


def load_data(cfg: RunConfig, man: Manifest | None = None) -> Dataset:
    path = require(cfg, "dataset")
    ds = load_dataset(path)
    if ds.spec != cfg.data:
        raise ChecksumError(f"{path} was generated with a different data config; rerun gen-data")
    if man is not None:
        man.add_input(path)
    return ds


def train_classifier_stage(cfg: RunConfig) -> tuple[Classifier, float]:
    man = Manifest("train-classifier", cfg, Path(cfg.paths.workdir))
    ds = load_data(cfg, man)
    tr = ds.select("train")
    clf = Classifier(cfg.classifier)
    with man.stage("train"):
        res = train_classifier(clf, tr.pixels, tr.labels, cfg.classifier_train)
    val = ds.select("val")
    acc = accuracy(clf, val.pixels, val.labels)
    path = cfg.paths.resolve("classifier_model")
    save_model(clf, path)
    loss_path = path.with_name("classifier_losses.csv")
    atomic_write_text(loss_path, losses_csv(res.losses))
    man.add_artifact(path)
    man.add_artifact(loss_path)
    man.write()
    return clf, acc


def train_score_stage(cfg: RunConfig) -> ScoreNetwork:
    man = Manifest("train-score", cfg, Path(cfg.paths.workdir))
    ds = load_data(cfg, man)
    tr = ds.select("train")
    net = ScoreNetwork(cfg.score)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    with man.stage("train"):
        res = train_score(net, tr.pixels, tr.labels, sched, cfg.score_train)
    path = cfg.paths.resolve("score_model")
    save_model(net, path)
    loss_path = path.with_name("score_losses.csv")
    atomic_write_text(loss_path, losses_csv(res.losses))
    man.add_artifact(path)
    man.add_artifact(loss_path)
    man.write()
    return net


def load_models(cfg: RunConfig, ds: Dataset, man: Manifest | None = None) -> Models:
    spath = require(cfg, "score_model")
    cpath = require(cfg, "classifier_model")
    net = load_model(spath, "score")
    clf = load_model(cpath, "classifier")
    if man is not None:
        man.add_input(spath)
        man.add_input(cpath)
    sched = make_schedule(cfg.schedule.T, cfg.schedule.kind)
    if net.cfg.T != sched.T:
        raise ChecksumError(f"score model was trained with T={net.cfg.T}, config says {sched.T}")
    fill = ds.select("train").mean_pixel()
    return Models(net, clf, sched, fill)


# ---------------------------------------------------------------- detection


@dataclass
class EvalSet:
    ids: np.ndarray  # row indices into the full dataset
    pixels: np.ndarray
    labels: np.ndarray
    is_ood: np.ndarray


def eval_set(ds: Dataset, split: str, max_ind: int | None = None,
             max_ood: int | None = None) -> EvalSet:
    """Rows of one split, optionally truncated per distribution in stored order."""
    rows = np.nonzero(ds.splits == SPLITS.index(split))[0]
    ind = rows[ds.dists[rows] == 0]
    ood = rows[ds.dists[rows] == 1]
    if max_ind is not None:
        ind = _spread(ind, max_ind)
    if max_ood is not None:
        ood = _spread(ood, max_ood)
    ids = np.sort(np.concatenate([ind, ood]))
    return EvalSet(ids, ds.pixels[ids], ds.labels[ids].astype(np.int64), ds.dists[ids] == 1)


def _spread(rows: np.ndarray, n: int) -> np.ndarray:
    # evenly spaced picks keep every class represented
    if n >= len(rows):
        return rows
    return rows[np.linspace(0, len(rows) - 1, n).round().astype(int)]


def run_detection(cfg: RunConfig, models: Models, es: EvalSet) -> list[DetectionRecord]:
    return detect(cfg.detector, models, es.pixels, es.ids, es.labels, es.is_ood)


def image_dump(records: list[DetectionRecord], es: EvalSet) -> tuple[bytes, bytes, str]:
    """(inputs, syntheses, index CSV): uint8 grids, one (C, H, W) block per row."""
    order = {int(i): k for k, i in enumerate(es.ids)}

    def q(a):
        a = np.nan_to_num(np.asarray(a, np.float64), nan=0.0)
        return (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)

    inputs = np.stack([q(es.pixels[order[r.input_id]]) for r in records])
    synth = np.stack([q(r.synthesis) for r in records])
    c, h, w = inputs.shape[1:]
    lines = ["row,input_id,truth,label,offset,channels,height,width"]
    size = c * h * w
    for k, r in enumerate(records):
        lines.append(f"{k},{r.input_id},{r.truth},{r.label},{k * size},{c},{h},{w}")
    return inputs.tobytes(), synth.tobytes(), "\n".join(lines) + "\n"


def write_detection(out: Path, records, es: EvalSet, man: Manifest, dump: bool) -> Path:
    csv_path = out / "detections.csv"
    atomic_write_text(csv_path, records_to_csv(records))
    man.add_artifact(csv_path)
    if dump:
        inputs, synth, index = image_dump(records, es)
        for name, blob in (("inputs.u8", inputs), ("synthesis.u8", synth)):
            atomic_write_bytes(out / name, blob)
            man.add_artifact(out / name)
        atomic_write_text(out / "images_index.csv", index)
        man.add_artifact(out / "images_index.csv")
    return csv_path


# ---------------------------------------------------------------- evaluation


def baseline_scores(models: Models, pixels) -> tuple[np.ndarray, np.ndarray]:
    logits = classifier_logits(models.classifier, torch.as_tensor(np.asarray(pixels))).numpy()
    return mls_from_logits(logits), ebo_from_logits(logits)


def evaluate_rows(rows: list[dict], cfg: RunConfig, val_mls=None, val_ebo=None) -> list[EvalReport]:
    """Reports for the detector's final score, each metric, both baselines and tandem.

    ``rows`` are parsed detection CSV rows. Tandem needs InD validation
    baseline scores for its band; it is skipped when they are not supplied.
    """
    valid = [r for r in rows if r.get("valid", "1") == "1"]
    is_ood = np.array([r["truth"] == "OOD" for r in valid])
    final = np.array([float(r["final"]) for r in valid])
    mls = np.array([float(r["mls"]) for r in valid])
    ebo = np.array([float(r["ebo"]) for r in valid])
    reports = [evaluate(final, is_ood, "final")]
    for m in METRICS:
        reports.append(evaluate(np.array([float(r[f"score_{m}"]) for r in valid]), is_ood,
                                f"score_{m}"))
    reports.append(evaluate(-mls, is_ood, "mls"))
    reports.append(evaluate(ebo, is_ood, "ebo"))
    if val_mls is not None and cfg.eval.tandem:
        tcfg = cfg.tandem
        b_val = baseline_ood_score(tcfg.baseline, val_mls, val_ebo)
        # the in-band scale only affects spacing, never ranking; use unlabelled scores
        tcfg = calibrate_tandem(tcfg, b_val, final)
        combined = tandem_combine(baseline_ood_score(tcfg.baseline, mls, ebo), final, tcfg)
        reports.append(evaluate(combined, is_ood, f"tandem_{tcfg.baseline}",
                                band_low=tcfg.low, band_high=tcfg.high))
    return reports


__all__ = ["Manifest", "EvalSet", "eval_set", "gen_data", "load_data", "load_models",
           "manifest_path", "require", "run_detection", "train_classifier_stage",
           "train_score_stage", "evaluate_rows", "baseline_scores", "write_detection",
           "image_dump"]
