"""Top-level run configuration: one flat key=value file for every stage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .aes import AesConfig
from .data import DatasetSpec
from .detection import DetectorConfig, TandemConfig
from .diffusion import ScheduleConfig
from .errors import ConfigError
from .kvconfig import dumps_kv, from_flat, loads_kv, to_flat
from .models import ClassifierConfig, ScoreNetConfig, TrainConfig

DIAGNOSE_KINDS = ("acc_vs_t", "degradation_curves", "cutpoint_sweep", "steps_sweep",
                  "aes_threshold_table", "cleangrad_ablation")


@dataclass
class Paths:
    workdir: str = "run"
    dataset: str = "data.bin"
    score_model: str = "score.ckpt"
    classifier_model: str = "classifier.ckpt"

    def resolve(self, name: str) -> Path:
        return Path(self.workdir) / getattr(self, name)


@dataclass
class EvalOptions:
    split: str = "test"
    max_ind: int | None = None  # None keeps every InD sample of the split
    max_ood: int | None = None
    tandem: bool = True
    dump_images: bool = False


@dataclass
class DiagnoseOptions:
    acc_grid: tuple[int, ...] = (20, 40, 60, 80, 100, 120, 140, 160, 180, 200)
    cutpoints: tuple[float, ...] = (0.0, 0.2, 0.6)
    steps: tuple[int, ...] = (10, 25, 50)
    aes_factors: tuple[float, ...] = (0.8, 0.9, 1.0, 1.1, 1.2)


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    score: ScoreNetConfig = field(default_factory=ScoreNetConfig)
    score_train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    classifier_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, p_uncond=0.0))
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tandem: TandemConfig = field(default_factory=TandemConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    diagnose: DiagnoseOptions = field(default_factory=DiagnoseOptions)

    def synced(self) -> "RunConfig":
        """Copy of the config with model shapes derived from the data and schedule."""
        n, c, T = self.data.num_ind, self.data.channels, self.schedule.T
        score = dataclasses.replace(self.score, channels=c, num_classes=n, T=T)
        clf = dataclasses.replace(self.classifier, channels=c, num_classes=n)
        return dataclasses.replace(self, score=score, classifier=clf)

    def validate(self) -> None:
        self.data.validate()
        self.score_train.validate()
        self.classifier_train.validate()
        self.detector.validate()
        if self.schedule.T < 2:
            raise ConfigError("schedule.T must be >= 2")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"unknown eval.split {self.eval.split!r}")
        if self.score.width < 8 or self.score.width % 8:
            raise ConfigError("score.width must be a positive multiple of 8 (group norm)")
        if self.classifier.width < 1:
            raise ConfigError("classifier.width must be >= 1")

    def to_text(self) -> str:
        return dumps_kv(to_flat(self))

    @classmethod
    def from_flat(cls, flat: dict[str, str]) -> "RunConfig":
        return from_flat(cls, flat)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_flat(loads_kv(text))


def parse_overrides(items: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the file, then ``--set`` overrides; unknown keys are errors."""
    flat = to_flat(RunConfig())
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        flat.update(loads_kv(p.read_text()))
    flat.update(parse_overrides(overrides))
    cfg = RunConfig.from_flat(flat).synced()
    cfg.validate()
    return cfg


__all__ = ["AesConfig", "DIAGNOSE_KINDS", "RunConfig", "load_config", "parse_overrides"]
