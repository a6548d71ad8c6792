"""Score network, protected classifier, training loops and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, estimate_x0, forward_diffuse
from .errors import ConfigError, FormatError, NumericalError
from .io_utils import atomic_write_bytes
from .rng import RngStream

log = logging.getLogger(__name__)

CKPT_MAGIC = b"RSOODCK\x00"
CKPT_VERSION = 1


@contextmanager
def _seeded_init(seed: int):
    """Parameter init from a fixed seed without touching the global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


@dataclass
class ScoreNetConfig:
    channels: int = 1
    width: int = 32
    emb_dim: int = 64
    num_classes: int = 4  # 0 builds an unconditional network
    T: int = 200
    seed: int = 0


class ScoreNetwork(nn.Module):
    """Noise predictor eps(x_t, t[, y]): one full-res block, one half-res block, one merge block.

    Class conditioning is a learned additive embedding with an extra row for
    the null label (index ``num_classes``).
    """

    kind = "score"

    def __init__(self, cfg: ScoreNetConfig):
        super().__init__()
        self.cfg = cfg
        w, e = cfg.width, cfg.emb_dim
        with _seeded_init(cfg.seed):
            self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
            self.class_emb = nn.Embedding(cfg.num_classes + 1, e) if cfg.num_classes else None
            self.conv_in = nn.Conv2d(cfg.channels, w, 3, padding=1)
            self.block1 = ResBlock(w, w, e)
            self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
            self.block2 = ResBlock(2 * w, 2 * w, e)
            self.up = nn.Conv2d(2 * w, w, 3, padding=1)
            self.block3 = ResBlock(2 * w, w, e)
            self.norm_out = nn.GroupNorm(min(8, w), w)
            self.conv_out = nn.Conv2d(w, cfg.channels, 3, padding=1)
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

    @property
    def null_label(self) -> int | None:
        return self.cfg.num_classes if self.cfg.num_classes else None

    @property
    def conditional(self) -> bool:
        return self.class_emb is not None

    def forward(self, x: torch.Tensor, t: torch.Tensor, y: torch.Tensor | None = None):
        emb = self.time_mlp(timestep_embedding(t, self.cfg.emb_dim).to(x.dtype))
        if self.class_emb is not None:
            if y is None:
                y = torch.full_like(t, self.null_label)
            emb = emb + self.class_emb(y)
        h1 = self.block1(self.conv_in(x), emb)
        h2 = self.block2(self.down(h1), emb)
        up = self.up(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h3 = self.block3(torch.cat([h1, up], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h3)))


def score_eval(net: ScoreNetwork, x_t: torch.Tensor, t: int, y=None) -> torch.Tensor:
    """Predicted noise for a batch at a single timestep. ``y=None`` means the null label."""
    if not 1 <= t <= net.cfg.T:
        raise ConfigError(f"timestep {t} outside [1, {net.cfg.T}]")
    B = x_t.shape[0]
    tt = torch.full((B,), t, dtype=torch.long)
    yy = None
    if y is not None:
        if not net.conditional:
            raise ConfigError("class label given to an unconditional score network")
        yy = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(B).clone()
        if ((yy < 0) | (yy > net.cfg.num_classes)).any():
            raise ConfigError(f"label outside [0, {net.cfg.num_classes}]")
    return net(x_t, tt, yy)


def eps_model(net: ScoreNetwork, y=None):
    """Closure ``(x, t) -> eps`` without autograd, for samplers."""

    def fn(x, t):
        with torch.no_grad():
            return score_eval(net, x, t, y)

    return fn


@dataclass
class ClassifierConfig:
    channels: int = 1
    num_classes: int = 4
    width: int = 16
    seed: int = 0


class Classifier(nn.Module):
    """Three conv blocks, global average pool, linear head.

    SiLU activations and strided convs keep the input-to-logit map smooth, so
    finite-difference checks of input gradients are meaningful.
    """

    kind = "classifier"
    feature_layers = ("block1", "block2", "block3")
    cam_layer = "block3"

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        with _seeded_init(cfg.seed):
            self.block1 = nn.Conv2d(cfg.channels, w, 3, padding=1)
            self.block2 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
            self.block3 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
            self.head = nn.Linear(2 * w, cfg.num_classes)

    def features(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        f1 = F.silu(self.block1(x))
        f2 = F.silu(self.block2(f1))
        f3 = F.silu(self.block3(f2))
        logits = self.head(f3.mean(dim=(2, 3)))
        return {"pixels": x, "block1": f1, "block2": f2, "block3": f3, "logits": logits}

    def forward(self, x):
        return self.features(x)["logits"]


def _check_input(clf: Classifier, x: torch.Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != clf.cfg.channels:
        raise ConfigError(f"expected (B, {clf.cfg.channels}, H, W) input, got {tuple(x.shape)}")


def classifier_logits(clf: Classifier, x: torch.Tensor) -> torch.Tensor:
    _check_input(clf, x)
    with torch.no_grad():
        return clf(x)


def predict(clf: Classifier, x: torch.Tensor) -> np.ndarray:
    """Argmax with lowest-index tie-break."""
    return np.argmax(classifier_logits(clf, x).numpy(), axis=1)


def input_log_prob_grad(clf: Classifier, x: torch.Tensor, y) -> torch.Tensor:
    """d/dx log softmax(clf(x))[y], per sample."""
    _check_input(clf, x)
    x = x.detach().requires_grad_(True)
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(x.shape[0])
    with torch.enable_grad():
        logp = F.log_softmax(clf(x), dim=1).gather(1, y[:, None]).sum()
        (grad,) = torch.autograd.grad(logp, x)
    return grad


def grad_cam(clf: Classifier, x: torch.Tensor, y, layer: str | None = None) -> torch.Tensor:
    """Gradient-weighted class activation map, (B, H, W) in [0, 1]."""
    _check_input(clf, x)
    layer = layer or clf.cam_layer
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(x.shape[0])
    with torch.enable_grad():
        feats = clf.features(x.detach())
        act = feats[layer]
        score = feats["logits"].gather(1, y[:, None]).sum()
        (g,) = torch.autograd.grad(score, act)
    weights = g.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
    peak = cam.amax(dim=(1, 2), keepdim=True)
    return torch.where(peak > 0, cam / torch.where(peak > 0, peak, 1), torch.zeros_like(cam))


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0
    p_uncond: float = 0.1

    def validate(self):
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")


@dataclass
class TrainResult:
    losses: list[float]
    null_fraction: float = 0.0


def _batches(n: int, batch: int, rng: RngStream):
    order = rng.generator.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def train_score(net: ScoreNetwork, images: np.ndarray, labels: np.ndarray | None,
                schedule: NoiseSchedule, cfg: TrainConfig) -> TrainResult:
    """Minimise E||eps - eps_theta(x_t, t[, y])||^2 with label dropout to the null label.

    Returns one loss entry per optimiser step.
    """
    cfg.validate()
    if len(images) == 0:
        raise ConfigError("empty training set")
    if schedule.T != net.cfg.T:
        raise ConfigError(f"schedule T={schedule.T} != network T={net.cfg.T}")
    root = RngStream(cfg.seed, ("train", "score"))
    gen = root.torch_generator()
    X = torch.as_tensor(images, dtype=torch.float32)
    Y = torch.as_tensor(labels, dtype=torch.long) if labels is not None else None
    sqrt_a = torch.as_tensor(np.sqrt(schedule.alpha), dtype=torch.float32)
    sqrt_1ma = torch.as_tensor(np.sqrt(1.0 - schedule.alpha), dtype=torch.float32)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    total_steps = cfg.epochs * math.ceil(len(X) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    losses, n_null, n_draw = [], 0, 0
    net.train()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch_size, root.split("epoch", epoch)):
            x0 = X[idx]
            b = len(idx)
            t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            x_t = sqrt_a[t][:, None, None, None] * x0 + sqrt_1ma[t][:, None, None, None] * noise
            y = None
            if net.conditional:
                y = Y[idx].clone() if Y is not None else torch.full((b,), net.null_label)
                drop = torch.rand(b, generator=gen) < cfg.p_uncond
                y[drop] = net.null_label
                n_null += int(drop.sum())
                n_draw += b
            loss = F.mse_loss(net(x_t, t, y), noise)
            if not torch.isfinite(loss):
                raise NumericalError(f"score training diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
        log.info("score epoch %d loss %.4f", epoch, np.mean(losses[-math.ceil(len(X) / cfg.batch_size):]))
    net.eval()
    return TrainResult(losses, n_null / n_draw if n_draw else 0.0)


def train_classifier(clf: Classifier, images: np.ndarray, labels: np.ndarray,
                     cfg: TrainConfig, noise_std: float = 0.0) -> TrainResult:
    cfg.validate()
    if len(images) == 0:
        raise ConfigError("empty training set")
    root = RngStream(cfg.seed, ("train", "classifier"))
    gen = root.torch_generator()
    X = torch.as_tensor(images, dtype=torch.float32)
    Y = torch.as_tensor(labels, dtype=torch.long)
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    losses = []
    clf.train()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(X), cfg.batch_size, root.split("epoch", epoch)):
            x = X[idx]
            if noise_std > 0:
                x = x + noise_std * torch.randn(x.shape, generator=gen)
            loss = F.cross_entropy(clf(x), Y[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"classifier training diverged in epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
    clf.eval()
    return TrainResult(losses)


def accuracy(clf: Classifier, images, labels) -> float:
    x = torch.as_tensor(images, dtype=torch.float32)
    return float(np.mean(predict(clf, x) == np.asarray(labels)))


def accuracy_vs_timestep(clf: Classifier, net: ScoreNetwork, images, labels,
                         schedule: NoiseSchedule, grid, mode: str,
                         rng: RngStream) -> list[tuple[int, float]]:
    """Classifier accuracy on x_t (``raw_xt``) or on its clean estimate (``xhat0``)."""
    if mode not in ("raw_xt", "xhat0"):
        raise ConfigError(f"unknown mode {mode!r}")
    x0 = torch.as_tensor(images, dtype=torch.float32)
    labels = np.asarray(labels)
    out = []
    for t in grid:
        t = int(t)
        if t == 0:
            x = x0
        else:
            noise = torch.as_tensor(rng.split("t", t).gaussian(tuple(x0.shape)), dtype=torch.float32)
            x = forward_diffuse(x0, t, schedule, noise)
            if mode == "xhat0":
                with torch.no_grad():
                    x = estimate_x0(x, score_eval(net, x, t), t, schedule)
        out.append((t, float(np.mean(predict(clf, x) == labels))))
    return out


# ------------------------------------------------------------------ checkpoints
#
# magic(8) | version u32 | kind_len u32 | kind | hp_len u32 | hparams json |
# n_values u64 | float32le parameter blob (state_dict order)


def model_to_bytes(model: nn.Module) -> bytes:
    kind = model.kind.encode()
    hp = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    tensors = [v.detach().to(torch.float32).reshape(-1) for v in model.state_dict().values()]
    blob = torch.cat(tensors).numpy().astype("<f4").tobytes() if tensors else b""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<I", len(hp)))
    buf.write(hp)
    buf.write(struct.pack("<Q", len(blob) // 4))
    buf.write(blob)
    return buf.getvalue()


_KINDS = {"score": (ScoreNetwork, ScoreNetConfig), "classifier": (Classifier, ClassifierConfig)}


def model_from_bytes(data: bytes, expected_kind: str | None = None) -> nn.Module:
    from .data import _Reader

    r = _Reader(data)
    if not data:
        raise FormatError("empty checkpoint", offset=0)
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise FormatError("checkpoint magic mismatch", offset=0)
    version, kind_len = struct.unpack("<II", r.take(8, "header"))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=len(CKPT_MAGIC))
    kind_off = r.pos
    kind = r.take(kind_len, "kind tag").decode("utf-8", "replace")
    if expected_kind is not None and kind != expected_kind:
        raise FormatError(f"model kind {kind!r} found, expected {expected_kind!r}", offset=kind_off)
    if kind not in _KINDS:
        raise FormatError(f"unknown model kind {kind!r}", offset=kind_off)
    (hp_len,) = struct.unpack("<I", r.take(4, "hparams length"))
    hp_off = r.pos
    try:
        hp = json.loads(r.take(hp_len, "hparams"))
        cls, cfg_cls = _KINDS[kind]
        model = cls(cfg_cls(**hp))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad hyperparameter block: {exc}", offset=hp_off) from exc
    (n,) = struct.unpack("<Q", r.take(8, "parameter count"))
    state = model.state_dict()
    expected = sum(v.numel() for v in state.values())
    if n != expected:
        raise FormatError(f"parameter count {n} does not match architecture ({expected})",
                          offset=r.pos - 8)
    flat = np.frombuffer(r.take(4 * n, "parameters"), "<f4")
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes", offset=r.pos)
    pos = 0
    for k, v in state.items():
        state[k] = torch.from_numpy(flat[pos:pos + v.numel()].copy()).reshape(v.shape).to(v.dtype)
        pos += v.numel()
    model.load_state_dict(state)
    model.eval()
    return model


def save_model(model: nn.Module, path: str | Path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path: str | Path, expected_kind: str | None = None) -> nn.Module:
    return model_from_bytes(Path(path).read_bytes(), expected_kind)
