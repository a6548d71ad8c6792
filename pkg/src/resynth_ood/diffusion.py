"""Noise schedules and deterministic DDIM sampling / inversion kernels.

Images live in [0, 1]; ``alpha[t]`` is the cumulative signal coefficient with
``alpha[0] = 1``. All kernels are plain tensor arithmetic and keep the dtype of
their inputs, so float64 inputs give float64 results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class ScheduleConfig:
    T: int = 200
    kind: str = "linear"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray  # length T + 1, alpha[0] == 1

    def __post_init__(self):
        a = self.alpha
        if len(a) != self.T + 1 or a[0] != 1.0:
            raise ConfigError("alpha must have T + 1 entries with alpha[0] = 1")
        if not np.all(np.diff(a) < 0):
            raise ConfigError("alpha must be strictly decreasing")
        if not (a[-1] > 0 and a[1] <= 1):
            raise ConfigError("alpha must lie in (0, 1]")

    def a(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha[t])

    def __eq__(self, other):
        return (isinstance(other, NoiseSchedule) and self.T == other.T
                and np.array_equal(self.alpha, other.alpha))

    def __hash__(self):
        return hash((self.T, self.alpha.tobytes()))


def make_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """Build alpha_1..alpha_T.

    ``linear`` uses per-step betas spaced linearly over [1e-4, 0.02] at T=1000,
    rescaled by 1000/T so shorter chains still end near pure noise.
    """
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if kind == "linear":
        scale = 1000.0 / T
        betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
        betas = np.clip(betas, 1e-8, 0.999)
        alpha = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        alpha = np.clip(f[1:] / f[0], 1e-5, 1.0)
        alpha = np.minimum.accumulate(alpha)
        # guard strict monotonicity after clipping
        alpha = alpha - np.arange(T) * 1e-12
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T, np.concatenate([[1.0], alpha]))


def make_tau(T: int, n_steps: int) -> list[int]:
    """Uniform-stride sub-sequence of [1..T] of length n_steps ending at T."""
    if not 1 <= n_steps <= T:
        raise ConfigError(f"tau length must lie in [1, {T}], got {n_steps}")
    tau = sorted({int(round(k * T / n_steps)) for k in range(1, n_steps + 1)})
    if len(tau) != n_steps or tau[0] < 1:
        raise ConfigError(f"cannot build {n_steps} distinct steps over T={T}")
    return tau


# ----------------------------------------------------------------- kernels


def forward_diffuse(x0: torch.Tensor, t: int, schedule: NoiseSchedule,
                    noise: torch.Tensor) -> torch.Tensor:
    """Closed-form marginal sample of x_t given x_0 and a standard normal draw."""
    if noise.shape != x0.shape:
        raise ConfigError(f"noise shape {tuple(noise.shape)} != image shape {tuple(x0.shape)}")
    a = schedule.a(t)
    return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * noise


def forward_step(x_prev: torch.Tensor, t: int, schedule: NoiseSchedule,
                 noise: torch.Tensor) -> torch.Tensor:
    """One Markov kernel q(x_t | x_{t-1})."""
    ratio = schedule.a(t) / schedule.a(t - 1)
    return math.sqrt(ratio) * x_prev + math.sqrt(1.0 - ratio) * noise


def estimate_x0(x_t: torch.Tensor, eps: torch.Tensor, t: int,
                schedule: NoiseSchedule) -> torch.Tensor:
    a = schedule.a(t)
    return (x_t - math.sqrt(1.0 - a) * eps) / math.sqrt(a)


@dataclass
class SamplerConfig:
    deterministic: bool = True
    eta: float = 0.0  # sigma_t = eta * DDPM posterior std; only used when not deterministic


def ddim_sigma(t: int, t_prev: int, schedule: NoiseSchedule, eta: float) -> float:
    a_t, a_p = schedule.a(t), schedule.a(t_prev)
    return eta * math.sqrt((1 - a_p) / (1 - a_t) * (1 - a_t / a_p))


def ddim_denoise_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
                      schedule: NoiseSchedule, sigma: float = 0.0,
                      noise: torch.Tensor | None = None) -> torch.Tensor:
    """x_t -> x_{t_prev} along the DDIM update; sigma = 0 gives the deterministic map."""
    if not t > t_prev >= 0:
        raise ConfigError(f"denoise step needs t > t_prev >= 0, got {t} -> {t_prev}")
    a_p = schedule.a(t_prev)
    if sigma * sigma > 1.0 - a_p:
        raise ConfigError(f"sigma^2 = {sigma * sigma:g} exceeds 1 - alpha[t_prev] = {1 - a_p:g}")
    x0_hat = estimate_x0(x_t, eps_hat, t, schedule)
    out = math.sqrt(a_p) * x0_hat + math.sqrt(1.0 - a_p - sigma * sigma) * eps_hat
    if sigma > 0:
        if noise is None:
            raise ConfigError("stochastic step requires a noise draw")
        out = out + sigma * noise
    return out


def ddim_invert_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_next: int,
                     schedule: NoiseSchedule,
                     cfg: SamplerConfig | None = None) -> torch.Tensor:
    if cfg is not None and not cfg.deterministic:
        raise ConfigError("inversion is only defined for the deterministic sampler")
    if not t < t_next <= schedule.T:
        raise ConfigError(f"invert step needs t < t_next <= T, got {t} -> {t_next}")
    a_n = schedule.a(t_next)
    x0_hat = estimate_x0(x_t, eps_hat, t, schedule)
    return math.sqrt(a_n) * x0_hat + math.sqrt(1.0 - a_n) * eps_hat


# ----------------------------------------------------------------- trajectories


@dataclass
class TrajectoryPoint:
    t: int
    x_t: torch.Tensor
    xhat0: torch.Tensor
    quality: dict[str, np.ndarray] | None = None


StopHook = Callable[[list[TrajectoryPoint]], "np.ndarray | bool"]


@dataclass
class Inversion:
    points: list[TrajectoryPoint]
    stop_index: np.ndarray  # per sample, index into points

    @property
    def t_stop(self) -> np.ndarray:
        return np.array([self.points[i].t for i in self.stop_index])

    def latent(self) -> torch.Tensor:
        stacked = torch.stack([p.x_t for p in self.points])
        idx = torch.as_tensor(self.stop_index)
        return stacked[idx, torch.arange(len(idx))]


def invert_trajectory(x0: torch.Tensor, eps_fn: EpsFn, schedule: NoiseSchedule,
                      tau: Sequence[int], stop: StopHook | None = None,
                      t_max: int | None = None, refine: int = 0) -> Inversion:
    """Deterministic inversion of a batch along ``tau``.

    The step t -> t_next evaluates the noise model at (x_t, t_next), the level
    the matching denoise step uses. Each point's x-hat_0 is built from the noise
    predicted at that point (the same evaluation drives the following step), so
    the last point costs one extra model call. ``stop`` sees the trajectory so
    far and returns a per-sample (or scalar) fire flag; a sample keeps its first
    firing index. Inversion ends once every sample has fired, at the end of
    ``tau``, or at the last tau element <= ``t_max``.

    ``refine`` adds fixed-point passes per step: the noise is re-evaluated at
    the provisional x_next and the step is redone, which pulls the inversion
    toward the exact inverse of the denoise step.
    """
    if refine < 0:
        raise ConfigError(f"refine must be >= 0, got {refine}")
    full = list(tau)
    tau = full if t_max is None else [t for t in full if t <= t_max]
    if not tau:
        raise ConfigError(f"no tau element <= t_max={t_max}")
    B = x0.shape[0]
    stop_index = np.full(B, -1, dtype=np.int64)
    points: list[TrajectoryPoint] = []
    eps = eps_fn(x0, tau[0])
    x, t = x0, 0
    for i, t_cur in enumerate(tau):
        x_next = ddim_invert_step(x, eps, t, t_cur, schedule)
        for _ in range(refine):
            x_next = ddim_invert_step(x, eps_fn(x_next, t_cur), t, t_cur, schedule)
        x, t = x_next, t_cur
        t_eval = full[i + 1] if i + 1 < len(full) else t_cur
        eps = eps_fn(x, t_eval)
        points.append(TrajectoryPoint(t_cur, x, estimate_x0(x, eps, t_cur, schedule)))
        if stop is not None:
            fired = np.broadcast_to(np.asarray(stop(points), dtype=bool), (B,))
            stop_index[(stop_index < 0) & fired] = i
            if np.all(stop_index >= 0):
                break
    stop_index[stop_index < 0] = len(points) - 1
    return Inversion(points, stop_index)


Guidance = Callable[[torch.Tensor, int, torch.Tensor, np.ndarray], torch.Tensor]


def sample_trajectory(x_start: torch.Tensor, t_start, eps_fn: EpsFn,
                      schedule: NoiseSchedule, tau: Sequence[int],
                      guidance: Guidance | None = None) -> torch.Tensor:
    """Deterministic DDIM synthesis from per-sample start levels down to t = 0.

    ``t_start`` is an int or one timestep per sample; each must be a member of
    ``tau``. A sample only joins the loop once the level reaches its start.
    ``eps_fn`` is the label-free noise model; ``guidance(x_t, t, eps, idx)``
    maps its prediction for the active rows ``idx`` to the one used in the step.
    """
    tau = sorted(tau)
    B = x_start.shape[0]
    starts = np.broadcast_to(np.asarray(t_start, dtype=np.int64), (B,))
    missing = set(starts.tolist()) - set(tau)
    if missing:
        raise ConfigError(f"start timesteps {sorted(missing)} are not in tau")
    levels = [t for t in tau if t <= starts.max()][::-1]
    x = x_start.clone()
    for k, t in enumerate(levels):
        t_prev = levels[k + 1] if k + 1 < len(levels) else 0
        idx = np.nonzero(starts >= t)[0]
        xi = x[idx]
        eps = eps_fn(xi, t)
        if guidance is not None:
            eps = guidance(xi, t, eps, idx)
        x[idx] = ddim_denoise_step(xi, eps, t, t_prev, schedule)
    return x

