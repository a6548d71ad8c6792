"""Label-conditioning kernels for the synthesis pass."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, estimate_x0
from .errors import ConfigError
from .models import grad_cam, score_eval
from .rng import RngStream


@dataclass
class CutoutSpec:
    hole_frac: float = 0.125  # hole side as a fraction of the image side
    holes: int = 1
    fill: float | None = None  # None -> dataset mean pixel, resolved by the caller

    def hole_side(self, side: int) -> int:
        return max(1, min(side, int(round(self.hole_frac * side))))

    def validate(self):
        if not 0 < self.hole_frac <= 1:
            raise ConfigError(f"cutout hole_frac must lie in (0, 1], got {self.hole_frac}")
        if self.holes < 0:
            raise ConfigError("cutout holes must be >= 0")


@dataclass
class GuidanceConfig:
    mode: str = "classifier"  # classifier | classifier_free
    scale: float = 5.0  # classifier-guidance s
    omega: float = 3.0  # classifier-free w
    grad_sign: float = -1.0  # -1 moves the synthesis toward higher p(y | x)
    cutout: CutoutSpec = field(default_factory=CutoutSpec)
    n_aug: int = 4
    chain_rule: str = "scaled_identity"  # scaled_identity | full
    use_xhat0: bool = True
    use_cutout: bool = True
    cam_cutpoint: float = 0.2

    def validate(self):
        if self.mode not in ("classifier", "classifier_free"):
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.scale < 0 or self.omega < 0:
            raise ConfigError("guidance scales must be >= 0")
        if self.chain_rule not in ("scaled_identity", "full"):
            raise ConfigError(f"unknown chain_rule {self.chain_rule!r}")
        if self.n_aug < 1:
            raise ConfigError("n_aug must be >= 1")
        if not 0.0 <= self.cam_cutpoint <= 1.0:
            raise ConfigError("cam_cutpoint must lie in [0, 1]")
        self.cutout.validate()


# ---------------------------------------------------------------- classifier guidance


def classifier_guided_eps(eps: torch.Tensor, grad_logp: torch.Tensor, s: float, t: int,
                          schedule: NoiseSchedule, sign: float = -1.0) -> torch.Tensor:
    return eps + sign * s * math.sqrt(1.0 - schedule.a(t)) * grad_logp


def cutout_masks(shape, spec: CutoutSpec, rngs: Sequence[RngStream]) -> torch.Tensor:
    """Keep-masks (B, 1, H, W): 0 inside holes, 1 elsewhere. One stream per sample."""
    B, _, H, W = shape
    keep = torch.ones((B, 1, H, W))
    hs, ws = spec.hole_side(H), spec.hole_side(W)
    for b in range(B):
        for _ in range(spec.holes):
            i = int(rngs[b].integers(0, H - hs + 1))
            j = int(rngs[b].integers(0, W - ws + 1))
            keep[b, :, i:i + hs, j:j + ws] = 0.0
    return keep


def apply_cutout(x: torch.Tensor, keep: torch.Tensor, fill: float) -> torch.Tensor:
    keep = keep.to(x.dtype)
    return x * keep + fill * (1.0 - keep)


def cutout(x: torch.Tensor, spec: CutoutSpec, rng: RngStream | Sequence[RngStream]) -> torch.Tensor:
    batched = x.ndim == 4
    xb = x if batched else x[None]
    rngs = [rng] * len(xb) if isinstance(rng, RngStream) else list(rng)
    fill = 0.0 if spec.fill is None else spec.fill
    out = apply_cutout(xb, cutout_masks(xb.shape, spec, rngs), fill)
    return out if batched else out[0]


def _log_prob(clf, x, y):
    return F.log_softmax(clf(x), dim=1).gather(1, y[:, None]).sum()


def draw_aug_masks(shape, cfg: GuidanceConfig, rngs) -> list[torch.Tensor]:
    if not cfg.use_cutout or cfg.cutout.holes == 0:
        return [torch.ones((shape[0], 1) + tuple(shape[2:]))]
    return [cutout_masks(shape, cfg.cutout, rngs) for _ in range(cfg.n_aug)]


def clean_grad(clf, x_t: torch.Tensor, t: int, y, net, schedule: NoiseSchedule,
               cfg: GuidanceConfig, rngs=None, eps: torch.Tensor | None = None,
               masks: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Gradient w.r.t. x_t of the mean over augmentations of log p(y | cutout(x-hat_0(x_t))).

    ``scaled_identity`` differentiates at x-hat_0 and divides by sqrt(alpha_t);
    ``full`` backpropagates through the score network as well. With
    ``use_xhat0`` off the classifier sees x_t itself. ``masks`` freezes the
    cutouts (one keep-mask per augmentation); otherwise they are drawn from
    ``rngs``.
    """
    y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(x_t.shape[0])
    if masks is None:
        masks = draw_aug_masks(x_t.shape, cfg, rngs)
    fill = 0.0 if cfg.cutout.fill is None else cfg.cutout.fill
    K = len(masks)
    a_t = schedule.a(t)

    def objective(z):
        zs = torch.cat([apply_cutout(z, m, fill) for m in masks])
        return _log_prob(clf, zs, y.repeat(K)) / K

    with torch.enable_grad():
        if not cfg.use_xhat0:
            z = x_t.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(objective(z), z)
            return g
        if cfg.chain_rule == "full":
            xt = x_t.detach().requires_grad_(True)
            e = score_eval(net, xt, t)
            (g,) = torch.autograd.grad(objective(estimate_x0(xt, e, t, schedule)), xt)
            return g
        if eps is None:
            with torch.no_grad():
                eps = score_eval(net, x_t, t)
        z = estimate_x0(x_t, eps, t, schedule).detach().requires_grad_(True)
        (g,) = torch.autograd.grad(objective(z), z)
    return g / math.sqrt(a_t)


# ---------------------------------------------------------------- classifier-free


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, omega: float) -> torch.Tensor:
    return eps_uncond + omega * (eps_cond - eps_uncond)


def cfg_eps(net, x_t: torch.Tensor, t: int, y, omega: float,
            eps_uncond: torch.Tensor | None = None) -> torch.Tensor:
    if not net.conditional:
        raise ConfigError("classifier-free guidance needs a conditional score network")
    with torch.no_grad():
        if eps_uncond is None:
            eps_uncond = score_eval(net, x_t, t)
        eps_cond = score_eval(net, x_t, t, y)
    return cfg_combine(eps_uncond, eps_cond, omega)


def cam_mask(clf, x0: torch.Tensor, y_pred, cutpoint: float) -> torch.Tensor:
    """Binary (B, 1, H, W) mask of pixels whose CAM reaches the cut-point."""
    cam = grad_cam(clf, x0, y_pred)
    return (cam >= cutpoint).to(x0.dtype)[:, None]


def masked_blend(mask: torch.Tensor, guided: torch.Tensor, plain: torch.Tensor) -> torch.Tensor:
    if mask.shape[-2:] != guided.shape[-2:] or mask.shape[0] != guided.shape[0]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} does not match {tuple(guided.shape)}")
    return torch.where(mask.expand_as(guided) > 0.5, guided, plain)


def dsg_eps(net, x_t: torch.Tensor, t: int, y, omega: float, mask: torch.Tensor,
            eps_uncond: torch.Tensor | None = None) -> torch.Tensor:
    """Classifier-free guidance inside the mask, plain unconditional prediction outside."""
    if mask.shape[0] != x_t.shape[0] or mask.shape[-2:] != x_t.shape[-2:]:
        raise ConfigError(f"mask shape {tuple(mask.shape)} does not match {tuple(x_t.shape)}")
    if eps_uncond is None:
        with torch.no_grad():
            eps_uncond = score_eval(net, x_t, t)
    guided = cfg_eps(net, x_t, t, y, omega, eps_uncond)
    return masked_blend(mask, guided, eps_uncond)
