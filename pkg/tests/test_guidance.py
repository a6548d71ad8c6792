import math

import numpy as np
import pytest
import torch

from oracles import fd_rel_errors
from resynth_ood import guidance as G
from resynth_ood.diffusion import estimate_x0, make_schedule
from resynth_ood.errors import ConfigError
from resynth_ood.models import (Classifier, ClassifierConfig, ScoreNetConfig, ScoreNetwork,
                                input_log_prob_grad, score_eval)
from resynth_ood.rng import RngStream


@pytest.fixture(scope="module")
def sched():
    return make_schedule(200)


def _rand(shape, seed):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape))


def _clf():
    return Classifier(ClassifierConfig(width=8, seed=1)).double()


def _net(perturb=True):
    net = ScoreNetwork(ScoreNetConfig(width=8, emb_dim=16, seed=2)).double()
    if perturb:
        g = torch.Generator().manual_seed(0)
        with torch.no_grad():
            net.conv_out.weight.copy_(0.05 * torch.randn(net.conv_out.weight.shape, generator=g))
    return net


# ---------------------------------------------------------------- formulas


def test_classifier_guided_eps_oracle(sched):
    rng = np.random.default_rng(0)
    for i in range(100):
        t = int(rng.integers(1, 201))
        s = float(rng.uniform(0, 10))
        e, g = _rand((2, 1, 4, 4), 2 * i), _rand((2, 1, 4, 4), 2 * i + 1)
        want = e - s * math.sqrt(1 - sched.alpha[t]) * g
        got = G.classifier_guided_eps(e, g, s, t, sched)
        assert torch.max(torch.abs(got - want)) <= 1e-9
    assert torch.equal(G.classifier_guided_eps(e, g, 0.0, 50, sched), e)


def test_cfg_combine_oracle_and_identities():
    rng = np.random.default_rng(1)
    for i in range(100):
        u, c = _rand((2, 1, 4, 4), 2 * i), _rand((2, 1, 4, 4), 2 * i + 1)
        w = float(rng.uniform(0, 8))
        want = (1 - w) * u + w * c
        assert torch.max(torch.abs(G.cfg_combine(u, c, w) - want)) <= 1e-9
    assert torch.equal(G.cfg_combine(u, c, 0.0), u)
    assert torch.allclose(G.cfg_combine(u, c, 1.0), c, atol=1e-15)


def test_dsg_mask_identities(sched):
    net = ScoreNetwork(ScoreNetConfig(width=8, emb_dim=16, seed=2))
    with torch.no_grad():
        net.conv_out.weight.normal_(0, 0.1)
    x = torch.rand(2, 1, 16, 16)
    u = score_eval(net, x, 30)
    full = G.cfg_eps(net, x, 30, 1, 3.0)
    ones = torch.ones(2, 1, 16, 16)
    assert torch.equal(G.dsg_eps(net, x, 30, 1, 3.0, ones), full)
    assert torch.equal(G.dsg_eps(net, x, 30, 1, 3.0, torch.zeros_like(ones)), u)
    half = ones.clone()
    half[..., :8] = 0
    mixed = G.dsg_eps(net, x, 30, 1, 3.0, half)
    assert torch.equal(mixed[..., 8:], full[..., 8:])
    assert torch.equal(mixed[..., :8], u[..., :8])
    with pytest.raises(ConfigError):
        G.dsg_eps(net, x, 30, 1, 3.0, torch.ones(2, 1, 8, 8))


def test_cfg_needs_conditional_net():
    net = ScoreNetwork(ScoreNetConfig(width=8, emb_dim=16, num_classes=0))
    with pytest.raises(ConfigError):
        G.cfg_eps(net, torch.zeros(1, 1, 16, 16), 5, 0, 2.0)


def test_cam_mask_is_binary_and_monotone_in_cutpoint():
    clf = Classifier(ClassifierConfig(width=8, seed=1))
    x = torch.rand(3, 1, 16, 16, generator=torch.Generator().manual_seed(0))
    masks = [G.cam_mask(clf, x, torch.tensor([0, 1, 2]), c) for c in (0.0, 0.2, 0.6, 1.0)]
    for m in masks:
        assert set(torch.unique(m).tolist()) <= {0.0, 1.0}
        assert m.shape == (3, 1, 16, 16)
    assert torch.count_nonzero(1 - masks[0]) == 0
    counts = [int(m.sum()) for m in masks]
    assert counts == sorted(counts, reverse=True)
    assert counts[-1] >= 1  # the peak always survives when the map is non-zero


# ---------------------------------------------------------------- cutout


def test_cutout_zeroes_exact_hole_area():
    spec = G.CutoutSpec(hole_frac=0.25, holes=1, fill=0.0)
    x = torch.ones(5, 1, 16, 16)
    out = G.cutout(x, spec, [RngStream(0, ("s", i)) for i in range(5)])
    for img in out:
        assert int((img == 0).sum()) == 16
    assert spec.hole_side(16) == 4
    again = G.cutout(x, spec, [RngStream(0, ("s", i)) for i in range(5)])
    assert torch.equal(out, again)


def test_cutout_fill_value_and_validation():
    spec = G.CutoutSpec(hole_frac=0.125, holes=2, fill=0.3)
    out = G.cutout(torch.ones(1, 16, 16), spec, RngStream(4))
    assert out.shape == (1, 16, 16)
    vals = set(np.round(out.numpy().ravel().astype(float), 6).tolist())
    assert vals == {0.3, 1.0}
    with pytest.raises(ConfigError):
        G.CutoutSpec(hole_frac=0.0).validate()
    with pytest.raises(ConfigError):
        G.GuidanceConfig(mode="other").validate()


# ---------------------------------------------------------------- clean gradient


def _fd_check(f, x, grad, coords):
    assert fd_rel_errors(f, x, grad, coords).max() <= 1e-3


def _coords(n=20, seed=0):
    return [tuple(c) for c in np.random.default_rng(seed).integers(0, 16, size=(n, 2))]


def _objective(clf, masks, fill, y):
    def obj(z):
        zs = torch.cat([G.apply_cutout(z, m, fill) for m in masks])
        return float(torch.log_softmax(clf(zs), 1)[:, y].mean())
    return obj


def test_clean_grad_full_chain_matches_finite_differences(sched):
    clf, net = _clf(), _net()
    t, y = 60, 1
    cfg = G.GuidanceConfig(chain_rule="full", cutout=G.CutoutSpec(fill=0.4))
    x = _rand((1, 1, 16, 16), 3) * 0.5 + 0.5
    masks = G.draw_aug_masks(x.shape, cfg, [RngStream(9)])
    grad = G.clean_grad(clf, x, t, y, net, sched, cfg, masks=masks)
    obj = _objective(clf, masks, 0.4, y)

    def f(z):
        with torch.no_grad():
            return obj(estimate_x0(z, score_eval(net, z, t), t, sched))

    _fd_check(f, x, grad, _coords())


def test_clean_grad_scaled_identity_matches_finite_differences(sched):
    clf, net = _clf(), _net()
    t, y = 60, 2
    cfg = G.GuidanceConfig(cutout=G.CutoutSpec(fill=0.4))
    x = _rand((1, 1, 16, 16), 4) * 0.5 + 0.5
    masks = G.draw_aug_masks(x.shape, cfg, [RngStream(5)])
    with torch.no_grad():
        eps = score_eval(net, x, t)
    grad = G.clean_grad(clf, x, t, y, net, sched, cfg, eps=eps, masks=masks)
    obj = _objective(clf, masks, 0.4, y)
    a = sched.alpha[t]

    # eps is held fixed, so x-hat_0 is affine in x_t with slope 1/sqrt(a)
    def f(z):
        with torch.no_grad():
            return obj(estimate_x0(z, eps, t, sched))

    _fd_check(f, x, grad, _coords(seed=1))
    z0 = estimate_x0(x, eps, t, sched)
    assert torch.allclose(grad * math.sqrt(a), G.clean_grad(
        clf, z0, t, y, net, sched, G.GuidanceConfig(use_xhat0=False, cutout=cfg.cutout),
        masks=masks), atol=1e-12)


def test_chain_modes_agree_for_a_constant_score(sched):
    clf, net = _clf(), _net(perturb=False)  # zero output layer: eps == 0
    x = _rand((2, 1, 16, 16), 6)
    kw = dict(masks=[torch.ones(2, 1, 16, 16)])
    a = G.clean_grad(clf, x, 90, [0, 3], net, sched, G.GuidanceConfig(chain_rule="full"), **kw)
    b = G.clean_grad(clf, x, 90, [0, 3], net, sched, G.GuidanceConfig(), **kw)
    assert torch.allclose(a, b, atol=1e-12)


def test_clean_grad_without_holes_reduces_to_plain_gradient(sched):
    clf, net = _clf(), _net()
    t = 40
    x = _rand((2, 1, 16, 16), 7)
    cfg = G.GuidanceConfig(cutout=G.CutoutSpec(holes=0))
    masks = G.draw_aug_masks(x.shape, cfg, None)
    assert len(masks) == 1
    got = G.clean_grad(clf, x, t, [1, 2], net, sched, cfg, masks=masks)
    with torch.no_grad():
        z = estimate_x0(x, score_eval(net, x, t), t, sched)
    want = input_log_prob_grad(clf, z, torch.tensor([1, 2])) / math.sqrt(sched.alpha[t])
    assert torch.allclose(got, want, atol=1e-12)
    off = G.GuidanceConfig(use_cutout=False)
    assert len(G.draw_aug_masks(x.shape, off, None)) == 1


def test_clean_grad_masks_are_reproducible(sched):
    clf, net = _clf(), _net()
    x = _rand((2, 1, 16, 16), 8)
    cfg = G.GuidanceConfig()
    g1 = G.clean_grad(clf, x, 50, 0, net, sched, cfg, rngs=[RngStream(1, (i,)) for i in range(2)])
    g2 = G.clean_grad(clf, x, 50, 0, net, sched, cfg, rngs=[RngStream(1, (i,)) for i in range(2)])
    assert torch.equal(g1, g2)
