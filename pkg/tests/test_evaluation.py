import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auroc_pairs, fpr_scan, random_instance
from resynth_ood import evaluation as E
from resynth_ood.errors import ConfigError


def test_auroc_examples():
    assert E.auroc([0.1, 0.2, 0.3, 0.4], [0, 0, 1, 1]) == 1.0
    assert E.auroc([0.5] * 6, [0, 0, 0, 1, 1, 1]) == 0.5
    assert E.auroc([0.3, 0.4, 0.1, 0.2], [0, 0, 1, 1]) == 0.0


def test_errors():
    with pytest.raises(ConfigError):
        E.auroc([0.1, 0.2], [0, 0])
    with pytest.raises(ConfigError):
        E.auroc([0.1, np.nan], [0, 1])
    with pytest.raises(ConfigError):
        E.auroc([0.1], [0, 1])
    with pytest.raises(ConfigError):
        E.fpr_at_tpr(np.arange(40.0), np.arange(40) % 2, tpr=0.0)


@pytest.mark.parametrize("ties", [False, True])
def test_metrics_match_brute_force(ties):
    rng = np.random.default_rng(int(ties))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(50):
            s, y = random_instance(rng, ties=ties)
            assert E.auroc(s, y) == auroc_pairs(s, y)
            fpr, thr = E.fpr_at_tpr(s, y)
            assert (fpr, thr) == fpr_scan(s, y)


def test_fpr_examples():
    ind = np.linspace(0, 1, 100)
    s = np.concatenate([ind, ind + 2])
    y = np.r_[np.zeros(100), np.ones(100)]
    assert E.fpr_at_tpr(s, y)[0] == 0.0
    same = np.concatenate([ind, ind])
    fpr, thr = E.fpr_at_tpr(same, y)
    assert abs(fpr - 0.95) <= 1 / 100
    assert np.mean(ind <= thr) >= 0.95


def test_fpr_warns_on_few_ind_samples():
    with pytest.warns(UserWarning):
        E.fpr_at_tpr([0.0, 1.0, 2.0], [0, 0, 1])


def test_sweep_rows():
    rep = E.evaluate([0.1, 0.9] * 20, [0, 1] * 20)
    rows = E.sweep("c", [0.2, 0.2], lambda v: rep)
    assert rows[0] == rows[1]
    assert rows[0]["c"] == 0.2 and rows[0]["auroc"] == rep.auroc
    assert E.rows_to_csv(rows).splitlines()[0].startswith("c,auroc,fpr_at_95_tpr")
    assert E.rows_to_csv([]) == ""
    text = E.summary_text(rep)
    assert "auroc: 1.000000" in text and "n_ind: 20" in text


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_auroc_invariants(seed):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng, n_max=60, ties=bool(seed % 2))
    a = E.auroc(s, y)
    assert 0.0 <= a <= 1.0
    assert E.auroc(np.exp(s / 3) * 5 + 1, y) == a
    assert E.auroc(-s, ~y) == a
    assert abs(E.auroc(-s, y) - (1 - a)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_fpr_monotone_in_target(seed):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng, n_max=120)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f95, thr = E.fpr_at_tpr(s, y, 0.95)
        f80, _ = E.fpr_at_tpr(s, y, 0.80)
    assert f80 <= f95
    assert np.mean(s[~y] <= thr) >= 0.95
