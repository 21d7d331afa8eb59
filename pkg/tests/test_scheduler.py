import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldb.errors import ConfigError
from ldb.scheduler import (LdbConfig, Mode, adjust_hyperparams, excluded_ids, mode_for_epoch,
                           plan_epoch, scheduled_lr, select_layers, selection_stream)
from ldb.tensor import RngStream

TEN = list(range(0, 20, 2))  # ten parameterized ids, interleaved with activations


def test_mode_examples():
    assert mode_for_epoch(0, 5) is Mode.STANDARD
    assert mode_for_epoch(5, 5) is Mode.DROP
    assert mode_for_epoch(7, 5) is Mode.STANDARD
    assert mode_for_epoch(3, 1) is Mode.DROP
    assert mode_for_epoch(0, 1) is Mode.STANDARD


@given(st.integers(1, 200), st.integers(1, 20))
def test_drop_epoch_count(epochs, s):
    drops = sum(mode_for_epoch(e, s) is Mode.DROP for e in range(1, epochs + 1))
    assert drops == epochs // s


def test_p_one_selects_everything():
    cfg = LdbConfig(p=1.0)
    for e in range(5):
        assert select_layers(TEN, cfg, selection_stream(cfg, e)) == frozenset(TEN)


def test_tiny_p_selects_exclusions_only():
    cfg = LdbConfig(p=1e-300, keep_head=4, keep_tail=1)
    assert select_layers(TEN, cfg, RngStream(0)) == frozenset([0, 2, 4, 6, 18])
    assert excluded_ids(TEN, cfg) == {0, 2, 4, 6, 18}


def test_selection_matches_replay():
    cfg = LdbConfig(p=0.3, selection_seed=7)
    ids = list(range(10))
    got = select_layers(ids, cfg, selection_stream(cfg, 4))
    # replay: one uniform per droppable layer in forward order from the same stream
    u = RngStream(7, (3, 4)).uniform(5)
    expected = {0, 1, 2, 3, 9} | {lid for lid, ul in zip([4, 5, 6, 7, 8], u) if ul < 0.3}
    assert got == frozenset(expected)


def test_plan_matches_replay():
    cfg = LdbConfig(p=0.3, s=2, selection_seed=11, base_batch=128, kappa=2.0)
    ids = list(range(10))
    plan = plan_epoch(2, ids, cfg, 0.1)
    u = RngStream(11, (3, 2)).uniform(5)
    expected = {0, 1, 2, 3, 9} | {lid for lid, ul in zip([4, 5, 6, 7, 8], u) if ul < 0.3}
    assert plan.mode is Mode.DROP
    assert plan.selected == frozenset(expected)
    assert plan.lr == 0.1 / 0.3
    assert plan.batch == 256


def test_plan_epoch_zero_is_standard():
    cfg = LdbConfig(s=1)
    plan = plan_epoch(0, TEN, cfg, 0.1)
    assert plan.mode is Mode.STANDARD and plan.selected == frozenset(TEN)
    assert (plan.lr, plan.batch) == (0.1, 128)


def test_degenerate_plan_equals_standard():
    cfg = LdbConfig(p=1.0, kappa=1.0, s=3)
    drop, std = plan_epoch(3, TEN, cfg, 0.07), plan_epoch(2, TEN, cfg, 0.07)
    assert drop.mode is Mode.DROP
    assert (drop.lr, drop.batch, drop.selected) == (std.lr, std.batch, std.selected)


def test_adjust_examples():
    cfg = LdbConfig(p=0.3, kappa=2.0, base_batch=128)
    lr, batch = adjust_hyperparams(Mode.DROP, 0.1, cfg)
    assert lr == 0.1 / 0.3
    assert abs(lr - 1 / 3) <= math.ulp(1 / 3)
    assert batch == 256
    assert adjust_hyperparams(Mode.STANDARD, 0.05, cfg) == (0.05, 128)


def test_batch_rounds_half_up():
    assert adjust_hyperparams(Mode.DROP, 0.1, LdbConfig(kappa=1.5, base_batch=3))[1] == 5
    assert adjust_hyperparams(Mode.DROP, 0.1, LdbConfig(kappa=1.25, base_batch=10))[1] == 13


@given(st.floats(1e-4, 10.0), st.integers(1, 1024), st.sampled_from(list(Mode)))
def test_degenerate_hyperparams(lr, batch, mode):
    cfg = LdbConfig(p=1.0, kappa=1.0, base_batch=batch)
    assert adjust_hyperparams(mode, lr, cfg) == (lr, batch)


def test_selection_marginals():
    ids = list(range(20))
    cfg = LdbConfig(p=0.3, keep_head=4, keep_tail=1, selection_seed=5)
    counts = np.zeros(20)
    for e in range(10000):
        for lid in select_layers(ids, cfg, selection_stream(cfg, e)):
            counts[lid] += 1
    freq = counts / 10000
    for lid in ids:
        if lid < 4 or lid == 19:
            assert freq[lid] == 1.0
        else:
            assert abs(freq[lid] - 0.3) <= 0.02


@settings(max_examples=50)
@given(st.integers(0, 2**64 - 1), st.integers(0, 1000), st.floats(0.01, 1.0))
def test_plan_determinism(seed, epoch, p):
    cfg = LdbConfig(p=p, s=1, selection_seed=seed)
    assert plan_epoch(epoch, TEN, cfg, 0.1) == plan_epoch(epoch, TEN, cfg, 0.1)


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.floats(1e-6, 1.0), st.integers(0, 6), st.integers(0, 6))
def test_selection_contains_exclusions(seed, p, head, tail):
    cfg = LdbConfig(p=p, keep_head=head, keep_tail=tail)
    sel = select_layers(TEN, cfg, RngStream(seed))
    assert excluded_ids(TEN, cfg) <= sel <= set(TEN)
    assert sel


def test_no_exclusions_never_empty():
    cfg = LdbConfig(p=1e-12, keep_head=0, keep_tail=0)
    sel = select_layers(TEN, cfg, RngStream(1))
    assert len(sel) == 1


def test_exclusions_covering_everything(caplog):
    cfg = LdbConfig(keep_head=4, keep_tail=1)
    with caplog.at_level("WARNING"):
        assert select_layers([0, 2, 4], cfg, RngStream(0)) == frozenset([0, 2, 4])
    assert "every layer is selected" in caplog.text


@pytest.mark.parametrize("kwargs,msg", [
    ({"p": 0.0}, r"p must be in \(0,1\]"),
    ({"p": 1.5}, r"p must be in \(0,1\]"),
    ({"s": 0}, "s must be"),
    ({"kappa": 0.5}, "kappa"),
    ({"base_lr": 0.0}, "base_lr"),
    ({"base_batch": 0}, "base_batch"),
    ({"momentum": 1.0}, "momentum"),
])
def test_config_validation(kwargs, msg):
    with pytest.raises(ConfigError, match=msg):
        LdbConfig(**kwargs)


def test_cosine_schedule():
    assert scheduled_lr(0.1, 0, 10) == 0.1
    assert scheduled_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert scheduled_lr(0.1, 3, 10, "constant") == 0.1
    with pytest.raises(ConfigError):
        scheduled_lr(0.1, 0, 10, "step")


def test_drop_lr_scales_scheduled_value():
    cfg = LdbConfig(p=0.5, s=2)
    lr = scheduled_lr(0.1, 4, 10)
    assert plan_epoch(4, TEN, cfg, lr).lr == lr / 0.5
