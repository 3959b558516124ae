import itertools
from dataclasses import replace

import pytest
import torch

from stageunlearn.core import RunConfig, uba
from stageunlearn.model import build_model
from stageunlearn.scheduler import (
    AccuracyWindow,
    NonFiniteLossError,
    SchedulerState,
    StepPlan,
    build_optimizers,
    execute_step,
    initial_state,
    plan_step,
)

from oracles import simulate_schedule

CFG = RunConfig(
    encoder_depth=6, patch_size=(128,) * 3, epochs=100, warmup_epochs=10,
    tolerance=0.05, patience=3, unlearn_stages=(6,),
)


def _post_warmup(cfg):
    return replace(initial_state(cfg), epoch=cfg.effective_warmup + 1)


def _run(cfg, trace, stage=6):
    state = _post_warmup(cfg)
    fired = []
    for acc in trace:
        plan, state = plan_step(state, cfg, {stage: acc}, 2)
        fired.append(stage in plan.unlearn_stages_now)
    return fired, state


# ---- planning


def test_warmup_never_unlearns():
    state = replace(initial_state(CFG), epoch=3)
    plan, new = plan_step(state, CFG, {6: 1.0}, 2)
    assert plan.unlearn_stages_now == ()
    assert plan.train_classifier_stages == (1, 2, 3, 4, 5, 6)
    assert plan.do_segmentation_step
    assert new == state


def test_fires_when_counter_exceeds_patience():
    fired, state = _run(CFG, [0.9] * 4)
    assert fired == [False, False, False, True]
    assert state.counters[6] == 4


def test_dip_resets_counter():
    fired, state = _run(CFG, [0.9, 0.9, 0.5, 0.9])
    assert fired == [False] * 4
    assert state.counters[6] == 1


def test_accuracy_equal_to_bound_is_not_above():
    bound = uba(2, CFG.tolerance)
    fired, state = _run(CFG, [0.9, 0.9, 0.9, bound])
    assert state.counters[6] == 0 and not any(fired)


@pytest.mark.parametrize("patience", [1, 2, 3])
def test_exhaustive_traces_match_reference(patience):
    cfg = replace(CFG, patience=patience)
    for trace in itertools.product((0.4, 0.6), repeat=6):
        fired, _ = _run(cfg, trace)
        assert fired == simulate_schedule(trace, patience, 0.05, 2), trace


def test_plans_are_deterministic():
    trace = [0.6, 0.6, 0.4, 0.6, 0.6, 0.6, 0.6]
    assert _run(CFG, trace) == _run(CFG, trace)


def test_stages_are_independent():
    cfg = replace(CFG, unlearn_stages=(4, 5, 6), patience=1)
    state = _post_warmup(cfg)
    for accs in [{4: 0.9, 5: 0.4, 6: 0.9}, {4: 0.9, 5: 0.9, 6: 0.4}]:
        plan, state = plan_step(state, cfg, accs, 2)
    assert plan.unlearn_stages_now == (4,)
    assert state.counters == {4: 2, 5: 1, 6: 0}


def test_only_configured_stages_unlearn():
    cfg = replace(CFG, unlearn_stages=(2, 5), patience=0)
    state = _post_warmup(cfg)
    plan, state = plan_step(state, cfg, {s: 1.0 for s in range(1, 7)}, 2)
    assert set(plan.unlearn_stages_now) == {2, 5}
    assert set(state.counters) == {2, 5}


def test_missing_accuracies_keep_counters_at_zero():
    state = _post_warmup(CFG)
    for _ in range(5):
        plan, state = plan_step(state, CFG, None, 2)
    assert plan.unlearn_stages_now == () and state.counters[6] == 0


@pytest.mark.parametrize("learn, unlearn", [(1, 1), (2, 1), (3, 1), (1, 3), (4, 2)])
def test_fixed_ratio_window(learn, unlearn):
    cfg = replace(CFG, schedule_mode="fixed_lur", lur=(learn, unlearn), unlearn_stages=(5, 6))
    state = _post_warmup(cfg)
    flags = []
    for k in range(6 * (learn + unlearn)):
        # accuracies are ignored in this mode
        plan, state = plan_step(state, cfg, {5: 0.0, 6: 1.0}, 2)
        flags.append(bool(plan.unlearn_stages_now))
        if plan.unlearn_stages_now:
            assert plan.unlearn_stages_now == (5, 6)
    w = learn + unlearn
    for start in range(len(flags) - w + 1):
        assert sum(flags[start:start + w]) == unlearn


def test_state_round_trip():
    _, state = _run(CFG, [0.9, 0.9])
    assert SchedulerState.from_dict(state.to_dict()) == state


def test_accuracy_window():
    w = AccuracyWindow(3)
    assert not w.full()
    for a in (1.0, 0.0, 0.5, 0.5):
        w.update({1: a})
    assert w.full()
    assert w.means() == {1: pytest.approx(1 / 3)}
    assert AccuracyWindow(3, w.to_dict()).means() == w.means()
    w.clear()
    assert w.means() == {} and not w.full()


# ---- execution

SMALL = RunConfig(encoder_depth=3, patch_size=(16, 16, 16), base_channels=2, batch_size=2, seg_optimizer="adam")


def _setup(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    net, clfs = build_model(cfg, 2)
    opts = build_optimizers(cfg, net, clfs)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 1, 16, 16, 16, generator=gen)
    y = (torch.rand(2, 16, 16, 16, generator=gen) > 0.8).long()
    d = torch.tensor([0, 1])
    return net, clfs, opts, (x, y, d)


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _changed(before, module, prefix=""):
    return {k for k, v in module.state_dict().items() if k.startswith(prefix) and not torch.equal(before[k], v)}


def test_classifier_training_does_not_move_network():
    net_a, clfs_a, opts_a, batch = _setup()
    net_b, clfs_b, opts_b, _ = _setup()
    clf_before = _snapshot(clfs_a)
    execute_step(StepPlan((1, 2, 3)), net_a, clfs_a, *batch, opts_a)
    execute_step(StepPlan(()), net_b, clfs_b, *batch, opts_b)
    for k, v in net_a.state_dict().items():
        assert torch.equal(v, net_b.state_dict()[k]), k
    assert _changed(clf_before, clfs_a)


@pytest.mark.parametrize("stage", [1, 2, 3])
def test_unlearning_touches_only_shallower_encoder_stages(stage):
    cfg = replace(SMALL, lr_seg=0.0, weight_decay=0.0)
    net, clfs, opts, batch = _setup(cfg)
    net_before, clf_before = _snapshot(net), _snapshot(clfs)
    result = execute_step(StepPlan((), (stage,)), net, clfs, *batch, opts)
    assert result.conf_loss[stage] > 0
    assert not _changed(clf_before, clfs)
    assert not _changed(net_before, net, "decoder") and not _changed(net_before, net, "head")
    for s in range(1, 4):
        moved = _changed(net_before, net, f"encoder.{s - 1}.")
        if s <= stage:
            assert moved, s
        else:
            assert not moved, s


def test_constant_classifier_scores_chance_on_balanced_batch():
    cfg = replace(SMALL, lr_classifier=0.0)
    net, clfs, opts, batch = _setup(cfg)
    with torch.no_grad():
        for clf in clfs.values():
            clf.fc.weight.zero_()
            clf.fc.bias.copy_(torch.tensor([1.0, 0.0]))
    result = execute_step(StepPlan((1, 2, 3)), net, clfs, *batch, opts)
    assert result.accuracy == {1: 0.5, 2: 0.5, 3: 0.5}


def test_non_finite_loss_raises():
    net, clfs, opts, (x, y, d) = _setup()
    x = x.clone()
    x[0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as info:
        execute_step(StepPlan((1,)), net, clfs, x, y, d, opts)
    assert "seg_loss" in info.value.losses

