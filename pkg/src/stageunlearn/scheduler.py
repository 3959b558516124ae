"""Learning/unlearning state machine and the three-phase training step.

Each iteration is planned by :func:`plan_step` and carried out by
:func:`execute_step`:

1. segmentation update of the whole network,
2. one update of every stage's domain classifier on detached encoder features,
3. for every stage whose classifier has stayed above the upper-bound accuracy
   for more than ``patience`` consecutive iterations, a fresh encoder forward
   pass up to that stage and a confusion-loss update of encoder stages 1..i
   only (classifier frozen).

In ``fixed_lur`` mode step 3 instead fires on a fixed learn:unlearn rhythm for
all configured stages, ignoring accuracies.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import torch
import torch.nn as nn

from .core import RunConfig, uba
from .losses import confusion_loss, cross_entropy, segmentation_loss
from .model import SegNet, StageFeatureTap, classify_domain, forward_segmentation


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, losses: Mapping[str, Any] | None = None):
        super().__init__(message)
        self.losses = dict(losses or {})


@dataclass(frozen=True)
class SchedulerState:
    epoch: int = 1
    counters: Mapping[int, int] = field(default_factory=dict)
    last_acc: Mapping[int, float] = field(default_factory=dict)
    mode: str = "self_supervised"
    lur_step: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "counters": {str(k): v for k, v in self.counters.items()},
            "last_acc": {str(k): v for k, v in self.last_acc.items()},
            "mode": self.mode,
            "lur_step": self.lur_step,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> SchedulerState:
        return cls(
            epoch=int(d["epoch"]),
            counters={int(k): int(v) for k, v in d["counters"].items()},
            last_acc={int(k): float(v) for k, v in d["last_acc"].items()},
            mode=d["mode"],
            lur_step=int(d["lur_step"]),
        )


def initial_state(cfg: RunConfig) -> SchedulerState:
    return SchedulerState(
        epoch=1,
        counters={s: 0 for s in cfg.effective_unlearn_stages},
        mode=cfg.schedule_mode,
    )


@dataclass(frozen=True)
class StepPlan:
    train_classifier_stages: tuple[int, ...]
    unlearn_stages_now: tuple[int, ...] = ()
    do_segmentation_step: bool = True


def plan_step(
    state: SchedulerState,
    cfg: RunConfig,
    accuracies: Mapping[int, float] | None,
    n_domains: int,
) -> tuple[StepPlan, SchedulerState]:
    """Decide which stages to unlearn this iteration.

    ``accuracies`` are the latest (windowed) classifier accuracies per stage.
    A stage counts as above the bound only when strictly greater than it.
    """
    all_stages = tuple(range(1, cfg.encoder_depth + 1))
    if state.epoch <= cfg.effective_warmup:
        return StepPlan(all_stages), state

    accuracies = accuracies or {}
    configured = cfg.effective_unlearn_stages
    last_acc = dict(state.last_acc)
    for s in configured:
        if s in accuracies:
            last_acc[s] = float(accuracies[s])

    if cfg.schedule_mode == "fixed_lur":
        learn, unlearn = cfg.lur
        fire = state.lur_step % (learn + unlearn) >= learn
        plan = StepPlan(all_stages, configured if fire else ())
        return plan, replace(state, last_acc=last_acc, lur_step=state.lur_step + 1)

    bound = uba(n_domains, cfg.tolerance)
    counters = dict(state.counters)
    now = []
    for s in configured:
        acc = accuracies.get(s)
        counters[s] = counters.get(s, 0) + 1 if acc is not None and acc > bound else 0
        if counters[s] > cfg.patience:
            now.append(s)
    return StepPlan(all_stages, tuple(now)), replace(state, counters=counters, last_acc=last_acc)


class AccuracyWindow:
    """Running mean of the last ``size`` per-stage batch accuracies."""

    def __init__(self, size: int, history: Mapping[int, list[float]] | None = None):
        self.size = size
        self.values: dict[int, deque] = {
            int(k): deque(v, maxlen=size) for k, v in (history or {}).items()
        }

    def update(self, accs: Mapping[int, float]) -> None:
        for stage, acc in accs.items():
            self.values.setdefault(stage, deque(maxlen=self.size)).append(float(acc))

    def full(self) -> bool:
        return bool(self.values) and all(len(v) == self.size for v in self.values.values())

    def clear(self) -> None:
        self.values.clear()

    def means(self) -> dict[int, float]:
        return {s: sum(v) / len(v) for s, v in sorted(self.values.items()) if v}

    def to_dict(self) -> dict[str, list[float]]:
        return {str(k): list(v) for k, v in self.values.items()}


@dataclass
class Optimizers:
    segmentation: torch.optim.Optimizer
    classifiers: dict[str, torch.optim.Optimizer]
    unlearning: torch.optim.Optimizer

    def state_dict(self) -> dict[str, Any]:
        return {
            "segmentation": self.segmentation.state_dict(),
            "classifiers": {k: o.state_dict() for k, o in self.classifiers.items()},
            "unlearning": self.unlearning.state_dict(),
        }

    def load_state_dict(self, d: Mapping[str, Any]) -> None:
        self.segmentation.load_state_dict(d["segmentation"])
        for k, o in self.classifiers.items():
            o.load_state_dict(d["classifiers"][k])
        self.unlearning.load_state_dict(d["unlearning"])


def build_optimizers(cfg: RunConfig, net: SegNet, classifiers: nn.ModuleDict) -> Optimizers:
    if cfg.seg_optimizer == "sgd":
        seg = torch.optim.SGD(
            net.parameters(), lr=cfg.lr_seg, momentum=0.99, nesterov=True, weight_decay=cfg.weight_decay
        )
    else:
        seg = torch.optim.Adam(net.parameters(), lr=cfg.lr_seg, weight_decay=cfg.weight_decay)
    clfs = {k: torch.optim.Adam(c.parameters(), lr=cfg.lr_classifier) for k, c in classifiers.items()}
    unlearn = torch.optim.Adam(net.encoder_parameters(), lr=cfg.lr_unlearn)
    return Optimizers(seg, clfs, unlearn)


@dataclass
class StepResult:
    seg_loss: float
    clf_loss: dict[int, float]
    accuracy: dict[int, float]
    conf_loss: dict[int, float]


def _check_finite(value: torch.Tensor, name: str, so_far: Mapping[str, Any]) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(f"non-finite {name}: {v}", {**so_far, name: v})
    return v


def execute_step(
    plan: StepPlan,
    net: SegNet,
    classifiers: nn.ModuleDict,
    images: torch.Tensor,
    labels: torch.Tensor,
    domains: torch.Tensor,
    optimizers: Optimizers,
) -> StepResult:
    """Run one planned iteration on a balanced batch."""
    net.train()
    classifiers.train()

    # (1) segmentation
    probs, taps = forward_segmentation(net, images)
    loss = segmentation_loss(probs, labels)
    seg_loss = _check_finite(loss, "seg_loss", {})
    optimizers.segmentation.zero_grad(set_to_none=True)
    loss.backward()
    optimizers.segmentation.step()

    # (2) classifiers on detached taps
    clf_loss: dict[int, float] = {}
    accuracy: dict[int, float] = {}
    for stage in plan.train_classifier_stages:
        key = str(stage)
        posterior = classify_domain(classifiers[key], taps[stage - 1])
        ce = cross_entropy(posterior, domains)
        clf_loss[stage] = _check_finite(ce, f"clf_loss_{stage}", {"seg_loss": seg_loss})
        accuracy[stage] = float((posterior.detach().argmax(1) == domains).double().mean())
        optimizers.classifiers[key].zero_grad(set_to_none=True)
        ce.backward()
        optimizers.classifiers[key].step()

    # (3) unlearning with a fresh forward pass per stage
    conf_loss: dict[int, float] = {}
    for stage in plan.unlearn_stages_now:
        clf = classifiers[str(stage)]
        feats = net.encode(images, upto=stage)
        tap = StageFeatureTap(stage, feats[-1], detached=False)
        lc = confusion_loss(classify_domain(clf, tap))
        conf_loss[stage] = _check_finite(lc, f"conf_loss_{stage}", {"seg_loss": seg_loss})
        optimizers.unlearning.zero_grad(set_to_none=True)
        lc.backward()
        for p in clf.parameters():
            p.grad = None
        optimizers.unlearning.step()

    return StepResult(seg_loss, clf_loss, accuracy, conf_loss)
