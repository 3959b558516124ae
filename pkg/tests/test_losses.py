import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stageunlearn.losses import confusion_loss, cross_entropy, dice_loss, segmentation_loss

from oracles import central_gradient, softmax_np


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


# ---- dice


def test_dice_hand_count():
    pred = torch.tensor([[1.0, 1.0, 1.0, 1.0]], dtype=torch.float64)
    label = torch.tensor([[1, 1, 0, 0]])
    assert float(dice_loss(pred, label, eps=0.0)) == pytest.approx(1 / 3, abs=1e-12)


def test_dice_perfect_and_empty():
    label = torch.tensor([[0, 1, 1, 0]])
    assert float(dice_loss(label.double(), label)) == pytest.approx(0.0, abs=1e-9)
    zeros = torch.zeros(1, 8, dtype=torch.float64)
    assert float(dice_loss(zeros, zeros.long())) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_range_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pred = torch.from_numpy(rng.random((2, 27)))
    label = torch.from_numpy(rng.integers(0, 2, (2, 27)))
    v = float(dice_loss(pred, label))
    assert 0.0 <= v <= 1.0
    perm = torch.from_numpy(rng.permutation(27))
    assert float(dice_loss(pred[:, perm], label[:, perm])) == pytest.approx(v, abs=1e-12)


# ---- cross entropy


def test_cross_entropy_examples():
    y = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    assert float(cross_entropy(y, torch.tensor([0]))) == pytest.approx(math.log(2), abs=1e-12)
    onehot = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert float(cross_entropy(onehot, torch.tensor([1]))) == 0.0
    for n in (2, 3, 5):
        u = torch.full((4, n), 1.0 / n, dtype=torch.float64)
        t = torch.arange(4) % n
        assert float(cross_entropy(u, t)) == pytest.approx(math.log(n), abs=1e-12)


def test_cross_entropy_soft_targets_equal_indices():
    rng = np.random.default_rng(0)
    probs = torch.from_numpy(softmax_np(rng.normal(size=(3, 4, 2, 2)), 1))
    idx = torch.from_numpy(rng.integers(0, 4, (3, 2, 2)))
    onehot = torch.nn.functional.one_hot(idx, 4).permute(0, 3, 1, 2).double()
    assert float(cross_entropy(probs, idx)) == pytest.approx(float(cross_entropy(probs, onehot)), rel=1e-12)


def test_cross_entropy_class_relabel_equivariance():
    rng = np.random.default_rng(1)
    probs = torch.from_numpy(softmax_np(rng.normal(size=(6, 3)), 1))
    t = torch.from_numpy(rng.integers(0, 3, 6))
    perm = torch.tensor([2, 0, 1])
    inv = torch.argsort(perm)
    assert float(cross_entropy(probs[:, perm], inv[t])) == pytest.approx(float(cross_entropy(probs, t)), rel=1e-12)


# ---- segmentation


def test_segmentation_loss_is_sum_of_parts():
    rng = np.random.default_rng(2)
    probs = torch.from_numpy(softmax_np(rng.normal(size=(2, 2, 4, 4, 4)), 1))
    label = torch.from_numpy(rng.integers(0, 2, (2, 4, 4, 4)))
    expected = dice_loss(probs[:, 1], label) + cross_entropy(probs, label)
    assert float(segmentation_loss(probs, label)) == pytest.approx(float(expected), rel=1e-12)


def test_segmentation_loss_perfect_prediction():
    label = torch.zeros(1, 4, 4, 4, dtype=torch.long)
    label[0, 1:3, 1:3, 1:3] = 1
    probs = torch.stack([1 - label, label], 1).double()
    assert float(segmentation_loss(probs, label)) == pytest.approx(0.0, abs=1e-6)


# ---- confusion


def test_confusion_exact_values():
    assert float(confusion_loss(torch.tensor([[0.5, 0.5]], dtype=torch.float64))) == 0.0
    for n in (2, 3, 4, 7):
        uniform = torch.full((3, n), 1.0 / n, dtype=torch.float64)
        assert float(confusion_loss(uniform)) == 0.0
        onehot = torch.zeros(1, n, dtype=torch.float64)
        onehot[0, 0] = 1
        assert abs(float(confusion_loss(onehot)) - math.log(n)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_confusion_increases_toward_vertex(n, seed):
    rng = np.random.default_rng(seed)
    vertex = np.zeros(n)
    vertex[rng.integers(n)] = 1
    ts = np.linspace(0, 1, 11)
    vals = [
        float(confusion_loss(torch.from_numpy(((1 - t) / n + t * vertex)[None])))
        for t in ts
    ]
    assert vals[0] == pytest.approx(0.0, abs=1e-15)
    assert all(b > a for a, b in zip(vals, vals[1:]))
    p = rng.dirichlet(np.ones(n))
    assert float(confusion_loss(torch.from_numpy(p[None]))) >= 0


# ---- gradients against central finite differences on 4^3 patches


def _fd_check(f_torch, x0):
    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    f_torch(x).backward()
    fd = central_gradient(lambda a: float(f_torch(torch.from_numpy(a))), x0.copy())
    return rel_err(x.grad.numpy(), fd)


def test_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.05, 0.95, (2, 4, 4, 4))
    label = torch.from_numpy(rng.integers(0, 2, (2, 4, 4, 4)))
    assert _fd_check(lambda p: dice_loss(p, label), pred) < 1e-4


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    probs = softmax_np(rng.normal(size=(2, 2, 4, 4, 4)), 1)
    label = torch.from_numpy(rng.integers(0, 2, (2, 4, 4, 4)))
    assert _fd_check(lambda p: cross_entropy(p, label), probs) < 1e-4


def test_segmentation_gradient_wrt_logits():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(1, 2, 4, 4, 4))
    label = torch.from_numpy(rng.integers(0, 2, (1, 4, 4, 4)))
    assert _fd_check(lambda z: segmentation_loss(torch.softmax(z, 1), label), logits) < 1e-4


def test_confusion_gradient_wrt_logits():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(64, 3))  # one posterior per voxel of a 4^3 patch
    assert _fd_check(lambda z: confusion_loss(torch.softmax(z, 1)), logits) < 1e-4
