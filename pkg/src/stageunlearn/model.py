"""3D U-Net with per-stage feature taps and one domain classifier per encoder stage."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import RunConfig
from .data import center_crop_or_pad

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


def conv_block(cin: int, cout: int, stride: int | Sequence[int] = 1) -> nn.Sequential:
    """3x3x3 convolution, instance norm, leaky ReLU."""
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
    )


class UpStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.up = nn.Sequential(
            nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2),
            nn.InstanceNorm3d(cout, affine=True),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        )
        self.conv = conv_block(2 * cout, cout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([self.up(x), skip], dim=1))


def stage_channels(depth: int, base: int, cap: int) -> list[int]:
    return [min(base * 2**k, cap) for k in range(depth)]


class SegNet(nn.Module):
    """Encoder stages E1..ED (stride 1 in E1, stride 2 after) and a mirrored
    decoder with skip connections ending in a two-class voxel head."""

    def __init__(
        self,
        depth: int = 6,
        base_channels: int = 32,
        max_channels: int = 320,
        in_channels: int = 1,
        n_classes: int = 2,
        patch_size: Sequence[int] | None = None,
    ):
        super().__init__()
        self.depth = depth
        self.patch_size = tuple(patch_size) if patch_size is not None else None
        self.channels = stage_channels(depth, base_channels, max_channels)
        self.encoder = nn.ModuleList()
        cin = in_channels
        for k, c in enumerate(self.channels):
            self.encoder.append(nn.Sequential(conv_block(cin, c, 1 if k == 0 else 2), conv_block(c, c)))
            cin = c
        # decoder[k] brings stage k+2 features up to stage k+1 resolution
        self.decoder = nn.ModuleList(
            UpStage(self.channels[k + 1], self.channels[k]) for k in range(depth - 1)
        )
        self.head = nn.Conv3d(self.channels[0], n_classes, kernel_size=1)

    def encode(self, x: torch.Tensor, upto: int | None = None) -> list[torch.Tensor]:
        """Features of stages 1..upto; deeper stages are not evaluated."""
        upto = self.depth if upto is None else upto
        feats = []
        for stage in self.encoder[:upto]:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = self.encode(x)
        h = feats[-1]
        for k in reversed(range(self.depth - 1)):
            h = self.decoder[k](h, feats[k])
        return self.head(h), feats

    def encoder_parameters(self, stage: int | None = None):
        """Parameters of encoder stage ``stage`` (1-based), or of all stages."""
        if stage is None:
            return self.encoder.parameters()
        return self.encoder[stage - 1].parameters()


@dataclass
class StageFeatureTap:
    stage: int
    features: torch.Tensor
    detached: bool


def forward_segmentation(net: SegNet, images: torch.Tensor) -> tuple[torch.Tensor, list[StageFeatureTap]]:
    """Voxel class probabilities and one detached feature tap per encoder stage."""
    if images.ndim != 5:
        raise ShapeError(f"expected (batch, channel, x, y, z), got {tuple(images.shape)}")
    if net.patch_size is not None and tuple(images.shape[2:]) != net.patch_size:
        raise ShapeError(f"patch {tuple(images.shape[2:])} does not match configured {net.patch_size}")
    logits, feats = net(images)
    taps = [StageFeatureTap(i + 1, f.detach(), True) for i, f in enumerate(feats)]
    return torch.softmax(logits, dim=1), taps


class DomainClassifier(nn.Module):
    """Stride-2 blocks down to 4x4x4, two conv blocks, flatten, linear to N_d logits.

    The number of stride-2 blocks follows from the tap size: log2(size / 4)
    for power-of-two multiples of 4; other sizes finish with average pooling.
    """

    def __init__(self, stage: int, in_channels: int, in_size: Sequence[int], n_domains: int):
        super().__init__()
        self.stage = stage
        self.n_domains = n_domains
        size = list(in_size)
        if min(size) < 4:
            raise ShapeError(f"stage {stage} tap {tuple(in_size)} is smaller than 4x4x4")
        blocks: list[nn.Module] = []
        while max(size) >= 8:
            stride = tuple(2 if s >= 8 else 1 for s in size)
            blocks.append(conv_block(in_channels, in_channels, stride))
            size = [math.ceil(s / st) for s, st in zip(size, stride)]
        self.n_down = len(blocks)
        if size != [4, 4, 4]:
            blocks.append(nn.AdaptiveAvgPool3d(4))
        self.down = nn.Sequential(*blocks)
        self.convs = nn.Sequential(conv_block(in_channels, in_channels), conv_block(in_channels, in_channels))
        self.fc = nn.Linear(in_channels * 64, n_domains)

    def pre_flatten(self, features: torch.Tensor) -> torch.Tensor:
        return self.convs(self.down(features))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pre_flatten(features), 1))


def classify_domain(clf: DomainClassifier, tap: StageFeatureTap) -> torch.Tensor:
    """Posterior over domains, ``(batch, N_d)``."""
    if tap.stage != clf.stage:
        raise ShapeError(f"tap from stage {tap.stage} fed to classifier of stage {clf.stage}")
    return torch.softmax(clf(tap.features), dim=1)


def build_model(cfg: RunConfig, n_domains: int) -> tuple[SegNet, nn.ModuleDict]:
    net = SegNet(cfg.encoder_depth, cfg.base_channels, cfg.max_channels, patch_size=cfg.patch_size)
    classifiers = nn.ModuleDict({
        str(x): DomainClassifier(x, net.channels[x - 1], size, n_domains)
        for x, size in enumerate(cfg.stage_sizes(), start=1)
    })
    return net, classifiers


MIRROR_AXES = [axes for r in range(4) for axes in itertools.combinations((2, 3, 4), r)]


@torch.no_grad()
def mirrored_probabilities(net: SegNet, x: torch.Tensor, mirror: bool = True) -> torch.Tensor:
    """Average of softmax maps over the 8 axis-mirrored copies of ``x``."""
    variants = MIRROR_AXES if mirror else [()]
    acc = None
    for axes in variants:
        xin = torch.flip(x, axes) if axes else x
        p = torch.softmax(net(xin)[0], dim=1)
        p = torch.flip(p, axes) if axes else p
        acc = p if acc is None else acc + p
    return acc / len(variants)


def _window_starts(size: int, patch: int, overlap: float) -> list[int]:
    if size <= patch:
        return [0]
    step = max(1, int(patch * (1 - overlap)))
    n = math.ceil((size - patch) / step) + 1
    return sorted({int(round(v)) for v in np.linspace(0, size - patch, n)})


@torch.no_grad()
def predict_with_mirroring(
    net: SegNet,
    volume: np.ndarray,
    patch_size: Sequence[int] | None = None,
    overlap: float = 0.5,
    mirror: bool = True,
) -> np.ndarray:
    """Class probabilities ``(2, *volume.shape)`` from mirrored sliding windows.

    Volumes smaller than the patch are zero-padded and the result cropped back.
    """
    was_training = net.training
    net.eval()
    patch = tuple(patch_size or net.patch_size or volume.shape)
    vol = np.asarray(volume, dtype=np.float32)
    padded_shape = tuple(max(s, p) for s, p in zip(vol.shape, patch))
    work = center_crop_or_pad(vol, padded_shape)
    x = torch.from_numpy(np.ascontiguousarray(work))[None, None]
    dtype = next(net.parameters()).dtype
    x = x.to(dtype)
    total = torch.zeros((2, *padded_shape), dtype=dtype)
    counts = torch.zeros(padded_shape, dtype=dtype)
    for sx in _window_starts(padded_shape[0], patch[0], overlap):
        for sy in _window_starts(padded_shape[1], patch[1], overlap):
            for sz in _window_starts(padded_shape[2], patch[2], overlap):
                sl = (slice(sx, sx + patch[0]), slice(sy, sy + patch[1]), slice(sz, sz + patch[2]))
                p = mirrored_probabilities(net, x[(..., *sl)], mirror)[0]
                total[(slice(None), *sl)] += p
                counts[sl] += 1
    probs = (total / counts).numpy()
    net.train(was_training)
    return np.stack([center_crop_or_pad(c, vol.shape) for c in probs])
