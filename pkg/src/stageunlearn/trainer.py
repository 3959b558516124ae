"""Run orchestration: epochs of balanced batches, validation, checkpoints, inference.

Output directory layout::

    config.yaml             resolved run configuration
    events.jsonl            one JSON object per step / epoch (append-only)
    checkpoint_latest.pt    state after the last finished epoch
    checkpoint_best.pt      state with the best validation DSC so far
    checkpoint_abort.pt     written only when a non-finite loss stops the run

Every random stream of an epoch (batch order, patch positions, augmentation)
is derived from ``(seed, epoch)``, so resuming from an epoch checkpoint
reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import augment
from .core import DomainSet, RunConfig, VolumeSample, save_config, validate_config
from .data import (
    DatasetManifest,
    balanced_batches,
    center_crop_or_pad,
    check_manifest,
    extract_patch,
    load_sample,
    load_volume,
    save_volume,
)
from .metrics import dsc
from .model import SegNet, build_model, predict_with_mirroring
from .scheduler import (
    AccuracyWindow,
    NonFiniteLossError,
    Optimizers,
    SchedulerState,
    build_optimizers,
    execute_step,
    initial_state,
    plan_step,
)

log = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
CONFIG_FILE = "config.yaml"
LATEST_CKPT = "checkpoint_latest.pt"
BEST_CKPT = "checkpoint_best.pt"
WARMUP_CKPT = "checkpoint_warmup.pt"
ABORT_CKPT = "checkpoint_abort.pt"


@dataclass
class Checkpoint:
    config: RunConfig
    domains: DomainSet
    epoch: int
    model_state: dict
    classifier_state: dict
    optimizer_state: dict
    scheduler_state: SchedulerState
    accuracy_window: dict[str, list[float]]
    history: list[dict[str, Any]] = field(default_factory=list)
    best_val_dsc: float | None = None

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "domains": list(self.domains.domains),
            "epoch": self.epoch,
            "seed": self.seed,
            "model_state": self.model_state,
            "classifier_state": self.classifier_state,
            "optimizer_state": self.optimizer_state,
            "scheduler_state": self.scheduler_state.to_dict(),
            "accuracy_window": self.accuracy_window,
            "history": self.history,
            "best_val_dsc": self.best_val_dsc,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Checkpoint:
        return cls(
            config=RunConfig.from_dict(d["config"]),
            domains=DomainSet(tuple(d["domains"])),
            epoch=int(d["epoch"]),
            model_state=d["model_state"],
            classifier_state=d["classifier_state"],
            optimizer_state=d["optimizer_state"],
            scheduler_state=SchedulerState.from_dict(d["scheduler_state"]),
            accuracy_window=d["accuracy_window"],
            history=list(d["history"]),
            best_val_dsc=d["best_val_dsc"],
        )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write-new-then-rename so an interrupted write never clobbers the old file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save(ckpt.to_dict(), tmp)
        os.replace(tmp, path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_dict(torch.load(path, map_location="cpu", weights_only=True))


def restore_model(ckpt: Checkpoint) -> tuple[SegNet, nn.ModuleDict]:
    net, classifiers = build_model(ckpt.config, ckpt.domains.n)
    net.load_state_dict(ckpt.model_state)
    classifiers.load_state_dict(ckpt.classifier_state)
    net.eval()
    classifiers.eval()
    return net, classifiers


@dataclass
class TrainResult:
    out_dir: Path
    latest: Path
    best: Path
    events: Path
    history: list[dict[str, Any]]


def _to_batch(samples: Sequence[VolumeSample]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))[:, None]
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    domains = torch.tensor([s.domain for s in samples], dtype=torch.int64)
    return images, labels, domains


def _center_patches(samples: Sequence[VolumeSample], patch_size: Sequence[int]) -> list[VolumeSample]:
    return [
        replace(s, image=center_crop_or_pad(s.image, patch_size), label=center_crop_or_pad(s.label, patch_size))
        for s in samples
    ]


@torch.no_grad()
def heldout_accuracy(
    net: SegNet, classifiers: nn.ModuleDict, samples: Sequence[VolumeSample], patch_size: Sequence[int]
) -> dict[int, float]:
    """Per-stage domain accuracy on centre patches of held-out volumes."""
    if not samples:
        return {}
    images, _, domains = _to_batch(_center_patches(samples, patch_size))
    feats = net.encode(images)
    out = {}
    for key, clf in classifiers.items():
        pred = clf(feats[int(key) - 1]).argmax(1)
        out[int(key)] = float((pred == domains).double().mean())
    return out


def validation_dsc(net: SegNet, samples: Sequence[VolumeSample], mirror: bool = True) -> float | None:
    if not samples:
        return None
    scores = []
    for s in samples:
        probs = predict_with_mirroring(net, s.image, mirror=mirror)
        scores.append(dsc(probs.argmax(0), s.label))
    return float(np.mean(scores))


def _lr_factor(cfg: RunConfig, iteration: int, total: int, exponent: float = 0.9) -> float:
    if cfg.lr_decay == "none":
        return 1.0
    return (1 - iteration / total) ** exponent


def _json_line(event: dict[str, Any]) -> str:
    return json.dumps(event, sort_keys=True)


def _truncate_events(path: Path, last_epoch: int) -> None:
    if not path.exists():
        return
    kept = [
        line for line in path.read_text().splitlines()
        if line and json.loads(line).get("epoch", 0) <= last_epoch
    ]
    path.write_text("".join(line + "\n" for line in kept))


def prepare_batch(
    samples: Sequence[VolumeSample], cfg: RunConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    patches = [
        augment(extract_patch(s, cfg.patch_size, rng, cfg.foreground_fraction), cfg.augmentation, rng)
        for s in samples
    ]
    return _to_batch(patches)


def train(
    cfg: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; returns paths of the written artifacts."""
    domains = manifest.domain_set()
    validate_config(cfg, domains)
    check_manifest(manifest, domains, cfg.batch_size)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    events_path = out_dir / EVENTS_FILE

    train_samples = [load_sample(e, domains) for e in manifest.split("train")]
    val_samples = [load_sample(e, domains) for e in manifest.split("val")]

    torch.manual_seed(cfg.seed)
    net, classifiers = build_model(cfg, domains.n)
    optimizers = build_optimizers(cfg, net, classifiers)
    state = initial_state(cfg)
    window = AccuracyWindow(cfg.accuracy_window)
    history: list[dict[str, Any]] = []
    best_dsc: float | None = None
    start_epoch = 1

    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config != cfg:
            raise ValueError("checkpoint configuration differs from the requested run")
        net.load_state_dict(ckpt.model_state)
        classifiers.load_state_dict(ckpt.classifier_state)
        optimizers.load_state_dict(ckpt.optimizer_state)
        state = ckpt.scheduler_state
        window = AccuracyWindow(cfg.accuracy_window, {int(k): v for k, v in ckpt.accuracy_window.items()})
        history = list(ckpt.history)
        best_dsc = ckpt.best_val_dsc
        start_epoch = ckpt.epoch + 1
        _truncate_events(events_path, ckpt.epoch)
    else:
        events_path.write_text("")
    save_config(cfg, out_dir / CONFIG_FILE)

    def snapshot(epoch: int) -> Checkpoint:
        return Checkpoint(
            config=cfg, domains=domains, epoch=epoch,
            model_state=net.state_dict(), classifier_state=classifiers.state_dict(),
            optimizer_state=optimizers.state_dict(), scheduler_state=state,
            accuracy_window=window.to_dict(), history=history, best_val_dsc=best_dsc,
        )

    total_iters = cfg.epochs * cfg.iterations_per_epoch
    with open(events_path, "a") as events:
        for epoch in range(start_epoch, cfg.epochs + 1):
            state = replace(state, epoch=epoch)
            batch_seq, sample_seq = np.random.SeedSequence([cfg.seed, epoch]).spawn(2)
            rng = np.random.default_rng(sample_seq)
            batches = balanced_batches(
                train_samples, cfg.batch_size, seed=int(batch_seq.generate_state(1)[0]),
                n_batches=cfg.iterations_per_epoch, domain_of=lambda s: s.domain,
                domains=range(domains.n),
            )
            n_unlearn = 0
            for it, batch in enumerate(batches):
                global_it = (epoch - 1) * cfg.iterations_per_epoch + it
                for group in optimizers.segmentation.param_groups:
                    group["lr"] = cfg.lr_seg * _lr_factor(cfg, global_it, total_iters)
                images, labels, doms = prepare_batch(batch, cfg, rng)
                if epoch == cfg.effective_warmup + 1 and it == 0:
                    # UBA testing starts only once the window holds post-warm-up batches
                    window.clear()
                plan, state = plan_step(state, cfg, window.means() if window.full() else None, domains.n)
                try:
                    result = execute_step(plan, net, classifiers, images, labels, doms, optimizers)
                except NonFiniteLossError as exc:
                    events.write(_json_line({"type": "abort", "epoch": epoch, "iteration": global_it, "losses": exc.losses}) + "\n")
                    events.flush()
                    # diagnostic dump of the in-progress state, not a resume point
                    save_checkpoint(snapshot(epoch), out_dir / ABORT_CKPT)
                    raise
                window.update(result.accuracy)
                n_unlearn += len(plan.unlearn_stages_now)
                events.write(_json_line({
                    "type": "step",
                    "epoch": epoch,
                    "iteration": global_it,
                    "warmup": epoch <= cfg.effective_warmup,
                    "seg_loss": result.seg_loss,
                    "clf_loss": {str(k): v for k, v in result.clf_loss.items()},
                    "acc": {str(k): v for k, v in result.accuracy.items()},
                    "acc_window": {str(k): v for k, v in window.means().items()},
                    "counters": {str(k): v for k, v in state.counters.items()},
                    "unlearned": list(plan.unlearn_stages_now),
                    "conf_loss": {str(k): v for k, v in result.conf_loss.items()},
                }) + "\n")

            record: dict[str, Any] = {"epoch": epoch, "unlearn_steps": n_unlearn, "val_dsc": None}
            if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
                record["val_dsc"] = validation_dsc(net, val_samples, cfg.val_mirroring)
                record["heldout_acc"] = {
                    str(k): v for k, v in heldout_accuracy(net, classifiers, val_samples, cfg.patch_size).items()
                }
            history.append(record)
            events.write(_json_line({"type": "epoch", **record}) + "\n")
            events.flush()
            log.info("epoch %d/%d val_dsc=%s unlearn_steps=%d", epoch, cfg.epochs, record["val_dsc"], n_unlearn)

            improved = record["val_dsc"] is not None and (best_dsc is None or record["val_dsc"] > best_dsc)
            if improved:
                best_dsc = record["val_dsc"]
            ckpt = snapshot(epoch)
            save_checkpoint(ckpt, out_dir / LATEST_CKPT)
            if improved or not (out_dir / BEST_CKPT).exists():
                save_checkpoint(ckpt, out_dir / BEST_CKPT)
            if epoch == cfg.effective_warmup:
                save_checkpoint(ckpt, out_dir / WARMUP_CKPT)

    return TrainResult(out_dir, out_dir / LATEST_CKPT, out_dir / BEST_CKPT, events_path, history)


def infer(ckpt: Checkpoint | str | Path, volumes: Sequence[np.ndarray], mirror: bool = True) -> list[np.ndarray]:
    """Binary masks (uint8, same shape as each volume) via mirrored sliding windows."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    net, _ = restore_model(ckpt)
    return [
        predict_with_mirroring(net, v, ckpt.config.patch_size, mirror=mirror).argmax(0).astype(np.uint8)
        for v in volumes
    ]


def infer_directory(ckpt_path: str | Path, in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Segment every ``*.nii``/``*.nii.gz`` in ``in_dir``; masks keep the file name."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    files = sorted(p for p in in_dir.iterdir() if p.name.endswith((".nii", ".nii.gz")))
    if not files:
        raise FileNotFoundError(f"no NIfTI volumes in {in_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(ckpt_path)
    written = []
    for path, mask in zip(files, infer(ckpt, [load_volume(p).astype(np.float32) for p in files])):
        save_volume(mask, out_dir / path.name)
        written.append(out_dir / path.name)
    return written
