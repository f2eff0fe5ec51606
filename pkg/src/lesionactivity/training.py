"""Training loop: soft dice loss, random crop/flip augmentation, Adam with
exponential learning-rate decay, CSV logging, and checkpointing.

Protocol per step (batch size 1 by default): sample one uniformly random
crop per case, flip each axis with probability `flip_prob` (the same crop
window and flip pattern applied to all volumes of the case, so geometry
stays consistent), and minimize the soft dice loss. The learning rate for
epoch e is lr_initial * decay^e. Crops are never re-standardized: volumes
are standardized once, whole, upstream.

Determinism: given TrainConfig.seed, crop sampling and parameter
initialization are reproducible; bit-identical runs additionally depend on
the host framework's kernel determinism (single-threaded CPU runs are
stable in practice).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .networks import save_checkpoint
from .phantoms import SyntheticCase
from .volumes import ScanPair, Volume

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite; carries recent history for diagnosis."""

    def __init__(self, step: int, lr: float, loss_tail: list[float]):
        self.step = step
        self.lr = lr
        self.loss_tail = loss_tail
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3g}); last losses: "
            + ", ".join(f"{v:.4f}" for v in loss_tail)
        )


@dataclass(frozen=True)
class TrainConfig:
    crop_size: tuple[int, int, int] = (128, 128, 128)
    flip_prob: float = 0.5
    batch_size: int = 1
    epochs: int = 300
    lr_initial: float = 1e-4
    lr_decay_per_epoch: float = 0.985
    dice_epsilon: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        object.__setattr__(self, "crop_size", tuple(int(n) for n in self.crop_size))
        if len(self.crop_size) != 3 or any(n < 8 or n % 8 for n in self.crop_size):
            raise ValueError(f"crop_size must be divisible by 8 per axis, got {self.crop_size}")
        if self.lr_initial < 0:
            # 0 is allowed: a zero learning rate is the documented no-op
            raise ValueError(f"lr_initial must be non-negative, got {self.lr_initial}")
        if not (0.0 < self.lr_decay_per_epoch <= 1.0):
            raise ValueError(f"lr_decay_per_epoch must be in (0, 1], got {self.lr_decay_per_epoch}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError(f"flip_prob must be a probability, got {self.flip_prob}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr_initial * self.lr_decay_per_epoch ** epoch

    def to_dict(self) -> dict:
        return {
            "crop_size": list(self.crop_size), "flip_prob": self.flip_prob,
            "batch_size": self.batch_size, "epochs": self.epochs,
            "lr_initial": self.lr_initial, "lr_decay_per_epoch": self.lr_decay_per_epoch,
            "dice_epsilon": self.dice_epsilon, "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "crop_size" in d:
            d["crop_size"] = tuple(d["crop_size"])
        return cls(**d)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = 1.0) -> torch.Tensor:
    """Soft dice loss, summed over every voxel in the batch.

    loss = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps). With eps > 0
    the empty-prediction/empty-target case is well defined (loss 0) and the
    loss stays in [0, 1] for predictions in [0, 1].
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred and target shapes differ: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.reshape(-1)
    g = target.reshape(-1)
    intersection = (p * g).sum()
    return 1.0 - (2.0 * intersection + epsilon) / (p.sum() + g.sum() + epsilon)


def _pad_to(arr: np.ndarray, size) -> np.ndarray:
    """Zero-pad symmetrically (extra voxel goes to the trailing side)."""
    pads = []
    for n, want in zip(arr.shape, size):
        gap = max(0, want - n)
        pads.append((gap // 2, gap - gap // 2))
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="constant")
    return arr


def crop_and_flip(arrays, corner, flips, size):
    """The same window and flip pattern applied to every array."""
    out = []
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    axes = tuple(i for i, f in enumerate(flips) if f)
    for arr in arrays:
        piece = arr[sl]
        if axes:
            piece = np.flip(piece, axis=axes)
        out.append(np.ascontiguousarray(piece))
    return out


def sample_training_crop(pair: ScanPair, rater_fused_truth: Volume, cfg: TrainConfig, rng):
    """One random (baseline, followup, truth) crop with consistent geometry.

    Volumes smaller than the crop are zero-padded symmetrically first; a
    volume exactly crop-sized forces the corner to the origin.
    """
    arrays = [
        _pad_to(np.asarray(v.data, dtype=np.float32), cfg.crop_size)
        for v in (pair.baseline, pair.followup)
    ]
    arrays.append(_pad_to(rater_fused_truth.data.astype(np.float32), cfg.crop_size))
    corner = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(arrays[0].shape, cfg.crop_size))
    flips = tuple(bool(f) for f in rng.random(3) < cfg.flip_prob)
    bl, fu, truth = crop_and_flip(arrays, corner, flips, cfg.crop_size)
    return bl, fu, truth


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, epoch: int, step: int, loss: float, lr: float):
        self.rows.append({"epoch": epoch, "step": step, "loss": loss, "lr": lr})

    def epoch_mean_loss(self, epoch: int) -> float:
        losses = [r["loss"] for r in self.rows if r["epoch"] == epoch]
        return float(np.mean(losses)) if losses else float("nan")

    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "step", "loss", "lr"])
            writer.writeheader()
            writer.writerows(self.rows)


def resolve_training_item(case) -> tuple[ScanPair, Volume]:
    """Normalize a dataset element to (pair, fused truth).

    Accepts a SyntheticCase (exact truth), a ScanPair carrying exactly one
    activity mask (pre-fused), or an explicit (ScanPair, truth Volume)
    tuple. Multi-rater pairs must be fused upstream (majority_vote).
    """
    if isinstance(case, SyntheticCase):
        return case.pair, case.activity_truth
    if isinstance(case, ScanPair):
        if len(case.activity_masks) != 1:
            raise ValueError(
                f"pair carries {len(case.activity_masks)} activity masks; fuse raters "
                "upstream (majority_vote) so exactly one truth remains"
            )
        return case, case.activity_masks[0]
    if isinstance(case, tuple) and len(case) == 2 and isinstance(case[0], ScanPair):
        return case
    raise TypeError(f"cannot interpret training case of type {type(case).__name__}")


def per_scan_items(cases) -> list[tuple[Volume, Volume]]:
    """(scan, full lesion mask) items for both time points of each case,
    for training per-scan segmentation models."""
    items = []
    for case in cases:
        pair = case.pair if isinstance(case, SyntheticCase) else case
        if pair.full_lesion_masks is None:
            raise ValueError("per-scan training needs full_lesion_masks on every pair")
        items.append((pair.baseline, pair.full_lesion_masks[0]))
        items.append((pair.followup, pair.full_lesion_masks[1]))
    return items


def _crops_for_item(item, cfg: TrainConfig, rng):
    """(input crops tuple, truth crop) for either pair items or per-scan items."""
    if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], Volume):
        scan, mask = item
        arrays = [_pad_to(scan.data.astype(np.float32), cfg.crop_size),
                  _pad_to(mask.data.astype(np.float32), cfg.crop_size)]
        corner = tuple(int(rng.integers(0, n - c + 1)) for n, c in zip(arrays[0].shape, cfg.crop_size))
        flips = tuple(bool(f) for f in rng.random(3) < cfg.flip_prob)
        scan_crop, mask_crop = crop_and_flip(arrays, corner, flips, cfg.crop_size)
        return (scan_crop,), mask_crop
    pair, truth = resolve_training_item(item)
    bl, fu, truth_crop = sample_training_crop(pair, truth, cfg, rng)
    return (bl, fu), truth_crop


def train(net, dataset, cfg: TrainConfig, *, log_path=None, checkpoint_path=None,
          start_epoch: int = 0, optimizer=None) -> TrainLog:
    """Optimize `net` on `dataset` under the configured protocol.

    `dataset` elements may be SyntheticCases, pre-fused ScanPairs,
    (ScanPair, truth) tuples, or (scan Volume, mask Volume) tuples for
    per-scan models. Runs epochs * ceil(len(dataset)/batch_size) steps with
    Adam (beta1=0.9, beta2=0.999, eps=1e-8). Aborts with
    :class:`TrainingDivergedError` on a non-finite loss.
    """
    items = list(dataset)
    if not items:
        raise ValueError("training dataset is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if optimizer is None:
        optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr_initial,
                                     betas=(0.9, 0.999), eps=1e-8)
    net.train()
    log = TrainLog()
    step = 0
    for epoch in range(start_epoch, cfg.epochs):
        lr = cfg.lr_at_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(items))
        for batch_start in range(0, len(items), cfg.batch_size):
            batch_idx = order[batch_start:batch_start + cfg.batch_size]
            input_crops, truth_crops = [], []
            for idx in batch_idx:
                inputs, truth = _crops_for_item(items[idx], cfg, rng)
                input_crops.append(inputs)
                truth_crops.append(truth)
            n_inputs = len(input_crops[0])
            tensors = [
                torch.from_numpy(np.stack([crops[k] for crops in input_crops])).unsqueeze(1)
                for k in range(n_inputs)
            ]
            target = torch.from_numpy(np.stack(truth_crops)).unsqueeze(1)

            pred = net.forward_volumes(*tensors)
            loss = dice_loss(pred, target, cfg.dice_epsilon)
            loss_val = float(loss.detach())
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(step, lr, [r["loss"] for r in log.rows[-10:]])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            log.add(epoch, step, loss_val, lr)
            step += 1
        logger.info("epoch %d: mean loss %.4f (lr %.3g)", epoch, log.epoch_mean_loss(epoch), lr)
        if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(net, checkpoint_path, epoch=epoch + 1, optimizer=optimizer)
    if checkpoint_path:
        save_checkpoint(net, checkpoint_path, epoch=cfg.epochs, optimizer=optimizer)
    if log_path:
        log.write_csv(log_path)
    net.eval()
    return log
