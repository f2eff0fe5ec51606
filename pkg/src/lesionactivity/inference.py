"""Whole-volume prediction by overlapping tiles with mean merging, plus
probability thresholding and the per-scan difference-map pipeline.

Tiles per axis are evenly spaced: offset_i = round(i * (D - T) / (g - 1))
with round-half-away-from-zero (a single tile when D == T). Each tile is
predicted independently; per-voxel probability sums and coverage counts
are accumulated in float64 in tile-index order, so the merged map is
independent of evaluation order and bit-stable across worker counts.
Volumes smaller than the tile are zero-padded at the trailing side and the
padding cropped from the output.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .volumes import ScanPair, Volume, filter_small_lesions

DEFAULT_GRID = (3, 3, 3)  # 27 overlapping tiles


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class TilingPlan:
    """Evenly spaced overlapping tile corners covering a volume."""

    volume_shape: tuple[int, int, int]
    tile_size: tuple[int, int, int]
    grid: tuple[int, int, int]
    offsets: tuple[tuple[int, ...], ...]  # per-axis corner coordinates

    @classmethod
    def create(cls, volume_shape, tile_size, grid=None) -> "TilingPlan":
        volume_shape = tuple(int(n) for n in volume_shape)
        tile_size = tuple(int(t) for t in tile_size)
        if grid is None:
            grid = tuple(1 if d == t else g for d, t, g in zip(volume_shape, tile_size, DEFAULT_GRID))
        grid = tuple(int(g) for g in grid)
        if any(t < 1 for t in tile_size):
            raise ValueError(f"tile_size must be positive, got {tile_size}")
        if any(t > d for t, d in zip(tile_size, volume_shape)):
            raise ValueError(f"tile_size {tile_size} exceeds volume shape {volume_shape}")
        if any(g < 1 for g in grid):
            raise ValueError(f"grid must be >= 1 per axis, got {grid}")
        offsets = []
        for d, t, g in zip(volume_shape, tile_size, grid):
            if g == 1:
                if d != t:
                    raise ValueError(
                        f"a single tile along an axis requires tile size == volume size, got {t} vs {d}"
                    )
                offsets.append((0,))
            else:
                offsets.append(tuple(_round_half_away(i * (d - t) / (g - 1)) for i in range(g)))
        return cls(volume_shape, tile_size, grid, tuple(offsets))

    @property
    def n_tiles(self) -> int:
        return int(np.prod(self.grid))

    def corners(self) -> list[tuple[int, int, int]]:
        """All tile corners in fixed index order (x outermost)."""
        return list(itertools.product(*self.offsets))

    def coverage_counts(self) -> np.ndarray:
        """How many tiles cover each voxel; every voxel is covered >= once."""
        counts = np.zeros(self.volume_shape, dtype=np.int32)
        for corner in self.corners():
            sl = tuple(slice(c, c + t) for c, t in zip(corner, self.tile_size))
            counts[sl] += 1
        return counts


def _as_volumes(inputs) -> tuple[Volume, ...]:
    if isinstance(inputs, ScanPair):
        return (inputs.baseline, inputs.followup)
    if isinstance(inputs, Volume):
        return (inputs,)
    vols = tuple(inputs)
    if not vols or not all(isinstance(v, Volume) for v in vols):
        raise ValueError("inputs must be a ScanPair, a Volume, or a sequence of Volumes")
    return vols


def predict_volume(net, inputs, plan: TilingPlan | None = None, *, tile_size=None,
                   grid=None, n_workers: int = 1) -> Volume:
    """Tile the input volume(s), predict each tile, and mean-merge overlaps.

    `inputs` is a ScanPair (two-input models) or a single Volume (per-scan
    models). Tiles may be evaluated by several worker threads; accumulation
    always happens in tile-index order, so the output is deterministic and
    identical across worker counts.
    """
    vols = _as_volumes(inputs)
    n_inputs = getattr(net, "n_inputs", len(vols))
    if len(vols) != n_inputs:
        raise ValueError(f"model takes {n_inputs} input volume(s), got {len(vols)}")
    shape = vols[0].shape
    for v in vols[1:]:
        if v.shape != shape:
            raise ValueError(f"input volume shapes differ: {v.shape} vs {shape}")

    if plan is None:
        if tile_size is None:
            raise ValueError("provide either a TilingPlan or a tile_size")
        tile_size = tuple(int(t) for t in tile_size)
        padded_shape = tuple(max(d, t) for d, t in zip(shape, tile_size))
        plan = TilingPlan.create(padded_shape, tile_size, grid)
    if any(t % 8 for t in plan.tile_size):
        raise ValueError(f"tile_size must be divisible by 8, got {plan.tile_size}")
    if any(p < d for p, d in zip(plan.volume_shape, shape)):
        raise ValueError(f"tiling plan covers {plan.volume_shape}, smaller than the volume {shape}")

    arrays = [np.zeros(plan.volume_shape, dtype=np.float32) for _ in vols]
    for arr, v in zip(arrays, vols):
        arr[tuple(slice(0, n) for n in shape)] = v.data

    corners = plan.corners()

    def run_tile(corner):
        sl = tuple(slice(c, c + t) for c, t in zip(corner, plan.tile_size))
        crops = [torch.from_numpy(np.ascontiguousarray(arr[sl]))[None, None] for arr in arrays]
        with torch.no_grad():
            out = net.forward_volumes(*crops)
        return out[0, 0].numpy().astype(np.float64)

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            tile_outputs = list(pool.map(run_tile, corners))
    else:
        tile_outputs = [run_tile(c) for c in corners]

    merged = merge_tile_outputs(plan, tile_outputs)
    merged = merged[tuple(slice(0, n) for n in shape)].astype(np.float32)
    merged = np.clip(merged, 0.0, 1.0)  # guard the [0,1] contract against float dust
    return Volume(merged, vols[0].spacing, vols[0].origin, kind="probability")


def merge_tile_outputs(plan: TilingPlan, tile_outputs) -> np.ndarray:
    """Mean-merge per-tile outputs: float64 sums and coverage counts,
    accumulated in tile-index order (a linear, order-independent fold)."""
    acc = np.zeros(plan.volume_shape, dtype=np.float64)
    counts = np.zeros(plan.volume_shape, dtype=np.int64)
    for corner, out in zip(plan.corners(), tile_outputs):
        sl = tuple(slice(c, c + t) for c, t in zip(corner, plan.tile_size))
        acc[sl] += np.asarray(out, dtype=np.float64)
        counts[sl] += 1
    if (counts == 0).any():
        raise RuntimeError("internal error: tiling plan left voxels uncovered")
    return acc / counts


def threshold(prob: Volume, t: float) -> Volume:
    """Binarize a probability map: positive iff probability >= t."""
    if prob.kind != "probability":
        raise ValueError(f"threshold expects a probability volume, got kind={prob.kind!r}")
    if not (0.0 < t < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    return prob.with_data((prob.data >= t).astype(np.uint8), kind="label")


def stp_difference_pipeline(stp_net, pair: ScanPair, t: float, *, plan: TilingPlan | None = None,
                            tile_size=None, grid=None, min_volume_ml: float = 0.01,
                            n_workers: int = 1) -> Volume:
    """Activity from two per-scan segmentations: threshold each time point's
    predicted lesion map, keep the positive part of the difference
    (follow-up minus baseline), and drop sub-threshold components. Old
    lesions and shrinking lesions vanish in the subtraction."""
    if getattr(stp_net, "n_inputs", 1) != 1:
        raise ValueError("stp_difference_pipeline needs a per-scan (single-input) model")
    prob_bl = predict_volume(stp_net, pair.baseline, plan, tile_size=tile_size, grid=grid, n_workers=n_workers)
    prob_fu = predict_volume(stp_net, pair.followup, plan, tile_size=tile_size, grid=grid, n_workers=n_workers)
    mask_bl = threshold(prob_bl, t)
    mask_fu = threshold(prob_fu, t)
    activity = (mask_fu.data.astype(bool) & ~mask_bl.data.astype(bool)).astype(np.uint8)
    return filter_small_lesions(mask_fu.with_data(activity, kind="label"), min_volume_ml)
