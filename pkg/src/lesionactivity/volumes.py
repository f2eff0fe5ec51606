"""Volume container, scan pairs, and the preprocessing chain.

A :class:`Volume` is a 3D scalar grid with physical voxel spacing and an
origin, tagged with a `kind` (intensity image, probability map, or binary
label mask). Volumes are immutable after construction; every operation in
this module returns a new volume and is safe to call concurrently.

Conventions: intensity and probability data are stored as float32, label
data as uint8 with values in {0, 1}. Lesions/components are defined with
26-connectivity (face, edge, and corner neighbors).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

VOLUME_KINDS = ("intensity", "probability", "label")

# structuring element for 26-connectivity
CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class DegenerateInputError(ValueError):
    """Input is structurally valid but statistically unusable (e.g. constant)."""


def _as_triple(value, name: str) -> tuple[float, float, float]:
    vals = tuple(float(v) for v in value)
    if len(vals) != 3:
        raise ValueError(f"{name} must have exactly 3 components, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class Volume:
    """A 3D scalar grid with spacing (mm/voxel) and physical origin (mm).

    `data` is indexed [x, y, z]; `origin` is the physical position of voxel
    (0, 0, 0). Construction validates the kind-specific value ranges and
    freezes the array.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    kind: str = "intensity"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got ndim={data.ndim}")
        if min(data.shape) < 1:
            raise ValueError(f"volume shape components must be >= 1, got {data.shape}")
        spacing = _as_triple(self.spacing, "spacing")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing components must be strictly positive, got {spacing}")
        origin = _as_triple(self.origin, "origin")
        if self.kind not in VOLUME_KINDS:
            raise ValueError(f"kind must be one of {VOLUME_KINDS}, got {self.kind!r}")

        if self.kind == "label":
            vals = np.unique(data)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError("label volume must be binary (values in {0, 1})")
            data = data.astype(np.uint8, copy=False)
        else:
            data = data.astype(np.float32, copy=False)
            if self.kind == "probability":
                if data.size and (data.min() < 0.0 or data.max() > 1.0):
                    raise ValueError("probability volume must have values in [0, 1]")

        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_ml(self) -> float:
        """Physical volume of one voxel in milliliters (mm^3 / 1000)."""
        return math.prod(self.spacing) / 1000.0

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        """New volume with the same geometry but different data (and optionally kind)."""
        return Volume(data, self.spacing, self.origin, kind or self.kind)


@dataclass(frozen=True)
class ScanPair:
    """A registered baseline/follow-up pair plus optional annotation masks.

    `activity_masks` holds one activity annotation per rater (may be empty
    for unlabeled pairs). `full_lesion_masks`, when present, are the
    per-time-point full lesion masks (baseline, followup) used by the
    per-scan segmentation pipeline and by synthetic data.
    """

    baseline: Volume
    followup: Volume
    activity_masks: tuple[Volume, ...] = ()
    full_lesion_masks: tuple[Volume, Volume] | None = None

    def __post_init__(self):
        object.__setattr__(self, "activity_masks", tuple(self.activity_masks))
        if self.full_lesion_masks is not None:
            object.__setattr__(self, "full_lesion_masks", tuple(self.full_lesion_masks))
        for v, name in [(self.baseline, "baseline"), (self.followup, "followup")]:
            if v.kind != "intensity":
                raise ValueError(f"{name} must be an intensity volume, got kind={v.kind!r}")
        members = [self.baseline, self.followup, *self.activity_masks]
        if self.full_lesion_masks is not None:
            if len(self.full_lesion_masks) != 2:
                raise ValueError("full_lesion_masks must be a (baseline, followup) pair")
            members += list(self.full_lesion_masks)
        for m in members[2:]:
            if m.kind != "label":
                raise ValueError(f"annotation masks must be label volumes, got kind={m.kind!r}")
        ref = members[0]
        for m in members[1:]:
            if m.shape != ref.shape or m.spacing != ref.spacing:
                raise ValueError(
                    "all member volumes must share shape and spacing: "
                    f"{m.shape}/{m.spacing} vs {ref.shape}/{ref.spacing}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.baseline.shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.baseline.spacing


def _round_half_up(x: float) -> int:
    # round-half-away-from-zero for non-negative x
    return int(math.floor(x + 0.5))


def resample(v: Volume, target_spacing) -> Volume:
    """Resample a volume to a new voxel spacing.

    Output shape per axis is round(old_shape * old_spacing / new_spacing).
    Intensity and probability volumes are interpolated trilinearly; label
    volumes use nearest-neighbor so they stay binary. Edge samples clamp to
    the nearest voxel, so constants are preserved exactly and trilinear
    output never exceeds the input range.
    """
    target = _as_triple(target_spacing, "target_spacing")
    if any(s <= 0 for s in target):
        raise ValueError(f"target_spacing components must be strictly positive, got {target}")
    if target == v.spacing:
        return replace(v)

    new_shape = tuple(
        max(1, _round_half_up(n * s_old / s_new))
        for n, s_old, s_new in zip(v.shape, v.spacing, target)
    )
    # output voxel i sits at physical offset i * s_new -> input index i * s_new / s_old
    axes = [
        np.arange(n_new, dtype=np.float64) * (s_new / s_old)
        for n_new, s_new, s_old in zip(new_shape, target, v.spacing)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    if v.kind == "label":
        out = ndimage.map_coordinates(v.data, coords, order=0, mode="nearest")
    else:
        # interpolate in float64 so constants and range bounds survive the
        # cast back to float32 exactly
        out = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    return Volume(out, target, v.origin, v.kind)


def _zscore(data: np.ndarray) -> np.ndarray:
    """(x - mean) / std with the population (divide-by-N) estimator, in float64."""
    x = data.astype(np.float64)
    sd = x.std()
    if sd == 0.0 or not np.isfinite(sd):
        raise DegenerateInputError("cannot standardize a constant volume (std = 0)")
    return (x - x.mean()) / sd


def standardize(v: Volume) -> Volume:
    """Z-score an intensity volume, then clip at the 1st/99th percentiles.

    The clip bounds are the linear-interpolation percentiles of the
    standardized values (standardize first, clip second).
    """
    if v.kind != "intensity":
        raise ValueError(f"standardize expects an intensity volume, got kind={v.kind!r}")
    z = _zscore(v.data)
    p1, p99 = np.percentile(z, [1.0, 99.0])
    return v.with_data(np.clip(z, p1, p99).astype(np.float32))


def filter_small_lesions(mask: Volume, min_volume_ml: float = 0.01) -> Volume:
    """Remove 26-connected components smaller than `min_volume_ml`.

    A component is kept iff voxel_count * voxel_volume_ml >= min_volume_ml
    (components exactly at the threshold survive). Idempotent.
    """
    if mask.kind != "label":
        raise ValueError(f"filter_small_lesions expects a label volume, got kind={mask.kind!r}")
    labels, n = ndimage.label(mask.data, structure=CONNECTIVITY_26)
    if n == 0:
        return replace(mask)
    counts = np.bincount(labels.ravel())
    keep = counts * mask.voxel_volume_ml >= min_volume_ml
    keep[0] = False
    return mask.with_data(keep[labels].astype(np.uint8))
