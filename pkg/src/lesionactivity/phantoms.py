"""Synthetic longitudinal scan pairs with ground-truth lesion activity.

Each case is an ellipsoidal "brain" (tissue intensity 1.0 inside, 0
outside) carrying quasi-spherical hyperintense lesions: an isotropic
Gaussian intensity profile whose half-maximum surface defines the lesion
mask. The follow-up scan repeats the baseline lesions, grows a chosen
subset until their voxel count reaches at least 1.5x the baseline count,
and adds new lesions. Activity ground truth is exactly the new lesion
material: followup mask AND NOT baseline mask, so old lesion material is
background.

Nuisance factors are applied per time point: additive Gaussian noise, a
multiplicative low-frequency bias field (product of per-axis cosines), and
an optional sub-voxel translation of the follow-up image only (the truth
stays in the baseline frame, modeling residual registration error).
Simulated raters perturb the truth by per-component dilation/erosion and
random component dropout.

Generation is deterministic: identical spec (including seed) gives
bit-identical volumes. Cases of a dataset use independent seeds derived
from (dataset seed, case index), so generation parallelizes trivially.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volumes import CONNECTIVITY_26, ScanPair, Volume
from .volume_io import read_volume, write_volume

_GROWTH_FACTORS = tuple(np.round(np.arange(1.15, 3.01, 0.05), 2))
_PLACEMENT_TRIES = 300
# half-maximum radius r corresponds to sigma = r / sqrt(2 ln 2)
_HALF_MAX = math.sqrt(2.0 * math.log(2.0))


class GenerationError(RuntimeError):
    """Phantom generation could not satisfy the requested geometry."""


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of one synthetic longitudinal case."""

    shape: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_baseline_lesions: int = 3
    n_new_lesions: int = 2
    n_enlarged_lesions: int = 1
    lesion_radius_range: tuple[float, float] = (2.0, 6.0)
    noise_sigma: float = 0.05
    bias_field_amplitude: float = 0.1
    misalignment_mm: float = 0.0
    n_raters: int = 3
    rater_jitter: int = 1
    rater_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "lesion_radius_range", tuple(float(r) for r in self.lesion_radius_range))
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"shape must be three components >= 8, got {self.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if self.n_enlarged_lesions > self.n_baseline_lesions:
            raise ValueError(
                f"n_enlarged_lesions ({self.n_enlarged_lesions}) cannot exceed "
                f"n_baseline_lesions ({self.n_baseline_lesions})"
            )
        if min(self.n_baseline_lesions, self.n_new_lesions, self.n_enlarged_lesions) < 0:
            raise ValueError("lesion counts must be non-negative")
        lo, hi = self.lesion_radius_range
        extent_cap = min(n * s for n, s in zip(self.shape, self.spacing)) / 4.0
        if not (0 < lo <= hi < extent_cap):
            raise ValueError(
                f"lesion_radius_range {self.lesion_radius_range} must lie inside (0, {extent_cap:.1f})"
            )
        if self.n_raters < 0 or self.rater_jitter < 0 or not (0.0 <= self.rater_dropout <= 1.0):
            raise ValueError("invalid rater parameters")
        if self.noise_sigma < 0 or self.bias_field_amplitude < 0 or self.misalignment_mm < 0:
            raise ValueError("noise, bias amplitude, and misalignment must be non-negative")

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "spacing": list(self.spacing),
            "n_baseline_lesions": self.n_baseline_lesions,
            "n_new_lesions": self.n_new_lesions,
            "n_enlarged_lesions": self.n_enlarged_lesions,
            "lesion_radius_range": list(self.lesion_radius_range),
            "noise_sigma": self.noise_sigma,
            "bias_field_amplitude": self.bias_field_amplitude,
            "misalignment_mm": self.misalignment_mm,
            "n_raters": self.n_raters,
            "rater_jitter": self.rater_jitter,
            "rater_dropout": self.rater_dropout,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        for key in ("shape", "spacing", "lesion_radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class PlacedLesion:
    """Bookkeeping for one generated lesion."""

    center: tuple[int, int, int]       # voxel coordinates
    radius_mm: float                   # baseline half-maximum radius (0 for new lesions)
    fu_radius_mm: float                # follow-up radius
    kind: str                          # "stable", "enlarged", or "new"
    amplitude: float

    def to_dict(self) -> dict:
        return {
            "center": list(self.center), "radius_mm": self.radius_mm,
            "fu_radius_mm": self.fu_radius_mm, "kind": self.kind, "amplitude": self.amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlacedLesion":
        return cls(tuple(d["center"]), d["radius_mm"], d["fu_radius_mm"], d["kind"], d["amplitude"])


@dataclass(frozen=True)
class SyntheticCase:
    """One generated case: scan pair, exact truth, rater masks, bookkeeping."""

    pair: ScanPair
    activity_truth: Volume
    lesions: tuple[PlacedLesion, ...]
    spec: PhantomSpec
    case_id: str = "case"

    @property
    def rater_masks(self) -> tuple[Volume, ...]:
        return self.pair.activity_masks

    @property
    def active(self) -> bool:
        return bool(self.activity_truth.data.any())


def _bounded_box(shape, center, radius_vox):
    lo = [max(0, int(math.floor(c - r - 1))) for c, r in zip(center, radius_vox)]
    hi = [min(n, int(math.ceil(c + r + 2))) for n, c, r in zip(shape, center, radius_vox)]
    return tuple(slice(l, h) for l, h in zip(lo, hi))


def _distance_sq_mm(shape, spacing, center, box):
    grids = np.meshgrid(
        *[(np.arange(b.start, b.stop) - c) * s for b, c, s in zip(box, center, spacing)],
        indexing="ij",
    )
    return sum(g * g for g in grids)


def _sphere_count(shape, spacing, center, radius_mm) -> int:
    box = _bounded_box(shape, center, [radius_mm / s for s in spacing])
    d2 = _distance_sq_mm(shape, spacing, center, box)
    return int((d2 <= radius_mm * radius_mm).sum())


def _paint_sphere(mask: np.ndarray, spacing, center, radius_mm) -> None:
    box = _bounded_box(mask.shape, center, [radius_mm / s for s in spacing])
    d2 = _distance_sq_mm(mask.shape, spacing, center, box)
    mask[box] |= d2 <= radius_mm * radius_mm


def _add_profile(image: np.ndarray, spacing, center, radius_mm, amplitude) -> None:
    sigma = radius_mm / _HALF_MAX
    reach = 3.5 * sigma
    box = _bounded_box(image.shape, center, [reach / s for s in spacing])
    d2 = _distance_sq_mm(image.shape, spacing, center, box)
    contrib = amplitude * np.exp(-d2 / (2.0 * sigma * sigma))
    contrib[d2 > reach * reach] = 0.0
    image[box] += contrib


def _growth_factor(shape, spacing, center, radius_mm) -> float:
    """Smallest tabulated factor growing the voxel count by >= 50%.

    Additionally requires the added shell to be one 26-connected component,
    so the activity ground truth of an enlarged lesion reads as a single
    marked region.
    """
    n_base = _sphere_count(shape, spacing, center, radius_mm)
    target = math.ceil(1.5 * n_base)
    for f in _GROWTH_FACTORS:
        grown = radius_mm * f
        if _sphere_count(shape, spacing, center, grown) < target:
            continue
        box = _bounded_box(shape, center, [grown / s + 1 for s in spacing])
        d2 = _distance_sq_mm(shape, spacing, center, box)
        shell = (d2 <= grown * grown) & (d2 > radius_mm * radius_mm)
        _, n_comp = ndimage.label(shell, structure=CONNECTIVITY_26)
        if n_comp == 1:
            return float(f)
    raise GenerationError(
        f"no growth factor up to {_GROWTH_FACTORS[-1]} gives a connected >=50% "
        f"enlargement for radius {radius_mm:.2f} mm at spacing {spacing}"
    )


def _inside_brain(center, semi_axes_vox, shape, spacing, radius_mm) -> bool:
    """True iff every voxel of the sphere lies inside the brain ellipsoid."""
    ctr = [(n - 1) / 2.0 for n in shape]
    radius_vox = [radius_mm / s for s in spacing]
    lo = [c - r for c, r in zip(center, radius_vox)]
    hi = [c + r for c, r in zip(center, radius_vox)]
    if any(l < 0 or h > n - 1 for l, h, n in zip(lo, hi, shape)):
        return False
    box = _bounded_box(shape, center, radius_vox)
    d2 = _distance_sq_mm(shape, spacing, center, box)
    grids = np.meshgrid(
        *[(np.arange(b.start, b.stop) - m) / a for b, m, a in zip(box, ctr, semi_axes_vox)],
        indexing="ij",
    )
    ellipsoid = sum(g * g for g in grids)
    sphere = d2 <= radius_mm * radius_mm
    return bool((ellipsoid[sphere] <= 1.0).all())


def _bias_field(shape, amplitude, freqs, phases) -> np.ndarray:
    axes = [
        np.cos(2.0 * math.pi * f * np.linspace(0.0, 1.0, n) + p)
        for n, f, p in zip(shape, freqs, phases)
    ]
    product = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return 1.0 + amplitude * product


def generate_case(spec: PhantomSpec) -> SyntheticCase:
    """Generate one synthetic longitudinal case from its spec.

    Raises :class:`GenerationError` when lesions cannot be placed without
    violating the separation/containment constraints after bounded retries.
    """
    rng = np.random.default_rng(spec.seed)
    shape, spacing = spec.shape, spec.spacing
    semi_axes_vox = [0.35 * n for n in shape]
    margin_mm = (2.0 + 2.0 * spec.rater_jitter) * max(spacing)

    lo, hi = spec.lesion_radius_range
    base_radii = rng.uniform(lo, hi, spec.n_baseline_lesions)
    base_amps = rng.uniform(1.0, 1.4, spec.n_baseline_lesions)
    new_radii = rng.uniform(lo, hi, spec.n_new_lesions)
    new_amps = rng.uniform(1.0, 1.4, spec.n_new_lesions)

    # the first n_enlarged baseline lesions grow; their follow-up radius
    # must be known before placement so separations stay valid after growth
    lesions: list[PlacedLesion] = []
    plans = []
    for k in range(spec.n_baseline_lesions):
        kind = "enlarged" if k < spec.n_enlarged_lesions else "stable"
        plans.append((float(base_radii[k]), float(base_amps[k]), kind))
    for k in range(spec.n_new_lesions):
        plans.append((float(new_radii[k]), float(new_amps[k]), "new"))

    ctr = [(n - 1) / 2.0 for n in shape]
    # place large lesions first: greatly improves packing feasibility
    order = sorted(range(len(plans)), key=lambda k: -plans[k][0])
    placed_by_plan: dict[int, PlacedLesion] = {}
    for plan_idx in order:
        radius, amp, kind = plans[plan_idx]
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            center = tuple(int(rng.integers(0, n)) for n in shape)
            if kind == "enlarged":
                # the voxel-count growth factor depends on the sub-grid
                # geometry at this center
                try:
                    fu_radius = radius * _growth_factor(shape, spacing, center, radius)
                except GenerationError:
                    continue
            else:
                fu_radius = radius
            if not _inside_brain(center, semi_axes_vox, shape, spacing, fu_radius):
                continue
            ok = True
            for other in placed_by_plan.values():
                d_mm = math.sqrt(sum(((a - b) * s) ** 2 for a, b, s in zip(center, other.center, spacing)))
                if d_mm < fu_radius + other.fu_radius_mm + margin_mm:
                    ok = False
                    break
            if ok:
                placed_by_plan[plan_idx] = PlacedLesion(
                    center=center,
                    radius_mm=0.0 if kind == "new" else radius,
                    fu_radius_mm=fu_radius,
                    kind=kind,
                    amplitude=amp,
                )
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place a {kind} lesion of radius {radius:.2f} mm after "
                f"{_PLACEMENT_TRIES} attempts (shape {shape}, {len(placed_by_plan)} lesions placed)"
            )
    lesions = [placed_by_plan[k] for k in range(len(plans))]

    # masks
    bl_mask = np.zeros(shape, dtype=bool)
    fu_mask = np.zeros(shape, dtype=bool)
    for les in lesions:
        if les.kind != "new":
            _paint_sphere(bl_mask, spacing, les.center, les.radius_mm)
        _paint_sphere(fu_mask, spacing, les.center, les.fu_radius_mm)
    activity = fu_mask & ~bl_mask

    # intensities
    grids = np.meshgrid(*[(np.arange(n) - c) / a for n, c, a in zip(shape, ctr, semi_axes_vox)], indexing="ij")
    brain = (sum(g * g for g in grids) <= 1.0).astype(np.float64)
    img_bl = brain.copy()
    img_fu = brain.copy()
    for les in lesions:
        if les.kind != "new":
            _add_profile(img_bl, spacing, les.center, les.radius_mm, les.amplitude)
        _add_profile(img_fu, spacing, les.center, les.fu_radius_mm, les.amplitude)

    img_bl *= _bias_field(shape, spec.bias_field_amplitude, rng.uniform(0.5, 1.2, 3), rng.uniform(0, 2 * math.pi, 3))
    img_fu *= _bias_field(shape, spec.bias_field_amplitude, rng.uniform(0.5, 1.2, 3), rng.uniform(0, 2 * math.pi, 3))
    img_bl += rng.normal(0.0, spec.noise_sigma, shape)
    img_fu += rng.normal(0.0, spec.noise_sigma, shape)

    if spec.misalignment_mm > 0:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        shift_vox = direction * spec.misalignment_mm / np.asarray(spacing)
        img_fu = ndimage.shift(img_fu, shift_vox, order=1, mode="nearest")

    rater_masks = []
    for _ in range(spec.n_raters):
        rater_masks.append(_perturb_mask(activity, spec.rater_jitter, spec.rater_dropout, rng))

    def vol(data, kind):
        return Volume(data, spacing, kind=kind)

    pair = ScanPair(
        baseline=vol(img_bl.astype(np.float32), "intensity"),
        followup=vol(img_fu.astype(np.float32), "intensity"),
        activity_masks=tuple(vol(m.astype(np.uint8), "label") for m in rater_masks),
        full_lesion_masks=(vol(bl_mask.astype(np.uint8), "label"), vol(fu_mask.astype(np.uint8), "label")),
    )
    return SyntheticCase(
        pair=pair,
        activity_truth=vol(activity.astype(np.uint8), "label"),
        lesions=tuple(lesions),
        spec=spec,
    )


def _perturb_mask(activity: np.ndarray, jitter: int, dropout: float, rng) -> np.ndarray:
    """One simulated rater: per-component dropout and dilation/erosion."""
    labels, n = ndimage.label(activity, structure=CONNECTIVITY_26)
    out = np.zeros_like(activity, dtype=bool)
    for cid in range(1, n + 1):
        drop = rng.random() < dropout
        amount = int(rng.integers(-jitter, jitter + 1))
        if drop:
            continue
        comp = labels == cid
        if amount > 0:
            comp = ndimage.binary_dilation(comp, structure=CONNECTIVITY_26, iterations=amount)
        elif amount < 0:
            comp = ndimage.binary_erosion(comp, structure=CONNECTIVITY_26, iterations=-amount)
        out |= comp
    return out


# ---------------------------------------------------------------------------
# datasets

MANIFEST_NAME = "manifest.json"
_CASE_VOLUMES = ("baseline", "followup", "truth", "lesions_baseline", "lesions_followup")


def generate_dataset(template: PhantomSpec, n_cases: int, seed: int,
                     activity_free_fraction: float = 0.48, out_dir=None):
    """Generate a dataset of cases with derived per-case seeds.

    floor(activity_free_fraction * n_cases) cases get zero activity (no new
    and no enlarged lesions); which ones is a seeded draw. When `out_dir`
    is given, every case is written as a directory of `.lvol` volumes and a
    `manifest.json` is placed at the root. Returns (cases, manifest).
    """
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    if not (0.0 <= activity_free_fraction <= 1.0):
        raise ValueError(f"activity_free_fraction must be in [0, 1], got {activity_free_fraction}")
    n_inactive = int(math.floor(activity_free_fraction * n_cases))
    rng = np.random.default_rng(seed)
    inactive = set(rng.choice(n_cases, size=n_inactive, replace=False).tolist())

    cases, entries = [], []
    for i in range(n_cases):
        case_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        overrides = {"seed": case_seed}
        if i in inactive:
            overrides.update(n_new_lesions=0, n_enlarged_lesions=0)
        case_spec = replace(template, **overrides)
        try:
            case = generate_case(case_spec)
        except GenerationError as e:
            raise GenerationError(f"case {i}: {e}") from e
        case_id = f"case_{i:03d}"
        case = replace(case, case_id=case_id)
        cases.append(case)
        entries.append({
            "case_id": case_id,
            "seed": case_seed,
            "active": case.active,
            "spec": case_spec.to_dict(),
            "lesions": [l.to_dict() for l in case.lesions],
            "files": _case_file_map(case_id, case_spec.n_raters),
        })

    manifest = {
        "version": 1,
        "seed": seed,
        "n_cases": n_cases,
        "activity_free_fraction": activity_free_fraction,
        "cases": entries,
    }
    if out_dir is not None:
        _write_dataset(cases, manifest, Path(out_dir))
    return cases, manifest


def _case_file_map(case_id: str, n_raters: int) -> dict:
    files = {name: f"{case_id}/{name}.lvol" for name in _CASE_VOLUMES}
    for r in range(n_raters):
        files[f"rater_{r}"] = f"{case_id}/rater_{r}.lvol"
    return files


def _write_dataset(cases, manifest, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    for case, entry in zip(cases, manifest["cases"]):
        case_dir = root / entry["case_id"]
        case_dir.mkdir(exist_ok=True)
        files = entry["files"]
        write_volume(case.pair.baseline, root / files["baseline"])
        write_volume(case.pair.followup, root / files["followup"])
        write_volume(case.activity_truth, root / files["truth"])
        write_volume(case.pair.full_lesion_masks[0], root / files["lesions_baseline"])
        write_volume(case.pair.full_lesion_masks[1], root / files["lesions_followup"])
        for r, mask in enumerate(case.rater_masks):
            write_volume(mask, root / files[f"rater_{r}"])
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(root) -> tuple[list[SyntheticCase], dict]:
    """Load a dataset directory written by :func:`generate_dataset`."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    cases = []
    for entry in manifest["cases"]:
        files = entry["files"]
        raters = tuple(
            read_volume(root / files[f"rater_{r}"])
            for r in range(entry["spec"]["n_raters"])
        )
        pair = ScanPair(
            baseline=read_volume(root / files["baseline"]),
            followup=read_volume(root / files["followup"]),
            activity_masks=raters,
            full_lesion_masks=(
                read_volume(root / files["lesions_baseline"]),
                read_volume(root / files["lesions_followup"]),
            ),
        )
        cases.append(SyntheticCase(
            pair=pair,
            activity_truth=read_volume(root / files["truth"]),
            lesions=tuple(PlacedLesion.from_dict(d) for d in entry["lesions"]),
            spec=PhantomSpec.from_dict(entry["spec"]),
            case_id=entry["case_id"],
        ))
    return cases, manifest
