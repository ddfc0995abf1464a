"""Z-stack ingestion, single-cell crops, preprocessing, augmentation, manifests.

The on-disk dataset is a directory of TBF volumes plus one JSON manifest whose
record paths are relative to the manifest file. Splits follow a leave-wells-out
rule: a well contributing cells to the test split may not contribute to train
or val.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

import numpy as np

from gradcamo import tbf
from gradcamo.errors import IOFailure, ManifestError, ValidationError

MANIFEST_FORMAT = 1
SPLITS = ("train", "val", "test")

RESCALE_EPS = 1e-8
STD_FLOOR = 1e-8


@dataclass
class ZStack:
    """One multi-channel 3D acquisition: ``image`` is ``(C, X, Y, Z)``."""

    image: np.ndarray
    channel_names: tuple
    spacing: tuple
    well: str = ""
    site: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 4:
            raise ValidationError(f"stack image must be (C, X, Y, Z), got {self.image.shape}")
        self.channel_names = tuple(self.channel_names)
        if len(self.channel_names) != self.image.shape[0] or not self.channel_names:
            raise ValidationError(
                f"{len(self.channel_names)} channel names for {self.image.shape[0]} channels")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"voxel spacing must be 3 positive floats, got {self.spacing}")


@dataclass
class SegmentationMask:
    """Instance labels, same spatial shape as the stack; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValidationError(f"instance mask must be (X, Y, Z), got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValidationError(f"instance mask must be integer, got {self.labels.dtype}")
        if self.labels.min() < 0:
            raise ValidationError("instance ids must be non-negative")


@dataclass
class CellCrop:
    """A fixed-size window around one cell plus its binary occupancy mask."""

    volume: np.ndarray  # (C, Xc, Yc, Z) float32
    mask: np.ndarray    # (Xc, Yc, Z) uint8, the central cell only
    cell_id: str
    label: int
    well: str
    site: int
    center: tuple
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.volume = np.asarray(self.volume)
        self.mask = np.asarray(self.mask)
        if self.volume.ndim != 4:
            raise ValidationError(f"crop volume must be (C, X, Y, Z), got {self.volume.shape}")
        if self.mask.shape != self.volume.shape[1:]:
            raise ValidationError(
                f"mask shape {self.mask.shape} does not match crop {self.volume.shape[1:]}")
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ValidationError("crop mask must be binary")
        if not self.mask.any():
            raise ValidationError(f"crop mask for cell {self.cell_id!r} is empty")


@dataclass
class ChannelStats:
    """Per-channel mean and standard deviation of rescaled training voxels."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.std = np.asarray(self.std, dtype=np.float32)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValidationError("channel stats must be matching 1D arrays")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.std).all()):
            raise ValidationError("channel stats must be finite")
        if (self.std <= 0).any():
            raise ValidationError("channel std must be positive")


def extract_crops(stack, mask, crop_xy=32, min_voxels=200, labels=None,
                  well=None, site=None):
    """Cut one fixed-size crop per instance; full depth, square in x/y.

    The cell center is the average of the minimum and maximum occupied index
    per axis, rounded down. Instances under ``min_voxels`` total voxels are
    skipped; instances whose window would cross the stack boundary are
    dropped. ``labels`` optionally maps instance id to class label.

    Returns ``(crops, dropped)`` where ``dropped`` is a list of
    ``(instance_id, reason)`` pairs.
    """
    if not isinstance(stack, ZStack):
        raise ValidationError("extract_crops expects a ZStack")
    inst = mask.labels if isinstance(mask, SegmentationMask) else np.asarray(mask)
    img = stack.image
    if inst.shape != img.shape[1:]:
        raise ValidationError(
            f"instance mask shape {inst.shape} does not match stack {img.shape[1:]}")
    crop_xy = int(crop_xy)
    sx, sy, sz = inst.shape
    if crop_xy < 1 or crop_xy > sx or crop_xy > sy:
        raise ValidationError(f"crop_xy={crop_xy} exceeds stack extents {(sx, sy)}")
    well = stack.well if well is None else well
    site = stack.site if site is None else site

    crops, dropped = [], []
    ids = np.unique(inst)
    ids = ids[ids > 0]
    half = crop_xy // 2
    for iid in ids:
        if labels is not None and int(iid) not in labels:
            dropped.append((int(iid), "unlisted"))
            continue
        where = np.nonzero(inst == iid)
        count = where[0].size
        if count < min_voxels:
            dropped.append((int(iid), "min_voxels"))
            continue
        cx = (int(where[0].min()) + int(where[0].max())) // 2
        cy = (int(where[1].min()) + int(where[1].max())) // 2
        x0, y0 = cx - half, cy - half
        if x0 < 0 or y0 < 0 or x0 + crop_xy > sx or y0 + crop_xy > sy:
            dropped.append((int(iid), "boundary"))
            continue
        window = (slice(x0, x0 + crop_xy), slice(y0, y0 + crop_xy), slice(None))
        m = (inst[window] == iid).astype(np.uint8)
        if not m.any():
            dropped.append((int(iid), "empty_window"))
            continue
        vol = np.ascontiguousarray(img[(slice(None),) + window], dtype=np.float32)
        label = 1 if labels is None else int(labels[int(iid)])
        prefix = f"{well}_s{site}" if well else "cell"
        crops.append(CellCrop(
            volume=vol,
            mask=np.ascontiguousarray(m),
            cell_id=f"{prefix}_c{int(iid):03d}",
            label=label,
            well=well or "",
            site=int(site or 0),
            center=(cx, cy),
            flags={"instance": int(iid)},
        ))
    return crops, dropped


def rescale01(crop):
    """Map each channel onto [0, 1] with an epsilon-guarded denominator.

    A constant channel rescales to all zeros; its index is recorded under the
    ``constant_channels`` flag.
    """
    vol = crop.volume.astype(np.float32, copy=True)
    constant = []
    for c in range(vol.shape[0]):
        lo = float(vol[c].min())
        hi = float(vol[c].max())
        if hi - lo <= 0:
            constant.append(c)
        vol[c] = (vol[c] - np.float32(lo)) / np.float32(hi - lo + RESCALE_EPS)
    flags = dict(crop.flags)
    if constant:
        flags["constant_channels"] = tuple(constant)
    return replace(crop, volume=vol, flags=flags)


def normalize(crop, stats):
    """Standardize each channel with training-set statistics."""
    if not isinstance(stats, ChannelStats):
        raise ValidationError("normalize needs ChannelStats")
    if stats.mean.shape[0] != crop.volume.shape[0]:
        raise ValidationError(
            f"stats cover {stats.mean.shape[0]} channels, crop has {crop.volume.shape[0]}")
    vol = (crop.volume - stats.mean[:, None, None, None]) / stats.std[:, None, None, None]
    return replace(crop, volume=vol.astype(np.float32))


def preprocess(crop, stats):
    """Rescale to [0, 1], then standardize with training statistics."""
    return normalize(rescale01(crop), stats)


def compute_channel_stats(crops):
    """Mean/std per channel over the rescaled voxels of the given crops.

    Accumulates in float64 in iteration order; pass the training split only.
    """
    total = None
    total_sq = None
    count = 0
    channels = None
    for crop in crops:
        vol = rescale01(crop).volume.astype(np.float64)
        if channels is None:
            channels = vol.shape[0]
            total = np.zeros(channels)
            total_sq = np.zeros(channels)
        elif vol.shape[0] != channels:
            raise ValidationError("crops disagree on channel count")
        total += vol.sum(axis=(1, 2, 3))
        total_sq += (vol * vol).sum(axis=(1, 2, 3))
        count += vol[0].size
    if not count:
        raise ValidationError("cannot compute channel stats from zero crops")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_FLOOR)
    return ChannelStats(mean=mean, std=std)


@dataclass(frozen=True)
class AugmentPlan:
    """Resolved augmentation coin flips and parameters."""

    flip_x: bool = False
    flip_y: bool = False
    brightness: float = None
    gamma: float = None


def sample_augment_plan(rng):
    """Draw the four independent p=0.5 coins (and parameters) in fixed order."""
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    brightness = float(rng.uniform(0.5, 1.25)) if rng.random() < 0.5 else None
    gamma = float(rng.uniform(0.5, 1.5)) if rng.random() < 0.5 else None
    return AugmentPlan(flip_x=flip_x, flip_y=flip_y, brightness=brightness,
                       gamma=gamma)


def apply_augment(crop, plan):
    """Apply a resolved plan: flips move the mask too, intensities do not.

    Intended for [0, 1]-rescaled, not-yet-normalized crops: the brightness
    constant is added as-is and gamma exponentiates values clamped at 0.
    The z axis is never flipped.
    """
    vol = crop.volume
    m = crop.mask
    if plan.flip_x:
        vol = vol[:, ::-1]
        m = m[::-1]
    if plan.flip_y:
        vol = vol[:, :, ::-1]
        m = m[:, ::-1]
    vol = np.ascontiguousarray(vol)
    m = np.ascontiguousarray(m)
    if plan.brightness is not None:
        vol = vol + np.float32(plan.brightness)
    if plan.gamma is not None:
        vol = np.power(np.maximum(vol, 0), np.float32(plan.gamma))
    return replace(crop, volume=vol.astype(np.float32), mask=m)


def augment(crop, seed):
    """Randomly augment one crop; a fixed seed reproduces bitwise."""
    return apply_augment(crop, sample_augment_plan(np.random.default_rng(seed)))


@dataclass
class ManifestRecord:
    """One cell's bookkeeping row; path fields are manifest-relative."""

    cell_id: str
    label: int
    well: str
    site: int
    split: str
    instance: int = None
    center: tuple = None
    stack: str = None
    stack_mask: str = None
    crop: str = None
    mask: str = None

    def to_dict(self):
        d = {
            "cell_id": self.cell_id,
            "label": int(self.label),
            "well": self.well,
            "site": int(self.site),
            "split": self.split,
        }
        if self.instance is not None:
            d["instance"] = int(self.instance)
        if self.center is not None:
            d["center"] = [int(c) for c in self.center]
        for key in ("stack", "stack_mask", "crop", "mask"):
            value = getattr(self, key)
            if value is not None:
                d[key] = str(PurePosixPath(value))
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            rec = cls(
                cell_id=str(d["cell_id"]),
                label=int(d["label"]),
                well=str(d["well"]),
                site=int(d["site"]),
                split=str(d["split"]),
                instance=int(d["instance"]) if "instance" in d else None,
                center=tuple(d["center"]) if "center" in d else None,
                stack=d.get("stack"),
                stack_mask=d.get("stack_mask"),
                crop=d.get("crop"),
                mask=d.get("mask"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest record: {exc} in {d!r}") from exc
        return rec


@dataclass
class Manifest:
    """Dataset index: channel/spacing metadata plus one record per cell."""

    channels: int
    spacing: tuple
    records: list
    root: Path = None

    def __len__(self):
        return len(self.records)

    def resolve(self, relpath):
        if self.root is None:
            raise ValidationError("manifest has no root directory (not saved or loaded)")
        return Path(self.root) / relpath

    def split_records(self, split):
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def wells(self):
        return sorted({r.well for r in self.records})

    def labels(self):
        return sorted({int(r.label) for r in self.records})

    def validate(self, check_paths=False):
        seen = set()
        split_wells = {}
        for rec in self.records:
            if rec.split not in SPLITS:
                raise ManifestError(
                    f"cell {rec.cell_id!r} has unknown split {rec.split!r}")
            if rec.cell_id in seen:
                raise ManifestError(f"duplicate cell id {rec.cell_id!r}")
            seen.add(rec.cell_id)
            if not rec.well:
                raise ManifestError(f"cell {rec.cell_id!r} has an empty well id")
            split_wells.setdefault(rec.well, set()).add(rec.split)
        for well, splits in sorted(split_wells.items()):
            if "test" in splits and splits - {"test"}:
                others = ", ".join(sorted(splits - {"test"}))
                raise ManifestError(
                    f"well {well!r} appears in the test split and in {others}; "
                    "leave-wells-out forbids sharing a well with test")
        if check_paths:
            for rec in self.records:
                for key in ("stack", "stack_mask", "crop", "mask"):
                    rel = getattr(rec, key)
                    if rel is not None and not self.resolve(rel).exists():
                        raise ManifestError(
                            f"cell {rec.cell_id!r}: {key} file missing: {rel}")


def save_manifest(manifest, path):
    """Write the manifest JSON (sorted keys, stable order) and set its root."""
    manifest.validate(check_paths=False)
    path = Path(path)
    doc = {
        "format": MANIFEST_FORMAT,
        "channels": int(manifest.channels),
        "spacing": [float(s) for s in manifest.spacing],
        "cells": [r.to_dict() for r in manifest.records],
    }
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write manifest {path}: {exc}") from exc
    manifest.root = path.parent
    return manifest


def load_manifest(path, check_paths=True):
    """Read and validate a manifest; referenced files must exist by default."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: unsupported manifest format {doc.get('format')!r}")
    try:
        manifest = Manifest(
            channels=int(doc["channels"]),
            spacing=tuple(float(s) for s in doc["spacing"]),
            records=[ManifestRecord.from_dict(d) for d in doc["cells"]],
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    manifest.validate(check_paths=check_paths)
    return manifest


def load_crop(manifest, record):
    """Materialize one CellCrop from its TBF files."""
    if record.crop is None or record.mask is None:
        raise ValidationError(f"cell {record.cell_id!r} has no crop files yet")
    vol = tbf.read_tensor(manifest.resolve(record.crop)).astype(np.float32)
    m = tbf.read_tensor(manifest.resolve(record.mask)).astype(np.uint8)
    return CellCrop(
        volume=vol, mask=m, cell_id=record.cell_id, label=record.label,
        well=record.well, site=record.site,
        center=record.center if record.center else (0, 0),
    )


def load_stacks(manifest):
    """Load every stack and instance mask referenced by manifest records.

    Returns parallel lists sorted by (well, site). Each record of a stack
    must agree on the file paths.
    """
    seen = {}
    for rec in manifest.records:
        if rec.stack is None or rec.stack_mask is None:
            raise ValidationError(f"record {rec.cell_id!r} has no stack reference")
        key = (rec.well, int(rec.site))
        prev = seen.setdefault(key, (rec.stack, rec.stack_mask))
        if prev != (rec.stack, rec.stack_mask):
            raise ManifestError(f"conflicting stack paths for well/site {key}")
    stacks, masks = [], []
    for well, site in sorted(seen):
        spath, mpath = seen[(well, site)]
        image = tbf.read_tensor(manifest.resolve(spath))
        labels = tbf.read_tensor(manifest.resolve(mpath))
        if image.ndim != 4 or image.shape[0] != manifest.channels:
            raise ManifestError(
                f"{spath}: expected {manifest.channels} channels, got shape {image.shape}")
        names = tuple(f"ch{i}" for i in range(image.shape[0]))
        stacks.append(ZStack(
            image=image.astype(np.float32, copy=False), channel_names=names,
            spacing=manifest.spacing, well=well, site=site))
        masks.append(SegmentationMask(labels=labels))
    return stacks, masks


def prepare_cells(stacks, masks, manifest, crop_xy=32, min_voxels=200):
    """Extract every manifest cell's crop from in-memory stacks.

    ``stacks`` and ``masks`` are parallel lists; each stack's (well, site)
    pair must match the manifest records. Records whose instance was dropped
    (boundary, too small) are omitted. Returns ``(cells, kept_records,
    dropped)`` with cells ordered like the manifest.
    """
    by_stack = {}
    for stack, mask in zip(stacks, masks):
        by_stack[(stack.well, int(stack.site))] = (stack, mask)
    crops_by_id = {}
    dropped = []
    recs_by_stack = {}
    for rec in manifest.records:
        recs_by_stack.setdefault((rec.well, int(rec.site)), []).append(rec)
    for key, recs in recs_by_stack.items():
        if key not in by_stack:
            raise ValidationError(f"manifest references missing stack {key}")
        stack, mask = by_stack[key]
        labels = {int(r.instance): int(r.label) for r in recs}
        ids = {int(r.instance): r.cell_id for r in recs}
        crops, drops = extract_crops(stack, mask, crop_xy=crop_xy,
                                     min_voxels=min_voxels, labels=labels)
        for crop in crops:
            iid = crop.flags["instance"]
            crops_by_id[ids[iid]] = replace(crop, cell_id=ids[iid])
        for iid, reason in drops:
            if iid in ids and reason != "unlisted":
                dropped.append((ids[iid], reason))
    cells, kept = [], []
    for rec in manifest.records:
        crop = crops_by_id.get(rec.cell_id)
        if crop is not None:
            cells.append(crop)
            kept.append(rec)
    return cells, kept, dropped
