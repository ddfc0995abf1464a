"""Synthetic multi-channel Z-stacks with ground-truth masks and confounders.

Each stack holds anisotropic Gaussian-intensity ellipsoid "cells" on a dark
noisy background. Treatment dose k (the class label, 1-based) modulates three
strictly in-cell properties, all concentrated near the cell center:

* the nucleus radius as a fraction of the cell radius,
* the nucleus/cytoplasm intensity ratio, realized as the brightness of the
  nucleus region relative to the cytoplasm region within the cytoplasm
  channel, and
* the brightness of a central core blob relative to the fixed organelle
  shell within the organelle channel.

Channel peaks themselves stay dose-independent (each painted cell patch is
normalized to a dose-free per-channel target), so per-channel [0, 1]
rescaling cannot leak dose into the background level.

Every site id adds a fixed low-amplitude smooth background pattern (a sum of
three sinusoids keyed by the site). With ``confound_strength`` γ > 0, a
second pattern keyed by the DOSE is blended into background voxels only,
with amplitude proportional to γ: a planted shortcut that carries the label
outside every cell mask.

Same config and seed give a bitwise-identical dataset.
"""

import math
from dataclasses import dataclass

import numpy as np

from gradcamo.errors import ValidationError
from gradcamo.volume import Manifest, ManifestRecord, SegmentationMask, ZStack

CONTROL_LABEL = 1

_STACK_SALT = 0x5AC4
_SPLIT_SALT = 0x51D5
_PATTERN_SALT = 0xBA5E

CHANNEL_NAMES = ("nucleus", "cytoplasm", "organelle")


@dataclass
class SynthConfig:
    """Knobs for one synthetic dataset.

    ``confound_strength`` is γ: 0 gives dose-free backgrounds, 1 gives the
    full planted background shortcut. ``neighbor_density`` squeezes cells
    together: 0 keeps them far apart, 1 allows near-touching placements.
    ``placement_jitter`` caps how far a sparse (density 0) cell may wander
    off its lattice slot, so wide crop windows stay free of neighbors.
    """

    n_doses: int = 6
    wells_per_dose: int = 2
    sites_per_well: int = 4
    cells_per_site: int = 12
    channels: int = 3
    volume_shape: tuple = (364, 280, 16)
    confound_strength: float = 0.0
    neighbor_density: float = 0.0
    seed: int = 0
    val_fraction: float = 0.25
    # geometry and texture
    cell_radius_xy: tuple = (26.0, 32.0)
    cell_radius_z: tuple = (7.2, 8.0)
    margin_xy: int = 12
    placement_jitter: float = 3.0
    background_level: float = 0.06
    noise_sigma: float = 0.02
    site_pattern_amp: float = 0.03
    dose_pattern_amp: float = 0.08
    spacing: tuple = (0.35, 0.35, 0.6)

    def __post_init__(self):
        if self.n_doses < 2:
            raise ValidationError(f"need at least 2 doses, got {self.n_doses}")
        for name in ("wells_per_dose", "sites_per_well", "cells_per_site", "channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.channels != 3:
            raise ValidationError("the generator draws exactly 3 channels "
                                  "(nucleus, cytoplasm, organelle)")
        if not 0.0 <= self.confound_strength <= 1.0:
            raise ValidationError(
                f"confound_strength must lie in [0, 1], got {self.confound_strength}")
        if not 0.0 <= self.neighbor_density <= 1.0:
            raise ValidationError(
                f"neighbor_density must lie in [0, 1], got {self.neighbor_density}")
        if self.placement_jitter < 0:
            raise ValidationError("placement_jitter must be >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in (0, 1)")
        if len(self.volume_shape) != 3 or any(int(s) < 8 for s in self.volume_shape):
            raise ValidationError(f"implausible volume shape {self.volume_shape}")
        self.volume_shape = tuple(int(s) for s in self.volume_shape)


def well_name(dose, well_idx):
    """Row letter encodes the dose, the zero-padded column the replicate."""
    if dose < 1 or dose > 20:
        raise ValidationError(f"dose {dose} out of the supported 1..20 range")
    return f"{chr(ord('B') + dose - 1)}{well_idx + 2:02d}"


def _nucleus_fraction(dose):
    return 0.28 + 0.056 * (dose - 1)


def _nucleus_cyto_ratio(dose):
    # realized as nucleus-region brightness inside the cytoplasm channel
    return 0.25 * (dose - 1)


def _core_gain(dose):
    # brightness of the central organelle blob relative to the fixed shell
    return 0.35 + 0.25 * (dose - 1)


def _background_pattern(shape_xy, key):
    """Smooth unit-amplitude field: three fixed sinusoids keyed by ``key``."""
    rng = np.random.default_rng(np.random.SeedSequence([_PATTERN_SALT, key]))
    nx, ny = shape_xy
    xx, yy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    out = np.zeros((nx, ny))
    for _ in range(3):
        freq = rng.uniform(1.5, 4.5)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        proj = (math.cos(angle) * xx + math.sin(angle) * yy) / nx
        out += np.sin(2.0 * math.pi * freq * proj + phase)
    return (out / 3.0).astype(np.float32)


def _dose_grating(shape_xy, dose):
    """Unit-amplitude grating whose wavelength encodes the dose.

    Wavelength is 6 + 2*(dose-1) voxels, short enough that any crop window
    carries the full signature. Variance is the same for every dose, so only
    the local frequency content separates classes.
    """
    rng = np.random.default_rng(np.random.SeedSequence([_PATTERN_SALT, 2000 + dose]))
    nx, ny = shape_xy
    wavelength = 6.0 + 2.0 * (dose - 1)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    xx, yy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    proj = math.cos(angle) * xx + math.sin(angle) * yy
    out = np.sin(2.0 * math.pi * proj / wavelength + phase)
    return out.astype(np.float32)


@dataclass
class _Cell:
    center: tuple
    radii: tuple       # (rx, ry, rz) of the cell ellipsoid
    angle: float       # xy-plane rotation
    nucleus_frac: float
    nuc_in_cyto: float
    core_gain: float   # organelle core blob brightness relative to the shell
    amp_jitter: tuple  # per-channel amplitude jitter


def _place_cells(rng, config):
    """Assign cells to jittered lattice slots inside the margin box.

    A shuffled grid guarantees placement always succeeds for a feasible
    config. ``neighbor_density`` widens the jitter: at 0 every pair keeps a
    safety gap, at 1 cells may roam their whole slot and touch or clump.
    """
    nx, ny, nz = config.volume_shape
    margin = config.margin_xy
    wx, wy = nx - 2 * margin, ny - 2 * margin
    n = config.cells_per_site
    if wx <= 0 or wy <= 0:
        raise ValidationError("volume too small for the placement margin")
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    pitch_x, pitch_y = wx / cols, wy / rows
    half_pitch = min(pitch_x, pitch_y) / 2.0
    if half_pitch < config.cell_radius_xy[0]:
        raise ValidationError(
            f"cells_per_site={n} does not fit volume {config.volume_shape}: "
            f"slot half-pitch {half_pitch:.1f} is below the minimum cell "
            f"radius {config.cell_radius_xy[0]}; lower cells_per_site")
    slots = [
        (margin + (i + 0.5) * pitch_x, margin + (j + 0.5) * pitch_y)
        for i in range(cols) for j in range(rows)
    ]
    chosen = rng.permutation(len(slots))[:n]
    r_cap = half_pitch - 1.0
    cells = []
    for slot_idx in chosen:
        sx, sy = slots[int(slot_idx)]
        rx = float(np.clip(rng.uniform(*config.cell_radius_xy),
                           config.cell_radius_xy[0], r_cap))
        ry = float(np.clip(rx * rng.uniform(0.85, 1.15),
                           config.cell_radius_xy[0], r_cap))
        rz = rng.uniform(*config.cell_radius_z)
        safe = max(0.5, half_pitch - max(rx, ry) - 1.0)
        base = min(safe, config.placement_jitter)
        jit = base + config.neighbor_density * (half_pitch - base)
        cx = float(np.clip(sx + rng.uniform(-jit, jit), margin, nx - margin))
        cy = float(np.clip(sy + rng.uniform(-jit, jit), margin, ny - margin))
        cz = nz / 2.0 + rng.uniform(-1.0, 1.0)
        cells.append(_Cell(
            center=(cx, cy, cz),
            radii=(rx, ry, rz),
            angle=rng.uniform(0.0, math.pi),
            nucleus_frac=0.0,
            nuc_in_cyto=0.0,
            core_gain=0.0,
            amp_jitter=(0.0, 0.0, 0.0),
        ))
    return cells


def _paint_stack(rng, config, dose):
    """Render one site: returns (image (3,X,Y,Z) f32, instances (X,Y,Z) u16)."""
    nx, ny, nz = config.volume_shape
    cells = _place_cells(rng, config)
    for i, cell in enumerate(cells):
        cells[i].nucleus_frac = _nucleus_fraction(dose) * rng.normal(1.0, 0.05)
        cells[i].nuc_in_cyto = _nucleus_cyto_ratio(dose) * rng.normal(1.0, 0.06)
        cells[i].core_gain = _core_gain(dose) * rng.normal(1.0, 0.04)
        cells[i].amp_jitter = tuple(rng.normal(1.0, 0.05, size=3))

    image = np.zeros((3, nx, ny, nz), dtype=np.float32)
    instances = np.zeros((nx, ny, nz), dtype=np.uint16)

    for idx, cell in enumerate(cells, start=1):
        cx, cy, cz = cell.center
        rx, ry, rz = cell.radii
        reach = max(rx, ry) + 1.0
        x0, x1 = max(0, int(cx - reach)), min(nx, int(cx + reach) + 2)
        y0, y1 = max(0, int(cy - reach)), min(ny, int(cy + reach) + 2)
        xs = np.arange(x0, x1, dtype=np.float64) - cx
        ys = np.arange(y0, y1, dtype=np.float64) - cy
        zs = np.arange(nz, dtype=np.float64) - cz
        ca, sa = math.cos(cell.angle), math.sin(cell.angle)
        xr = ca * xs[:, None] + sa * ys[None, :]
        yr = -sa * xs[:, None] + ca * ys[None, :]
        rho_xy = (xr / rx) ** 2 + (yr / ry) ** 2
        rho = rho_xy[:, :, None] + ((zs / rz) ** 2)[None, None, :]
        support = rho <= 1.0

        nf = max(cell.nucleus_frac, 0.05)
        rho_n = rho / (nf * nf)
        jn, jc, jo = cell.amp_jitter

        nucleus = np.exp(-3.0 * rho_n) * (rho_n <= 1.0)
        # cytoplasm: a bright body with a dimmer nucleus region; the nucleus
        # region brightness inside THIS channel carries the dose-coded
        # intensity ratio
        body = np.exp(-0.8 * rho) * (1.0 - 0.55 * np.exp(-2.0 * rho_n))
        nuc_region = cell.nuc_in_cyto * np.exp(-1.5 * rho_n) * (rho_n <= 1.0)
        cytoplasm = (body + nuc_region) * support
        # organelle: a fixed mid-cell shell plus a central blob whose
        # brightness relative to the shell carries the dose
        shell = np.exp(-18.0 * (np.sqrt(np.maximum(rho, 1e-12)) - 0.55) ** 2)
        core = cell.core_gain * np.exp(-rho / 0.09)
        organelle = (shell + core) * support

        region = (slice(x0, x1), slice(y0, y1), slice(None))
        # Normalize each channel patch so its peak is an exact dose-free
        # target: per-channel [0, 1] rescaling downstream then cannot read
        # the dose off a peak (and hence background) level shift.
        for ch, patch, target in ((0, nucleus, 0.9 * jn), (1, cytoplasm, 0.75 * jc),
                                  (2, organelle, 0.6 * jo)):
            peak = float(patch.max())
            if peak > 0:
                image[(ch,) + region] += (patch * (target / peak)).astype(np.float32)
        instances[region][support] = idx

    background = instances == 0
    image += np.float32(config.background_level)
    noise = rng.normal(0.0, config.noise_sigma, size=image.shape)
    image += noise.astype(np.float32)
    np.maximum(image, 0.0, out=image)
    return image, instances, background


def generate(config):
    """Build the full dataset: stacks, instance masks, and a split manifest.

    Stacks arrive sorted by (well, site). Wells in the lower column number
    feed train/val; the higher column is the held-out test side, so no well
    spans both sides. A fixed fraction of train-side cells becomes the
    validation split, chosen deterministically from the seed.
    """
    if not isinstance(config, SynthConfig):
        raise ValidationError("generate expects a SynthConfig")
    stacks, masks, records = [], [], []
    site_patterns = {
        site: _background_pattern(config.volume_shape[:2], site)
        for site in range(1, config.sites_per_well + 1)
    }
    dose_patterns = {
        dose: _dose_grating(config.volume_shape[:2], dose)
        for dose in range(1, config.n_doses + 1)
    }
    gamma = float(config.confound_strength)

    for dose in range(1, config.n_doses + 1):
        for widx in range(config.wells_per_dose):
            well = well_name(dose, widx)
            split_side = "train" if widx == 0 else "test"
            for site in range(1, config.sites_per_well + 1):
                rng = np.random.default_rng(np.random.SeedSequence(
                    [config.seed, _STACK_SALT, dose, widx, site]))
                image, instances, background = _paint_stack(rng, config, dose)
                image += site_patterns[site][None, :, :, None] * np.float32(
                    config.site_pattern_amp)
                if gamma > 0.0:
                    bump = dose_patterns[dose][:, :, None] * np.float32(
                        gamma * config.dose_pattern_amp)
                    image += np.where(background[None], bump[None], np.float32(0.0))
                np.maximum(image, 0.0, out=image)
                stacks.append(ZStack(
                    image=image,
                    channel_names=CHANNEL_NAMES,
                    spacing=config.spacing,
                    well=well,
                    site=site,
                ))
                masks.append(SegmentationMask(labels=instances))
                n_cells = int(instances.max())
                for iid in range(1, n_cells + 1):
                    records.append(ManifestRecord(
                        cell_id=f"{well}_s{site}_c{iid:03d}",
                        label=dose,
                        well=well,
                        site=site,
                        split=split_side,
                        instance=iid,
                    ))

    order = sorted(range(len(stacks)), key=lambda i: (stacks[i].well, stacks[i].site))
    stacks = [stacks[i] for i in order]
    masks = [masks[i] for i in order]
    records.sort(key=lambda r: r.cell_id)

    split_rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed, _SPLIT_SALT]))
    train_ids = [r.cell_id for r in records if r.split == "train"]
    n_val = int(round(config.val_fraction * len(train_ids)))
    val_ids = set(split_rng.choice(train_ids, size=n_val, replace=False))
    for rec in records:
        if rec.cell_id in val_ids:
            rec.split = "val"

    manifest = Manifest(
        channels=3,
        spacing=config.spacing,
        records=records,
    )
    manifest.validate(check_paths=False)
    return stacks, masks, manifest


def describe(config):
    """Planned cell counts per (dose, well, site); matches generate() exactly.

    Placement either succeeds for every requested cell or generate() raises,
    so the planned table and the realized manifest always agree.
    """
    rows = []
    for dose in range(1, config.n_doses + 1):
        for widx in range(config.wells_per_dose):
            for site in range(1, config.sites_per_well + 1):
                rows.append({
                    "dose": dose,
                    "well": well_name(dose, widx),
                    "site": site,
                    "cells": config.cells_per_site,
                })
    rows.sort(key=lambda r: (r["dose"], r["well"], r["site"]))
    total = config.cells_per_site * len(rows)
    return {"rows": rows, "total": total}


def count_cells(manifest):
    """Realized counts per (dose, well, site) from a manifest, plus total."""
    counts = {}
    for rec in manifest.records:
        key = (int(rec.label), rec.well, int(rec.site))
        counts[key] = counts.get(key, 0) + 1
    rows = [
        {"dose": dose, "well": well, "site": site, "cells": n}
        for (dose, well, site), n in sorted(counts.items())
    ]
    return {"rows": rows, "total": len(manifest.records)}


def format_describe(summary):
    lines = ["dose  well  site  cells", "----  ----  ----  -----"]
    for row in summary["rows"]:
        lines.append(f"{row['dose']:>4}  {row['well']:<4}  {row['site']:>4}  {row['cells']:>5}")
    lines.append(f"total cells: {summary['total']}")
    return "\n".join(lines)
