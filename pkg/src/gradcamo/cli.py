"""Command-line pipeline: synth, crop, train, score, features, report.

Every subcommand writes a resolved-config JSON next to its outputs so a
run can be replayed exactly. Exit codes: 0 success, 1 validation error,
2 I/O error.
"""

import json
from pathlib import Path

import click
import numpy as np

from . import gradcam, report as report_mod, synth, volume
from .errors import IOFailure, ValidationError
from .model import (
    MiniCNN3D,
    TrainConfig,
    build_train_data,
    extract_features,
    load_model,
    prepare_eval_inputs,
    read_features,
    save_model,
    train,
    write_features,
    write_history,
)
from .scoring import DEFAULT_CUTOFF, audit, read_scores, write_scores, write_summary
from .tbf import write_tensor
from .whitening import fit_whitening, save_whitening


def _write_config(path, command, params):
    """Resolved-config JSON: enough to replay the subcommand."""
    payload = {"command": command}
    payload.update(params)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write config {path}: {exc}") from exc


def _parse_shape(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise ValidationError(
            f"input shape must be three integers like '32,32,16', got {text!r}")
    return tuple(int(p) for p in parts)


def _load_split(manifest, split):
    records = manifest.split_records(split)
    if not records:
        raise ValidationError(f"split {split!r} has no cells in this manifest")
    crops = [volume.load_crop(manifest, rec) for rec in records]
    return crops, records


@click.group()
def cli():
    """Grad-CAMO pipeline: data synthesis, training, scoring, reporting."""


@cli.command("synth")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--doses", default=6, show_default=True, type=int)
@click.option("--wells", default=2, show_default=True, type=int)
@click.option("--sites", default=4, show_default=True, type=int)
@click.option("--cells-per-site", default=12, show_default=True, type=int)
@click.option("--gamma", default=0.0, show_default=True, type=float,
              help="Strength of the planted background confounder in [0, 1].")
@click.option("--density", default=0.0, show_default=True, type=float,
              help="Cell crowding in [0, 1]; 0 keeps neighbors far apart.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--force", is_flag=True, help="Write into a non-empty directory.")
def cmd_synth(out, doses, wells, sites, cells_per_site, gamma, density, seed, force):
    """Generate a synthetic dataset: stacks, instance masks, manifest."""
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(
            f"output directory {out} is not empty; pass --force to overwrite")
    config = synth.SynthConfig(
        n_doses=doses, wells_per_dose=wells, sites_per_well=sites,
        cells_per_site=cells_per_site, confound_strength=gamma,
        neighbor_density=density, seed=seed)
    stacks, masks, manifest = synth.generate(config)

    (out / "stacks").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    paths = {}
    for stack, mask in zip(stacks, masks):
        name = f"{stack.well}_s{stack.site}.tbf"
        write_tensor(out / "stacks" / name, stack.image)
        # the tensor format has no wide integer type; ids fit comfortably
        if int(mask.labels.max()) > 255:
            raise ValidationError("more than 255 instances in one stack")
        write_tensor(out / "masks" / name, mask.labels.astype(np.uint8))
        paths[(stack.well, stack.site)] = name
    for rec in manifest.records:
        name = paths[(rec.well, rec.site)]
        rec.stack = f"stacks/{name}"
        rec.stack_mask = f"masks/{name}"
    volume.save_manifest(manifest, out / "manifest.json")
    _write_config(out / "synth_config.json", "synth", {
        "out": str(out), "doses": doses, "wells": wells, "sites": sites,
        "cells_per_site": cells_per_site, "gamma": gamma, "density": density,
        "seed": seed,
    })
    click.echo(synth.format_describe(synth.describe(config)))
    click.echo(f"wrote {len(stacks)} stacks, {len(manifest)} cells -> {out}")


@cli.command("crop")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--crop-xy", default=32, show_default=True, type=int)
@click.option("--min-voxels", default=200, show_default=True, type=int)
def cmd_crop(manifest_path, out, crop_xy, min_voxels):
    """Extract per-cell crops and masks from the referenced stacks."""
    manifest = volume.load_manifest(manifest_path)
    stacks, seg_masks = volume.load_stacks(manifest)
    cells, kept, dropped = volume.prepare_cells(
        stacks, seg_masks, manifest, crop_xy=crop_xy, min_voxels=min_voxels)

    (out / "crops").mkdir(parents=True, exist_ok=True)
    (out / "crop_masks").mkdir(parents=True, exist_ok=True)
    records = []
    for crop, rec in zip(cells, kept):
        write_tensor(out / "crops" / f"{crop.cell_id}.tbf", crop.volume)
        write_tensor(out / "crop_masks" / f"{crop.cell_id}.tbf", crop.mask)
        rec.crop = f"crops/{crop.cell_id}.tbf"
        rec.mask = f"crop_masks/{crop.cell_id}.tbf"
        rec.center = tuple(int(c) for c in crop.center)
        rec.stack = None
        rec.stack_mask = None
        records.append(rec)
    cropped = volume.Manifest(
        channels=manifest.channels, spacing=manifest.spacing, records=records)
    volume.save_manifest(cropped, out / "manifest.json")
    _write_config(out / "crop_config.json", "crop", {
        "manifest": str(manifest_path), "out": str(out),
        "crop_xy": crop_xy, "min_voxels": min_voxels,
    })
    click.echo(f"kept {len(records)} cells, dropped {len(dropped)} "
               f"(boundary or undersized) -> {out}")


@cli.command("train")
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", default=10, show_default=True, type=int)
@click.option("--lr", default=3e-4, show_default=True, type=float)
@click.option("--batch", default=8, show_default=True, type=int)
@click.option("--lambda", "reg_weight", default=0.0, show_default=True, type=float,
              help="Weight of the overlap-score regularizer.")
@click.option("--patience", default=3, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--augment/--no-augment", default=False, show_default=True,
              help="Apply random flips and intensity jitter to train batches.")
@click.option("--input-shape", default="auto", show_default=True,
              help="Model input X,Y,Z (multiples of 16) or 'auto' from crops.")
def cmd_train(manifest_path, out, epochs, lr, batch, reg_weight, patience, seed,
              augment, input_shape):
    """Train the classifier; writes a checkpoint and a history CSV."""
    manifest = volume.load_manifest(manifest_path)
    records = [r for r in manifest.records if r.split in ("train", "val")]
    if not records:
        raise ValidationError("manifest has no train/val cells")
    cells = [volume.load_crop(manifest, rec) for rec in records]
    if input_shape == "auto":
        shape = tuple(int(s) for s in cells[0].volume.shape[1:])
    else:
        shape = _parse_shape(input_shape)
    data = build_train_data(cells, records, masks_for_reg=reg_weight > 0,
                            input_shape=shape)
    config = TrainConfig(lr=lr, batch_size=batch, epochs=epochs,
                         patience=patience, reg_weight=reg_weight,
                         augment=augment, seed=seed)
    model = MiniCNN3D(n_classes=len(data.label_values),
                      in_channels=manifest.channels, input_shape=shape, seed=seed)
    history = train(model, data, config)

    save_model(model, data.stats, data.label_values, out)
    write_history(out / "history.csv", history)
    _write_config(out / "train_config.json", "train", {
        "manifest": str(manifest_path), "out": str(out), "epochs": epochs,
        "lr": lr, "batch": batch, "lambda": reg_weight, "patience": patience,
        "seed": seed, "augment": augment, "input_shape": list(shape),
    })
    last = history[-1]
    click.echo(f"epochs run: {len(history)}; final train acc "
               f"{last['train_acc']:.4f}, val acc {last['val_acc']:.4f}")


@cli.command("score")
@click.option("--model", "model_dir", required=True,
              type=click.Path(path_type=Path))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--split", default="test", show_default=True)
@click.option("--cutoff", default=DEFAULT_CUTOFF, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--maps", "maps_dir", default=None, type=click.Path(path_type=Path),
              help="Also write each cell's localization map as a TBF volume.")
def cmd_score(model_dir, manifest_path, split, cutoff, out, maps_dir):
    """Grad-CAMO score every cell of a split; writes CSV plus summary JSON."""
    model, stats, label_values = load_model(model_dir)
    manifest = volume.load_manifest(manifest_path)
    crops, records = _load_split(manifest, split)
    inputs, masks = prepare_eval_inputs(crops, stats, model.input_shape)
    score_records, summary = audit(model, inputs, masks, records,
                                   cutoff=cutoff, label_values=label_values)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores(out, score_records)
    write_summary(out.with_name(out.stem + "_summary.json"), summary)
    if maps_dir is not None:
        maps_dir.mkdir(parents=True, exist_ok=True)
        for start in range(0, len(crops), 16):
            stop = min(start + 16, len(crops))
            maps, _, _ = gradcam.batched_maps(model, inputs[start:stop])
            for i in range(stop - start):
                write_tensor(maps_dir / f"{records[start + i].cell_id}.tbf", maps[i])
    _write_config(out.with_name(out.stem + "_config.json"), "score", {
        "model": str(model_dir), "manifest": str(manifest_path), "split": split,
        "cutoff": cutoff, "out": str(out),
        "maps": None if maps_dir is None else str(maps_dir),
    })
    mean_s = float(np.mean([r.score for r in score_records]))
    kept = sum(r.keep for r in score_records)
    click.echo(f"scored {len(score_records)} cells; mean Grad-CAMO "
               f"{mean_s:.4f}; kept {kept} at cutoff {cutoff:g}")


@cli.command("features")
@click.option("--model", "model_dir", required=True,
              type=click.Path(path_type=Path))
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--split", default="test", show_default=True)
@click.option("--whiten", "control_label", default=None, type=int,
              help="Fit whitening on this control label and apply to all rows.")
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option("--pca2", "pca_out", default=None, type=click.Path(path_type=Path),
              help="Also write a 2-component PCA projection CSV.")
def cmd_features(model_dir, manifest_path, split, control_label, out, pca_out):
    """Extract pooled features, optionally batch-corrected by whitening."""
    model, stats, _ = load_model(model_dir)
    manifest = volume.load_manifest(manifest_path)
    crops, records = _load_split(manifest, split)
    scaled = [volume.rescale01(c) for c in crops]
    fm = extract_features(model, scaled, records, stats)

    if control_label is not None:
        control = fm.values[fm.labels == control_label]
        if control.shape[0] == 0:
            raise ValidationError(
                f"control label {control_label} has no cells in split {split!r}")
        transform = fit_whitening(control)
        fm.values = transform.apply(fm.values)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_whitening(transform, out.parent)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    write_features(out, fm)

    if pca_out is not None:
        centered = fm.values - fm.values.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[:2].T
        with open(pca_out, "w", newline="") as fh:
            fh.write("cell_id,label,pc1,pc2\n")
            for i, cid in enumerate(fm.ids):
                fh.write(f"{cid},{int(fm.labels[i])},"
                         f"{proj[i, 0]:.9g},{proj[i, 1]:.9g}\n")
    _write_config(out.with_name(out.stem + "_config.json"), "features", {
        "model": str(model_dir), "manifest": str(manifest_path), "split": split,
        "whiten": control_label, "out": str(out),
        "pca2": None if pca_out is None else str(pca_out),
    })
    click.echo(f"wrote {len(fm.ids)} feature rows "
               f"(d={fm.values.shape[1]}) -> {out}")


@cli.command("report")
@click.option("--scores", "scores_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--features", "features_path", default=None,
              type=click.Path(path_type=Path))
@click.option("--out", required=True, type=click.Path(path_type=Path))
def cmd_report(scores_path, features_path, out):
    """Render the audit report: Markdown tables plus per-group histograms."""
    scores = read_scores(scores_path)
    features = None if features_path is None else read_features(features_path)
    rep = report_mod.write_report(out, scores, features)
    _write_config(out / "report_config.json", "report", {
        "scores": str(scores_path),
        "features": None if features_path is None else str(features_path),
        "out": str(out),
    })
    overall = rep["overall"]
    click.echo(f"mean Grad-CAMO score {overall['mean_score']:.4f} over "
               f"{overall['cells']} cells -> {out / report_mod.REPORT_NAME}")


def run(argv=None):
    """Invoke the CLI and map package errors onto exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        return 1
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except IOFailure as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def main():
    raise SystemExit(run())
