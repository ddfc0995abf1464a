"""Overlap scores, dataset audits, filtering, and the training regularizer."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gradcamo import gradcam
from gradcamo.engine import Tensor, ops
from gradcamo.errors import IOFailure, ValidationError

DEFAULT_CUTOFF = 0.25
REG_DELTA = 1e-8


def gradcamo_score(g, m):
    """Fraction of map mass inside the mask: ``(score, degenerate)``.

    ``g`` must be non-negative, ``m`` binary, same shape. An all-zero map is
    the 0/0 case; it scores 0 with the degenerate flag set.
    """
    g = np.asarray(g)
    m = np.asarray(m)
    if g.shape != m.shape:
        raise ValidationError(
            f"map shape {g.shape} does not match mask shape {m.shape}")
    if (g < 0).any():
        raise ValidationError("localization map has negative values")
    if not (((m == 0) | (m == 1)).all()):
        raise ValidationError("mask must contain only 0 and 1")
    total = float(g.sum(dtype=np.float64))
    if total == 0.0:
        return 0.0, True
    inside = float(g[m == 1].sum(dtype=np.float64))
    return float(min(max(inside / total, 0.0), 1.0)), False


@dataclass
class ScoreRecord:
    """One audited cell."""

    cell_id: str
    label: int
    pred: int
    prob: float
    score: float
    degenerate: bool
    keep: bool


@dataclass
class AuditSummary:
    """Per-group and overall score statistics."""

    overall_mean: float
    overall_std: float
    count: int
    fraction_kept: float
    cutoff: float
    groups: dict  # (dose, site) -> {mean, std, count, fraction_kept}

    def to_dict(self):
        return {
            "overall": {
                "mean": self.overall_mean,
                "std": self.overall_std,
                "count": self.count,
                "fraction_kept": self.fraction_kept,
            },
            "cutoff": self.cutoff,
            "groups": {
                f"dose={dose},site={site}": stats
                for (dose, site), stats in sorted(self.groups.items())
            },
        }


def _summarize(records, metas, cutoff):
    order = np.argsort([r.cell_id for r in records], kind="stable")
    by_group = {}
    scores = []
    kept = 0
    for i in order:
        rec, meta = records[i], metas[i]
        scores.append(rec.score)
        kept += rec.keep
        by_group.setdefault((int(meta.label), int(meta.site)), []).append(rec.score)
    groups = {}
    for key, vals in sorted(by_group.items()):
        arr = np.asarray(vals)
        groups[key] = {
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "count": int(arr.size),
            "fraction_kept": float((arr >= cutoff).mean()),
        }
    arr = np.asarray(scores)
    return AuditSummary(
        overall_mean=float(arr.mean()) if arr.size else 0.0,
        overall_std=float(arr.std()) if arr.size else 0.0,
        count=int(arr.size),
        fraction_kept=float(kept / arr.size) if arr.size else 0.0,
        cutoff=float(cutoff),
        groups=groups,
    )


def audit(model, inputs, masks, records, cutoff=DEFAULT_CUTOFF, batch_size=16,
          label_values=None):
    """Score every cell's predicted-class map against its own mask.

    ``inputs`` is ``(N, C, X, Y, Z)`` preprocessed crops at model input
    resolution, ``masks`` the matching ``(N, X, Y, Z)`` binary masks, and
    ``records`` the manifest rows (cell_id, label, site are read).
    ``label_values`` maps class indices back to manifest labels so the
    recorded predictions live in the same space as the true labels. Returns
    ``(score_records, summary)`` with one record per cell in input order;
    the summary reduction is order-independent (sorted by cell id).
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    masks = np.asarray(masks)
    n = inputs.shape[0]
    if len(records) != n or masks.shape[0] != n:
        raise ValidationError("inputs, masks and records must align")
    if masks.shape[1:] != inputs.shape[2:]:
        raise ValidationError(
            f"mask shape {masks.shape[1:]} does not match input {inputs.shape[2:]}")
    if not 0.0 <= cutoff <= 1.0:
        raise ValidationError(f"cutoff must lie in [0, 1], got {cutoff}")
    if label_values is not None and len(label_values) != model.n_classes:
        raise ValidationError("label_values must name every class")
    out = []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        maps, logits, _ = gradcam.batched_maps(model, inputs[start:stop])
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        preds = logits.argmax(axis=1)
        for i in range(stop - start):
            rec = records[start + i]
            s, degenerate = gradcamo_score(maps[i], masks[start + i])
            pred = int(preds[i])
            if label_values is not None:
                pred = int(label_values[pred])
            out.append(ScoreRecord(
                cell_id=rec.cell_id,
                label=int(rec.label),
                pred=pred,
                prob=float(probs[i, preds[i]]),
                score=s,
                degenerate=degenerate,
                keep=s >= cutoff,
            ))
    return out, _summarize(out, records, cutoff)


def filter_features(features, records, cutoff=DEFAULT_CUTOFF):
    """Keep the feature rows whose score clears the cutoff, order preserved."""
    by_id = {r.cell_id: r for r in records}
    keep = []
    for i, cell_id in enumerate(features.ids):
        rec = by_id.get(cell_id)
        if rec is None:
            raise ValidationError(f"no score record for feature row {cell_id!r}")
        if rec.score >= cutoff:
            keep.append(i)
    return type(features)(
        ids=[features.ids[i] for i in keep],
        values=features.values[keep],
        labels=features.labels[keep],
        wells=[features.wells[i] for i in keep],
        sites=features.sites[keep],
    )


def regularized_loss(tape, model, batch, labels, masks, reg_weight):
    """Cross-entropy minus the weighted mean overlap score, on one tape.

    The channel weights come from an inner backward pass over the true-label
    logits and enter the map branch as constants, so the extra gradient flows
    only through the activation. ``reg_weight`` 0 returns the plain
    cross-entropy term unchanged. Returns ``(loss, mean_overlap)`` where the
    second element is the batch mean score as a float.
    """
    if reg_weight < 0:
        raise ValidationError(f"regularizer weight must be >= 0, got {reg_weight}")
    labels = np.asarray(labels, dtype=np.int64)
    xd = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    logits, activation = model.forward_graph(tape, batch)
    ce = ops.softmax_cross_entropy(logits, labels)
    if reg_weight == 0:
        return ce, 0.0
    masks = np.asarray(masks)
    if masks.shape != (xd.shape[0],) + tuple(xd.shape[2:]):
        raise ValidationError(
            f"regularizer masks must be (N, X, Y, Z) at input resolution, "
            f"got {masks.shape}")
    true_score = ops.gather_sum(logits, labels)
    w = gradcam.channel_weights(tape, activation, true_score)
    tape.zero_grads()
    dtype = activation.data.dtype
    combined = ops.relu(ops.channel_combine(activation, w.astype(dtype)))
    full = ops.trilinear_resize(combined, masks.shape[1:])
    per_cell = ops.overlap_ratio(full, masks.astype(dtype), delta=REG_DELTA)
    mean_s = ops.mean_all(per_cell)
    loss = ops.add(ce, ops.scale(mean_s, -float(reg_weight)))
    return loss, float(mean_s.data)


def write_scores(path, records):
    """Scores CSV with the fixed column order."""
    fields = ["cell_id", "label", "pred", "prob", "gradcamo", "degenerate", "keep"]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for r in records:
                writer.writerow([
                    r.cell_id, r.label, r.pred, f"{r.prob:.6f}",
                    f"{r.score:.6f}", int(r.degenerate), int(r.keep),
                ])
    except OSError as exc:
        raise IOFailure(f"cannot write scores {path}: {exc}") from exc


def read_scores(path):
    """Parse a scores CSV; malformed rows raise with their line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read scores {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    expected = ["cell_id", "label", "pred", "prob", "gradcamo", "degenerate", "keep"]
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty scores file") from None
    if header != expected:
        raise ValidationError(f"{path}: line 1: expected header {expected}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(expected):
            raise ValidationError(
                f"{path}: line {lineno}: expected {len(expected)} fields, "
                f"got {len(row)}")
        try:
            records.append(ScoreRecord(
                cell_id=row[0],
                label=int(row[1]),
                pred=int(row[2]),
                prob=float(row[3]),
                score=float(row[4]),
                degenerate=bool(int(row[5])),
                keep=bool(int(row[6])),
            ))
        except ValueError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
        if not 0.0 <= records[-1].score <= 1.0:
            raise ValidationError(
                f"{path}: line {lineno}: score {records[-1].score} outside [0, 1]")
    return records


def write_summary(path, summary):
    try:
        Path(path).write_text(
            json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write summary {path}: {exc}") from exc
