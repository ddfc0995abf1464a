"""MiniCNN3D classifier: definition, training, features, and checkpoints.

The network is four conv blocks (3x3x3 conv, relu, 2x2x2 max pool) with
channel widths 8/16/32/64, then global average pooling into a linear head.
The designated activation A is the fourth block's output, shape
``(64, X/16, Y/16, Z/16)``; the pooled 64-vector doubles as the cell's
feature row.
"""

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gradcamo import tbf
from gradcamo.engine import Tape, Tensor, ops, resize_volume
from gradcamo.errors import GradCamoError, IOFailure, ValidationError
from gradcamo.volume import (
    ChannelStats,
    apply_augment,
    normalize,
    rescale01,
    sample_augment_plan,
)
from gradcamo.scoring import regularized_loss

WIDTHS = (8, 16, 32, 64)
FEATURE_DIM = WIDTHS[-1]
_INIT_SALT = 0x1417
_TRAIN_SALT = 0x7A11

CHECKPOINT_NAME = "model.json"


def _check_input_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 16 for s in shape):
        raise ValidationError(
            f"model input shape must be three extents >= 16, got {shape}")
    bad = [s for s in shape if s % 16]
    if bad:
        raise ValidationError(
            f"input extents {shape} are not divisible by 16; resize crops to "
            "a multiple of 16 per axis (resize_volume) before the forward pass")
    return shape


class MiniCNN3D:
    """Small 3D CNN over ``(C, X, Y, Z)`` crops.

    Parameters live in ``self.params`` as named float32 arrays; the training
    loop and the checkpoint code treat that dict as the single source of
    truth.
    """

    def __init__(self, n_classes, in_channels=3, input_shape=(32, 32, 16), seed=0):
        if n_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {n_classes}")
        if in_channels < 1:
            raise ValidationError(f"need at least 1 input channel, got {in_channels}")
        self.n_classes = int(n_classes)
        self.in_channels = int(in_channels)
        self.input_shape = _check_input_shape(input_shape)
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence([_INIT_SALT, self.seed]))
        self.params = {}
        fan_in = self.in_channels
        for i, width in enumerate(WIDTHS, start=1):
            std = np.sqrt(2.0 / (fan_in * 27))
            self.params[f"conv{i}_w"] = (
                rng.standard_normal((width, fan_in, 3, 3, 3)) * std
            ).astype(np.float32)
            self.params[f"conv{i}_b"] = np.zeros(width, dtype=np.float32)
            fan_in = width
        std = np.sqrt(1.0 / FEATURE_DIM)
        self.params["head_w"] = (
            rng.standard_normal((self.n_classes, FEATURE_DIM)) * std
        ).astype(np.float32)
        self.params["head_b"] = np.zeros(self.n_classes, dtype=np.float32)

    def astype(self, dtype):
        """Cast every parameter in place; used by float64 gradient checks."""
        dtype = np.dtype(dtype)
        for name in self.params:
            self.params[name] = self.params[name].astype(dtype)
        return self

    def _check_input(self, xd):
        spatial = tuple(xd.shape[-3:])
        channels = xd.shape[-4]
        if channels != self.in_channels:
            raise ValidationError(
                f"model expects {self.in_channels} channels, got {channels}")
        _check_input_shape(spatial)

    def forward_graph(self, tape, x):
        """Build the forward graph; returns ``(logits, activation)``.

        ``x`` is a tape Tensor or array, ``(C, X, Y, Z)`` or batched
        ``(N, C, X, Y, Z)``, extents divisible by 16.
        """
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xd.ndim not in (4, 5):
            raise ValidationError(
                f"forward expects (C, X, Y, Z) or (N, C, X, Y, Z), got {xd.shape}")
        self._check_input(xd)
        dtype = xd.dtype
        params = {name: tape.var(p.astype(dtype, copy=False), op=name)
                  for name, p in self.params.items()}
        self._last_params = params
        h = x
        for i in range(1, len(WIDTHS) + 1):
            h = ops.conv3d(h, params[f"conv{i}_w"], params[f"conv{i}_b"])
            h = ops.relu(h)
            h = ops.maxpool3d(h)
        activation = h
        pooled = ops.global_avg_pool(activation)
        logits = ops.linear(pooled, params["head_w"], params["head_b"])
        return logits, activation


def predict(model, crop):
    """Class index and softmax probabilities for one preprocessed crop.

    Ties go to the lowest class index.
    """
    with Tape() as tape:
        logits, _ = model.forward_graph(tape, np.asarray(crop, dtype=np.float32))
        z = logits.data.astype(np.float64)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    return int(np.argmax(z)), p


@dataclass
class TrainConfig:
    """Optimization hyperparameters; defaults follow the training recipe."""

    lr: float = 3e-4
    batch_size: int = 8
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 3
    reg_weight: float = 0.0  # lambda for the overlap regularizer
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.reg_weight < 0:
            raise ValidationError(
                f"regularizer weight must be >= 0, got {self.reg_weight}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValidationError("Adam betas must lie in (0, 1)")


@dataclass
class TrainData:
    """Crops ready for the loop: rescaled to [0, 1] but not yet normalized.

    ``labels`` are 0-based class indices. ``masks`` are uint8 occupancy masks
    at model-input resolution (required when the regularizer is active).
    """

    train_crops: list
    train_labels: np.ndarray
    val_crops: list
    val_labels: np.ndarray
    stats: ChannelStats
    train_masks: np.ndarray = None
    label_values: tuple = None


class _Adam:
    def __init__(self, params, config):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        c = self.config
        self.t += 1
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            g = g.astype(np.float32, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            step = c.lr * (m / bias1) / (np.sqrt(v / bias2) + c.adam_eps)
            params[name] -= step.astype(np.float32)


def _to_batch(crops, indices, stats, input_shape, plans=None):
    """Normalize (optionally augmented) crops and resize to the model input."""
    rows = []
    for pos, idx in enumerate(indices):
        crop = crops[idx]
        if plans is not None:
            crop = apply_augment(crop, plans[pos])
        crop = normalize(crop, stats)
        rows.append(resize_volume(crop.volume, input_shape))
    return np.ascontiguousarray(np.stack(rows), dtype=np.float32)


def _resize_mask(mask, input_shape):
    """Trilinear-resize a binary mask and re-binarize at 0.5."""
    m = resize_volume(mask.astype(np.float32)[None], input_shape)[0]
    return (m >= 0.5).astype(np.uint8)


def _flip_mask(mask, plan):
    m = mask
    if plan.flip_x:
        m = m[::-1]
    if plan.flip_y:
        m = m[:, ::-1]
    return np.ascontiguousarray(m)


def prepare_eval_inputs(crops, stats, input_shape):
    """Preprocess raw crops for scoring: rescale, normalize, resize.

    Returns ``(inputs, masks)``: float32 ``(N, C, X, Y, Z)`` volumes and
    uint8 ``(N, X, Y, Z)`` masks, both at the model input resolution.
    """
    if not crops:
        raise ValidationError("no crops to prepare")
    input_shape = _check_input_shape(input_shape)
    scaled = [rescale01(c) for c in crops]
    inputs = _to_batch(scaled, range(len(scaled)), stats, input_shape)
    masks = np.stack([_resize_mask(c.mask, input_shape) for c in crops])
    return inputs, masks


def _accuracy(model, crops, labels, stats, batch_size=16):
    hits = 0
    for start in range(0, len(crops), batch_size):
        idx = range(start, min(start + batch_size, len(crops)))
        xb = _to_batch(crops, idx, stats, model.input_shape)
        with Tape() as tape:
            logits, _ = model.forward_graph(tape, xb)
            hits += int((logits.data.argmax(axis=1) == labels[list(idx)]).sum())
    return hits / max(len(crops), 1)


def train(model, data, config):
    """Run the optimization loop; returns per-epoch history rows.

    Stops early when validation accuracy has not improved for
    ``config.patience`` epochs; the best-validation weights are left on the
    model either way. With ``reg_weight`` > 0 the mean overlap score of each
    batch is subtracted from the loss (weighted) and reported per epoch.
    """
    if not isinstance(config, TrainConfig):
        raise ValidationError("train expects a TrainConfig")
    if not data.train_crops:
        raise ValidationError("training split is empty")
    if not data.val_crops:
        raise ValidationError("validation split is empty")
    y_train = np.asarray(data.train_labels, dtype=np.int64)
    y_val = np.asarray(data.val_labels, dtype=np.int64)
    for name, y, n in (("train", y_train, len(data.train_crops)),
                       ("val", y_val, len(data.val_crops))):
        if y.shape != (n,):
            raise ValidationError(f"{name} labels must be one per crop")
        if y.min() < 0 or y.max() >= model.n_classes:
            raise ValidationError(
                f"{name} labels must lie in [0, {model.n_classes})")
    masks = None
    if config.reg_weight > 0:
        if data.train_masks is None:
            raise ValidationError("the overlap regularizer needs training masks")
        masks = np.asarray(data.train_masks)
        if masks.shape != (len(data.train_crops),) + model.input_shape:
            raise ValidationError(
                f"masks must be (N,) + {model.input_shape}, got {masks.shape}")

    rng = np.random.default_rng(np.random.SeedSequence(
        [config.seed, _TRAIN_SALT]))
    optim = _Adam(model.params, config)
    history = []
    best_acc = -1.0
    best_params = None
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data.train_crops))
        losses = []
        reg_scores = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            plans = None
            if config.augment:
                plans = [sample_augment_plan(rng) for _ in idx]
            xb = _to_batch(data.train_crops, idx, data.stats,
                           model.input_shape, plans)
            yb = y_train[idx]
            with Tape() as tape:
                if config.reg_weight > 0:
                    mb = masks[idx]
                    if plans is not None:
                        mb = np.stack([_flip_mask(m, p) for m, p in zip(mb, plans)])
                    loss, mean_s = regularized_loss(tape, model, xb, yb, mb,
                                                    config.reg_weight)
                    reg_scores.append(float(mean_s))
                else:
                    logits, _ = model.forward_graph(tape, xb)
                    loss = ops.softmax_cross_entropy(logits, yb)
                tape.backward(loss)
                grads = {name: t.grad for name, t in model._last_params.items()}
                optim.step(model.params, grads)
                losses.append(float(loss.data))
        for name, p in model.params.items():
            if not np.isfinite(p).all():
                raise GradCamoError(
                    f"parameter {name} became non-finite in epoch {epoch}")
        row = {
            "epoch": epoch,
            "train_acc": _accuracy(model, data.train_crops, y_train, data.stats),
            "val_acc": _accuracy(model, data.val_crops, y_val, data.stats),
            "loss": float(np.mean(losses)),
        }
        if config.reg_weight > 0:
            row["mean_gradcamo"] = float(np.mean(reg_scores))
        history.append(row)
        if row["val_acc"] > best_acc:
            best_acc = row["val_acc"]
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        elif epoch - best_epoch >= config.patience:
            break
    model.params = best_params
    return history


def write_history(path, history):
    """Training history as CSV; the regularizer column appears only when used."""
    fields = ["epoch", "train_acc", "val_acc", "loss"]
    if history and "mean_gradcamo" in history[0]:
        fields.append("mean_gradcamo")
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in history:
                writer.writerow({k: _fmt(row[k]) for k in fields})
    except OSError as exc:
        raise IOFailure(f"cannot write history {path}: {exc}") from exc


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


@dataclass
class FeatureMatrix:
    """One pooled feature row per cell, with identifying metadata columns."""

    ids: list
    values: np.ndarray
    labels: np.ndarray
    wells: list
    sites: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sites = np.asarray(self.sites, dtype=np.int64)
        n = len(self.ids)
        if self.values.ndim != 2 or self.values.shape[0] != n:
            raise ValidationError(
                f"feature matrix must be ({n}, d), got {self.values.shape}")
        if len(set(self.ids)) != n:
            raise ValidationError("duplicate cell ids in feature matrix")
        if not np.isfinite(self.values).all():
            raise ValidationError("feature matrix contains non-finite entries")
        if self.labels.shape != (n,) or self.sites.shape != (n,) or len(self.wells) != n:
            raise ValidationError("metadata columns must match the row count")

    def __len__(self):
        return len(self.ids)


def extract_features(model, crops, records, stats, batch_size=16):
    """Pooled activation per cell: ``global_avg_pool(A)`` row by row."""
    if len(crops) != len(records):
        raise ValidationError("one record per crop required")
    rows = []
    for start in range(0, len(crops), batch_size):
        idx = range(start, min(start + batch_size, len(crops)))
        xb = _to_batch(crops, idx, stats, model.input_shape)
        with Tape() as tape:
            _, activation = model.forward_graph(tape, xb)
            rows.append(activation.data.mean(axis=(2, 3, 4)))
    values = np.concatenate(rows, axis=0) if rows else np.zeros((0, FEATURE_DIM))
    return FeatureMatrix(
        ids=[r.cell_id for r in records],
        values=values,
        labels=[int(r.label) for r in records],
        wells=[r.well for r in records],
        sites=[int(r.site) for r in records],
    )


def write_features(path, fm):
    """Feature CSV: cell_id, label, well, site, then f00..fNN columns."""
    d = fm.values.shape[1]
    fields = ["cell_id", "label", "well", "site"] + [f"f{i:02d}" for i in range(d)]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(fields)
            for i, cell_id in enumerate(fm.ids):
                writer.writerow(
                    [cell_id, int(fm.labels[i]), fm.wells[i], int(fm.sites[i])]
                    + [f"{v:.9g}" for v in fm.values[i]])
    except OSError as exc:
        raise IOFailure(f"cannot write features {path}: {exc}") from exc


def read_features(path):
    """Parse a feature CSV back into a FeatureMatrix; errors carry line numbers."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read features {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError(f"{path}: empty features file") from None
    meta = ["cell_id", "label", "well", "site"]
    if header[: len(meta)] != meta or len(header) <= len(meta):
        raise ValidationError(
            f"{path}: line 1: expected columns {meta} + feature columns")
    d = len(header) - len(meta)
    ids, values, labels, wells, sites = [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ValidationError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ids.append(row[0])
            labels.append(int(row[1]))
            wells.append(row[2])
            sites.append(int(row[3]))
            values.append([float(v) for v in row[4:]])
        except ValueError as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    return FeatureMatrix(ids=ids, values=np.asarray(values, dtype=np.float64),
                         labels=labels, wells=wells, sites=sites)


def save_model(model, stats, label_values, out_dir):
    """Checkpoint: one TBF per parameter plus a JSON descriptor.

    ``label_values`` maps class indices back to manifest labels;
    ``stats`` are the training-set channel statistics needed to preprocess
    new crops identically.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc}") from exc
    files = {}
    for name, param in model.params.items():
        fname = f"param_{name}.tbf"
        tbf.write_tensor(out_dir / fname, param.astype(np.float32))
        files[name] = fname
    doc = {
        "architecture": "minicnn3d",
        "widths": list(WIDTHS),
        "n_classes": model.n_classes,
        "in_channels": model.in_channels,
        "input_shape": list(model.input_shape),
        "seed": model.seed,
        "label_values": [int(v) for v in label_values],
        "channel_stats": {
            "mean": [float(v) for v in stats.mean],
            "std": [float(v) for v in stats.std],
        },
        "params": files,
    }
    try:
        (out_dir / CHECKPOINT_NAME).write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint descriptor: {exc}") from exc


def load_model(model_dir):
    """Inverse of save_model: returns ``(model, stats, label_values)``."""
    model_dir = Path(model_dir)
    desc_path = model_dir / CHECKPOINT_NAME
    try:
        doc = json.loads(desc_path.read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {desc_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{desc_path} is not valid JSON: {exc}") from exc
    if doc.get("architecture") != "minicnn3d" or doc.get("widths") != list(WIDTHS):
        raise ValidationError(f"{desc_path}: unsupported architecture")
    model = MiniCNN3D(
        n_classes=int(doc["n_classes"]),
        in_channels=int(doc["in_channels"]),
        input_shape=tuple(doc["input_shape"]),
        seed=int(doc.get("seed", 0)),
    )
    for name, fname in doc["params"].items():
        if name not in model.params:
            raise ValidationError(f"{desc_path}: unknown parameter {name!r}")
        arr = tbf.read_tensor(model_dir / fname).astype(np.float32)
        if arr.shape != model.params[name].shape:
            raise ValidationError(
                f"{desc_path}: parameter {name} has shape {arr.shape}, "
                f"expected {model.params[name].shape}")
        model.params[name] = arr
    stats = ChannelStats(mean=doc["channel_stats"]["mean"],
                         std=doc["channel_stats"]["std"])
    label_values = tuple(int(v) for v in doc["label_values"])
    if len(label_values) != model.n_classes:
        raise ValidationError(f"{desc_path}: label_values must list every class")
    return model, stats, label_values


def build_train_data(cells, records, val_split="val", masks_for_reg=False,
                     input_shape=(32, 32, 16)):
    """Bundle prepared cells into TrainData using manifest split tags.

    Crops are rescaled to [0, 1] here; channel statistics come from the
    training split only. Labels are mapped to dense 0-based indices in
    sorted order of the distinct manifest labels.
    """
    train_crops, val_crops = [], []
    train_labels, val_labels = [], []
    train_masks = []
    label_values = sorted({int(r.label) for r in records})
    index_of = {v: i for i, v in enumerate(label_values)}
    input_shape = _check_input_shape(input_shape)
    for crop, rec in zip(cells, records):
        rescaled = rescale01(crop)
        if rec.split == "train":
            train_crops.append(rescaled)
            train_labels.append(index_of[int(rec.label)])
            if masks_for_reg:
                train_masks.append(_resize_mask(crop.mask, input_shape))
        elif rec.split == val_split:
            val_crops.append(rescaled)
            val_labels.append(index_of[int(rec.label)])
    if not train_crops:
        raise ValidationError("no crops in the training split")
    if not val_crops:
        raise ValidationError("no crops in the validation split")
    stats = compute_stats_from_rescaled(train_crops)
    return TrainData(
        train_crops=train_crops,
        train_labels=np.asarray(train_labels, dtype=np.int64),
        val_crops=val_crops,
        val_labels=np.asarray(val_labels, dtype=np.int64),
        stats=stats,
        train_masks=np.stack(train_masks) if train_masks else None,
        label_values=tuple(label_values),
    )


def compute_stats_from_rescaled(crops):
    """Channel stats of crops already mapped to [0, 1] (no second rescale)."""
    total = np.zeros(crops[0].volume.shape[0])
    total_sq = np.zeros_like(total)
    count = 0
    for crop in crops:
        vol = crop.volume.astype(np.float64)
        total += vol.sum(axis=(1, 2, 3))
        total_sq += (vol * vol).sum(axis=(1, 2, 3))
        count += vol[0].size
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), 1e-8)
    return ChannelStats(mean=mean, std=std)
