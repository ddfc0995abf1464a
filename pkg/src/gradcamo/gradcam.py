"""Grad-CAM localization maps for volumetric classifiers.

The channel weights are spatial means of the gradient of one pre-softmax
logit with respect to the designated activation. The weighted channel mean
passes through a ReLU and is trilinearly upsampled to the input resolution.
"""

from dataclasses import dataclass

import numpy as np

from gradcamo.engine import Tape, ops, resize_volume
from gradcamo.errors import ValidationError


@dataclass
class LocalizationMap:
    """One cell's attention volume plus the ingredients that produced it."""

    coarse: np.ndarray   # (H, W, D) non-negative, activation resolution
    full: np.ndarray     # (X, Y, Z) non-negative, input resolution
    class_index: int
    weights: np.ndarray  # (C',) channel weights

    def __post_init__(self):
        if (self.coarse < 0).any() or (self.full < 0).any():
            raise ValidationError("localization maps must be non-negative")


def channel_weights(tape, activation, score):
    """Per-channel spatial mean of d(score)/d(activation).

    ``score`` must be a scalar tensor downstream of ``activation`` on the
    same tape (a pre-softmax logit, not a probability). Batched activations
    ``(N, C, H, W, D)`` give ``(N, C)`` weights in a single backward pass:
    each sample's logit sees only its own activation row.
    """
    if activation.data.ndim not in (4, 5):
        raise ValidationError(
            f"activation must be (C, H, W, D) or batched, got {activation.data.shape}")
    tape.zero_grads()
    tape.backward(score, targets=[activation])
    grad = activation.grad
    if grad is None:
        raise ValidationError(
            "score does not depend on the activation; "
            "channel weights need a forward pass recorded on the tape")
    return grad.mean(axis=(-3, -2, -1)).copy()


def localization_map(activation, weights, target_shape):
    """ReLU of the weighted channel mean, then upsampled: ``(coarse, full)``.

    Pure numpy; use the ops-module equivalents when gradients must flow.
    """
    a = np.asarray(activation)
    w = np.asarray(weights, dtype=a.dtype)
    if a.ndim != 4:
        raise ValidationError(f"activation must be (C, H, W, D), got {a.shape}")
    if w.shape != (a.shape[0],):
        raise ValidationError(
            f"need one weight per channel, got {w.shape} for {a.shape[0]} channels")
    coarse = np.maximum(np.tensordot(w, a, axes=(0, 0)) / a.shape[0], 0)
    full = resize_volume(coarse[None].astype(np.float32), target_shape)[0]
    np.maximum(full, 0, out=full)  # clamp interpolation round-off
    return coarse.astype(np.float32), full


def gradcam_for_cell(model, crop, class_override=None):
    """Forward one preprocessed crop and map its predicted (or given) class.

    ``crop`` is a ``(C, X, Y, Z)`` array at model input resolution. The map
    is upsampled back to that same spatial shape.
    """
    x = np.asarray(crop, dtype=np.float32)
    if x.ndim != 4:
        raise ValidationError(f"expected one (C, X, Y, Z) crop, got {x.shape}")
    with Tape() as tape:
        logits, activation = model.forward_graph(tape, x)
        if class_override is None:
            k = int(np.argmax(logits.data))
        else:
            k = int(class_override)
            if not 0 <= k < logits.data.shape[0]:
                raise ValidationError(
                    f"class override {k} outside [0, {logits.data.shape[0]})")
        score = ops.gather_sum(logits, np.int64(k))
        w = channel_weights(tape, activation, score)
        coarse, full = localization_map(activation.data, w, x.shape[1:])
    return LocalizationMap(coarse=coarse, full=full, class_index=k, weights=w)


def batched_maps(model, batch, classes=None):
    """Full-resolution maps for a batch, one backward pass for everything.

    ``batch`` is ``(N, C, X, Y, Z)``. ``classes`` picks the logit per sample
    (defaults to each sample's argmax). Returns ``(maps, logits, weights)``
    with maps ``(N, X, Y, Z)``.
    """
    xb = np.asarray(batch, dtype=np.float32)
    if xb.ndim != 5:
        raise ValidationError(f"expected a (N, C, X, Y, Z) batch, got {xb.shape}")
    with Tape() as tape:
        logits, activation = model.forward_graph(tape, xb)
        if classes is None:
            classes = logits.data.argmax(axis=1)
        classes = np.asarray(classes, dtype=np.int64)
        if classes.shape != (xb.shape[0],):
            raise ValidationError(f"need one class per sample, got {classes.shape}")
        score = ops.gather_sum(logits, classes)
        w = channel_weights(tape, activation, score)  # (N, C')
        a = activation.data
        coarse = np.einsum("nc,nchwd->nhwd", w, a) / a.shape[1]
        np.maximum(coarse, 0, out=coarse)
        full = resize_volume(coarse.astype(np.float32), xb.shape[2:])
        np.maximum(full, 0, out=full)
        logits_out = logits.data.copy()
    return full, logits_out, w
