"""Batch-effect correction by whitening against control cells.

A transform fitted on control-cell features maps any feature matrix to
one where the control population has identity covariance. Treated cells
are centered with the control mean, so their displacement from the
control distribution survives the transform.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError, IOFailure, ValidationError
from .tbf import read_tensor, write_tensor

META_NAME = "whitening.json"
MEAN_NAME = "whitening_mean.tbf"
MATRIX_NAME = "whitening_matrix.tbf"


@dataclass(frozen=True)
class WhiteningTransform:
    """Control mean and inverse-square-root covariance matrix."""

    mean: np.ndarray
    matrix: np.ndarray
    eps: float
    n_fit: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if mean.ndim != 1:
            raise ValidationError(f"mean must be 1D, got shape {mean.shape}")
        if matrix.shape != (mean.size, mean.size):
            raise ValidationError(
                f"matrix shape {matrix.shape} does not match mean length {mean.size}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(matrix)):
            raise ValidationError("whitening transform has non-finite entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "matrix", matrix)

    @property
    def dim(self):
        return self.mean.size

    def apply(self, features):
        """Map rows y to W @ (y - mean). Accepts (d,) or (M, d)."""
        feats = np.asarray(features, dtype=np.float64)
        single = feats.ndim == 1
        if single:
            feats = feats[None]
        if feats.ndim != 2:
            raise ValidationError(
                f"features must be a vector or matrix, got shape {feats.shape}")
        if feats.shape[1] != self.dim:
            raise ValidationError(
                f"features have {feats.shape[1]} columns, transform expects {self.dim}")
        if not np.all(np.isfinite(feats)):
            raise ValidationError("features contain non-finite entries")
        out = (feats - self.mean) @ self.matrix.T
        return out[0] if single else out


def fit_whitening(control_features):
    """Fit a whitening transform to an (N, d) control feature matrix.

    Centers by the column mean, eigendecomposes the sample covariance
    (1/N) Xc.T @ Xc, floors eigenvalues at 1e-6 of the largest one, and
    forms W = Q diag(lam**-0.5) Q.T. The floor keeps W finite when the
    controls are rank deficient.
    """
    feats = np.asarray(control_features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValidationError(
            f"control features must be an (N, d) matrix, got shape {feats.shape}")
    n, d = feats.shape
    if n < 2:
        raise ValidationError(f"whitening needs at least 2 control rows, got {n}")
    if d < 1:
        raise ValidationError("control features have no columns")
    if not np.all(np.isfinite(feats)):
        raise ValidationError("control features contain non-finite entries")

    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    lam_max = float(eigvals[-1])
    eps = 1e-6 * lam_max if lam_max > 0 else 1e-12
    floored = np.maximum(eigvals, eps)
    matrix = (eigvecs * (1.0 / np.sqrt(floored))) @ eigvecs.T
    return WhiteningTransform(mean=mean, matrix=matrix, eps=eps, n_fit=n)


def save_whitening(transform, out_dir):
    """Write mean and matrix as tensor files plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tensor(out / MEAN_NAME, transform.mean)
    write_tensor(out / MATRIX_NAME, transform.matrix)
    meta = {
        "dim": int(transform.dim),
        "eps": float(transform.eps),
        "n_fit": int(transform.n_fit),
    }
    with open(out / META_NAME, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_whitening(in_dir):
    in_dir = Path(in_dir)
    meta_path = in_dir / META_NAME
    if not meta_path.is_file():
        raise IOFailure(f"missing whitening metadata: {meta_path}")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"invalid JSON in {meta_path}: {exc}") from exc
    for key in ("dim", "eps", "n_fit"):
        if key not in meta:
            raise DataFormatError(f"{meta_path} is missing key {key!r}")
    mean = read_tensor(in_dir / MEAN_NAME)
    matrix = read_tensor(in_dir / MATRIX_NAME)
    transform = WhiteningTransform(
        mean=mean, matrix=matrix, eps=float(meta["eps"]), n_fit=int(meta["n_fit"]))
    if transform.dim != int(meta["dim"]):
        raise DataFormatError(
            f"metadata says dim {meta['dim']} but tensors have dim {transform.dim}")
    return transform
