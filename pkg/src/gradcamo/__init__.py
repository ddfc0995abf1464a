"""Volumetric CNN morphological profiling with attention-overlap auditing.

Subpackages
-----------
engine    dense tensor engine with reverse-mode autodiff and the hot kernels
tbf       trivially parseable binary tensor files
volume    crop extraction, preprocessing, augmentation, manifests
synth     synthetic 3-channel microscopy volumes with controllable confounders
model     the small 3D CNN and its training loop
gradcam   class-discriminative localization maps
scoring   overlap scores, dataset audits, feature filtering, the regularizer
whitening covariance whitening for plate-level batch correction
report    deterministic markdown + SVG audit reports
cli       the ``gradcamo`` command line
"""

from gradcamo.errors import (
    DataFormatError,
    GradCamoError,
    IOFailure,
    ManifestError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "DataFormatError",
    "GradCamoError",
    "IOFailure",
    "ManifestError",
    "ValidationError",
    "__version__",
]
