"""Multivariate-Gaussian motion priors and a full-covariance variational segmenter.

Modules:
    geometry    rotated bounding boxes and the inter-frame transform
    mgd         full-covariance Gaussians: fit, sample, KL, Mahalanobis
    dataprep    synthetic mask sequences, filtering, patch cropping, prior fitting
    bottleneck  head activations to (mu', Sigma') and the reparameterization
    network     numpy encoder/decoder (plain and U-Net), losses, backprop
    train       RAdam, cyclical learning rate, validation, checkpoints
    metrics     J, boundary F, MSE, NLL, saliency MAE / F-beta
    store       PGM/PPM and manifest I/O
    cli         the ``mvprior`` command
"""
from .errors import (DataFormatError, DimensionMismatchError, EmptyObjectError, GenerationError,
                     InsufficientDataError, InvalidParameterError, MvpriorError, NotPSDError, NumericError)
from .geometry import FrameDims, MotionParams, RBBox
from .mgd import GaussianND

__version__ = "0.1.0"

__all__ = [
    "DataFormatError", "DimensionMismatchError", "EmptyObjectError", "FrameDims", "GaussianND",
    "GenerationError", "InsufficientDataError", "InvalidParameterError", "MotionParams", "MvpriorError",
    "NotPSDError", "NumericError", "RBBox",
]
