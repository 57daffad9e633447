"""Latent grids are plain float64 arrays of shape (channels, height, width).

The encoder is the identity at toy scale, so the same array type stands in
for the person, garment, target, noise and noisy-latent symbols alike.
"""
import numpy as np

from .errors import NumericError, ShapeError

T_MAX = 1.0 - 1e-12


def as_grid(x, name="grid"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ShapeError(f"{name}: expected (channels, height, width), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name}: non-finite values")
    return a


def check_same_shape(a, b, what="grids"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def zeros_like_grid(x):
    return np.zeros_like(np.asarray(x, dtype=np.float64))
