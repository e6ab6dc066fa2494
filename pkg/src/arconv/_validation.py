"""Exceptions and input checks shared across the package."""
import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class FormatError(ValueError):
    """Raised on a malformed checkpoint or label file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class PreprocessingError(ValueError):
    """Raised when an image cannot be masked or cropped."""


def check_array(x, ndim=None, dtype=np.float64, name="input"):
    """Convert ``x`` to a float ndarray and validate rank and finiteness."""
    arr = np.asarray(x, dtype=dtype)
    if ndim is not None:
        allowed = (ndim,) if isinstance(ndim, int) else tuple(ndim)
        if arr.ndim not in allowed:
            raise ShapeError(f"{name} must have rank in {allowed}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {names[0]}{a.shape} vs {names[1]}{b.shape}")


def check_odd_kernel(n):
    if n < 1 or n % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {n}")


def check_random_state(seed):
    """Return a ``numpy.random.Generator`` (PCG64) for ``seed``.

    Accepts an int, None, or an existing Generator (returned unchanged).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))
