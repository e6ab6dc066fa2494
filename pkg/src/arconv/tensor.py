"""Dense array helpers.

Arrays are plain ``numpy.ndarray`` objects in row-major order. Images are
H x W x C and batches N x H x W x C. Randomness always goes through a
PCG64 ``numpy.random.Generator`` so a seed fixes the stream on every
platform.
"""
import numpy as np

from ._validation import ShapeError, check_random_state, check_same_shape

Rng = np.random.Generator


def make_rng(seed=None) -> Rng:
    return check_random_state(seed)


def spawn_rngs(rng: Rng, n: int) -> list:
    """Split ``rng`` into ``n`` independent child generators."""
    return [make_rng(int(s)) for s in rng.integers(0, 2**63, size=n)]


def make_tensor(shape, fill=0.0, dtype=np.float64) -> np.ndarray:
    """Build an array of ``shape`` from a constant or a flat sequence."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    data = np.asarray(fill, dtype=dtype).ravel()
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"sequence of length {data.size} does not fill shape {shape}")
    return data.reshape(shape).copy()


def transpose_hw(x) -> np.ndarray:
    """Swap the two spatial axes of an H x W or H x W x C array."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x.T.copy()
    if x.ndim == 3:
        return x.transpose(1, 0, 2).copy()
    raise ShapeError(f"transpose_hw expects rank 2 or 3, got shape {x.shape}")


def rand_tensor(rng: Rng, shape, dist="uniform", *, low=0.0, high=1.0, mean=0.0, std=1.0,
                dtype=np.float64) -> np.ndarray:
    """Draw an array from ``uniform[low, high)`` or ``normal(mean, std)``."""
    shape = tuple(int(s) for s in shape)
    if dist == "uniform":
        if not low < high:
            raise ValueError(f"uniform needs low < high, got [{low}, {high})")
        out = rng.uniform(low, high, size=shape)
    elif dist == "normal":
        if not std > 0:
            raise ValueError(f"normal needs std > 0, got {std}")
        out = rng.normal(mean, std, size=shape)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return out.astype(dtype, copy=False)


def mae(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    check_same_shape(a, b)
    return float(np.mean(np.abs(a - b)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic child seed for ``(seed, *keys)``, independent of call order."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
