"""Depthwise convolutions, the shared-kernel ArConv operator, and their gradients.

All spatial operators work on arrays laid out ``(..., H, W, C)`` so a single
image ``H x W x C`` and a batch ``N x H x W x C`` go through the same code.
Kernels are stored tap-major: a 2D depthwise kernel is ``(n, n, C)`` and a
1D ArConv kernel is ``(n, C)``.

The core engine correlates (no flip); ``flip=True`` rotates the kernel by
180 degrees first, which gives textbook convolution.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._validation import ShapeError, check_array, check_odd_kernel


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int = 3
    stride: int = 1
    padding: str = "same"
    flip: bool = False

    def __post_init__(self):
        check_odd_kernel(self.kernel_size)
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass
class ArConvKernel:
    """Per-channel 1D weights ``(n, C)`` and an optional per-channel bias."""

    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 1:
            w = w[:, None]
        if w.ndim != 2:
            raise ShapeError(f"ArConv weights must be (n, C), got {w.shape}")
        check_odd_kernel(w.shape[0])
        self.weights = w
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
            if self.bias.shape[0] != w.shape[1]:
                raise ShapeError(f"bias length {self.bias.shape[0]} != channels {w.shape[1]}")

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def channels(self):
        return self.weights.shape[1]


# ---------------------------------------------------------------------------
# tap engine


def _geometry(extent, taps, stride, padding):
    pad = taps // 2 if padding == "same" else 0
    if padding == "same":
        out = -(-extent // stride)
    else:
        out = (extent - taps) // stride + 1
        if out < 1:
            raise ShapeError(f"valid padding needs extent >= {taps}, got {extent}")
    return pad, out


def _pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    shape = x.shape[:-3] + (x.shape[-3] + 2 * ph, x.shape[-2] + 2 * pw, x.shape[-1])
    xp = np.zeros(shape, dtype=x.dtype)
    xp[..., ph:ph + x.shape[-3], pw:pw + x.shape[-2], :] = x
    return xp


def _tap_slices(i, j, ho, wo, stride):
    return (Ellipsis, slice(i, i + stride * (ho - 1) + 1, stride),
            slice(j, j + stride * (wo - 1) + 1, stride), slice(None))


def correlate(x, k, stride=1, padding="same"):
    """Depthwise cross-correlation of ``x (..., H, W, C)`` with ``k (kh, kw, C)``."""
    kh, kw = k.shape[:2]
    ph, ho = _geometry(x.shape[-3], kh, stride, padding)
    pw, wo = _geometry(x.shape[-2], kw, stride, padding)
    xp = _pad_hw(x, ph, pw)
    out = None
    for i in range(kh):
        for j in range(kw):
            term = xp[_tap_slices(i, j, ho, wo, stride)] * k[i, j]
            if out is None:
                out = term
            else:
                out += term
    return out


def correlate_backward(x, k, grad_out, stride=1, padding="same", need_x=True):
    """Gradients of ``sum(grad_out * correlate(x, k))`` w.r.t. ``x`` and ``k``."""
    kh, kw = k.shape[:2]
    ph, ho = _geometry(x.shape[-3], kh, stride, padding)
    pw, wo = _geometry(x.shape[-2], kw, stride, padding)
    if grad_out.shape[-3:-1] != (ho, wo):
        raise ShapeError(f"grad_out spatial shape {grad_out.shape[-3:-1]} != {(ho, wo)}")
    xp = _pad_hw(x, ph, pw)
    grad_k = np.empty(k.shape, dtype=np.result_type(x.dtype, k.dtype))
    lead = "abcdefgh"[:grad_out.ndim - 1]
    reduce_to_channels = f"{lead}z,{lead}z->z"
    grad_xp = np.zeros(xp.shape, dtype=grad_out.dtype) if need_x else None
    for i in range(kh):
        for j in range(kw):
            sl = _tap_slices(i, j, ho, wo, stride)
            grad_k[i, j] = np.einsum(reduce_to_channels, grad_out, xp[sl])
            if need_x:
                grad_xp[sl] += grad_out * k[i, j]
    grad_x = None
    if need_x:
        grad_x = grad_xp[..., ph:ph + x.shape[-3], pw:pw + x.shape[-2], :]
        if ph or pw:
            grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_k


def _rot180(k):
    return k[::-1, ::-1]


def _as_float(x, name, ndim):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return check_array(x, ndim=ndim, dtype=x.dtype, name=name)


# ---------------------------------------------------------------------------
# public operators


def outer_kernel(k) -> np.ndarray:
    """Rank-1 plane ``K[i, j] = k[i] * k[j]`` (per channel when ``k`` is ``(n, C)``)."""
    k = np.asarray(k, dtype=float)
    if k.ndim == 1:
        return np.outer(k, k)
    return k[:, None, :] * k[None, :, :]


def conv2d_plane(x, k, spec: ConvSpec = None) -> np.ndarray:
    """2D convolution of a single ``H x W`` plane with an ``n x n`` kernel."""
    x = _as_float(x, "x", 2)
    k = _as_float(k, "kernel", 2)
    if k.shape[0] != k.shape[1]:
        raise ValueError(f"kernel must be square, got {k.shape}")
    spec = spec or ConvSpec(kernel_size=k.shape[0])
    check_odd_kernel(k.shape[0])
    kk = _rot180(k) if spec.flip else k
    return correlate(x[:, :, None], kk[:, :, None], spec.stride, spec.padding)[:, :, 0]


def depthwise_conv2d(x, k, spec: ConvSpec = None) -> np.ndarray:
    """Per-channel 2D convolution; ``x`` is ``(..., H, W, C)``, ``k`` is ``(n, n, C)``."""
    x = _as_float(x, "x", (3, 4))
    k = _as_float(k, "kernel", 3)
    if k.shape[-1] != x.shape[-1]:
        raise ShapeError(f"kernel has {k.shape[-1]} channels, input has {x.shape[-1]}")
    check_odd_kernel(k.shape[0])
    spec = spec or ConvSpec(kernel_size=k.shape[0])
    kk = _rot180(k) if spec.flip else k
    return correlate(x, kk, spec.stride, spec.padding)


def _line_kernel(k, axis):
    # cols -> vertical n x 1 support, rows -> horizontal 1 x n support
    if axis == "cols":
        return k[:, None, :]
    if axis == "rows":
        return k[None, :, :]
    raise ValueError(f"axis must be 'cols' or 'rows', got {axis!r}")


def _kernel_arrays(k, channels):
    if isinstance(k, ArConvKernel):
        w, b = k.weights, k.bias
    else:
        w, b = np.asarray(k, dtype=float), None
        if w.ndim == 1:
            w = np.repeat(w[:, None], channels, axis=1)
    if w.shape[1] != channels:
        raise ShapeError(f"kernel has {w.shape[1]} channels, input has {channels}")
    check_odd_kernel(w.shape[0])
    return w, b


def line_conv(x, k, axis="cols", flip=False) -> np.ndarray:
    """Convolve every column (``axis='cols'``) or row (``axis='rows'``) of each channel.

    ``k`` is an :class:`ArConvKernel`, a ``(n, C)`` array, or a length-``n``
    vector shared by all channels. A bias, if present, is added once.
    """
    x = _as_float(x, "x", (3, 4))
    w, b = _kernel_arrays(k, x.shape[-1])
    if flip:
        w = w[::-1]
    out = correlate(x, _line_kernel(w, axis))
    if b is not None:
        out = out + b
    return out


def arconv_forward(x, k, flip=False, first_axis="cols") -> np.ndarray:
    """Apply the same 1D depthwise kernel along one spatial axis, then the other.

    Equivalent to a depthwise 2D convolution with ``outer_kernel(k)``. The
    second application is the first one run on the H/W-transposed result; it
    is computed directly along the other axis rather than by materializing
    the two transposes. The bias is added after the second application.
    """
    x = _as_float(x, "x", (3, 4))
    w, b = _kernel_arrays(k, x.shape[-1])
    if flip:
        w = w[::-1]
    second = "rows" if first_axis == "cols" else "cols"
    y = correlate(correlate(x, _line_kernel(w, first_axis)), _line_kernel(w, second))
    if b is not None:
        y = y + b
    return y


def arconv_backward(x, k, grad_out, flip=False, first_axis="cols"):
    """Gradients of ``sum(grad_out * arconv_forward(x, k))``.

    Returns ``(grad_x, grad_k, grad_b)``; ``grad_k`` has shape ``(n, C)`` and
    sums the two product-rule terms from the two applications of ``k``.
    ``grad_b`` is None when ``k`` carries no bias.
    """
    x = _as_float(x, "x", (3, 4))
    grad_out = _as_float(grad_out, "grad_out", x.ndim)
    w, b = _kernel_arrays(k, x.shape[-1])
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    grad_x, grad_w = _arconv_grads(x, w[::-1] if flip else w, grad_out, first_axis)
    if flip:
        grad_w = grad_w[::-1].copy()
    grad_b = None if b is None else grad_out.reshape(-1, x.shape[-1]).sum(axis=0)
    return grad_x, grad_w, grad_b


def _arconv_grads(x, w, grad_out, first_axis="cols", need_x=True):
    second = "rows" if first_axis == "cols" else "cols"
    k1, k2 = _line_kernel(w, first_axis), _line_kernel(w, second)
    mid = correlate(x, k1)
    grad_mid, gk2 = correlate_backward(mid, k2, grad_out)
    grad_x, gk1 = correlate_backward(x, k1, grad_mid, need_x=need_x)
    return grad_x, gk1.reshape(w.shape) + gk2.reshape(w.shape)


def line_conv_backward(x, k, grad_out, axis="cols", flip=False):
    """Gradients of ``sum(grad_out * line_conv(x, k, axis))``: ``(grad_x, grad_k, grad_b)``."""
    x = _as_float(x, "x", (3, 4))
    grad_out = _as_float(grad_out, "grad_out", x.ndim)
    w, b = _kernel_arrays(k, x.shape[-1])
    ww = w[::-1] if flip else w
    grad_x, gk = correlate_backward(x, _line_kernel(ww, axis), grad_out)
    gk = gk.reshape(w.shape)
    if flip:
        gk = gk[::-1].copy()
    grad_b = None if b is None else grad_out.reshape(-1, x.shape[-1]).sum(axis=0)
    return grad_x, gk, grad_b


def conv2d_plane_backward(x, k, grad_out, spec: ConvSpec = None):
    """Gradients ``(grad_x, grad_k)`` of ``sum(grad_out * conv2d_plane(x, k, spec))``."""
    x = _as_float(x, "x", 2)
    k = _as_float(k, "kernel", 2)
    spec = spec or ConvSpec(kernel_size=k.shape[0])
    grad_out = _as_float(grad_out, "grad_out", 2)
    kk = _rot180(k) if spec.flip else k
    gx, gk = correlate_backward(x[:, :, None], kk[:, :, None], grad_out[:, :, None],
                                spec.stride, spec.padding)
    gk = gk[:, :, 0]
    if spec.flip:
        gk = _rot180(gk).copy()
    return gx[:, :, 0], gk


def depthwise_conv2d_backward(x, k, grad_out, spec: ConvSpec = None):
    """Gradients ``(grad_x, grad_k)`` of ``sum(grad_out * depthwise_conv2d(x, k, spec))``."""
    x = _as_float(x, "x", (3, 4))
    k = _as_float(k, "kernel", 3)
    spec = spec or ConvSpec(kernel_size=k.shape[0])
    grad_out = _as_float(grad_out, "grad_out", x.ndim)
    kk = _rot180(k) if spec.flip else k
    gx, gk = correlate_backward(x, kk, grad_out, spec.stride, spec.padding)
    if spec.flip:
        gk = _rot180(gk).copy()
    return gx, gk


def conv_backward(x, k, grad_out, spec: ConvSpec = None):
    """Dispatch to the plane or depthwise backward pass by input rank."""
    if np.ndim(x) == 2:
        return conv2d_plane_backward(x, k, grad_out, spec)
    return depthwise_conv2d_backward(x, k, grad_out, spec)


def param_saving(n=3) -> float:
    """Fraction of per-channel spatial weights saved by ArConv versus an ``n x n`` kernel."""
    return 1.0 - n / (n * n)
