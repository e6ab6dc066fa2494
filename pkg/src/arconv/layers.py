"""Layer primitives with explicit backward passes.

Activation tensors are channel-last, ``(..., C)``. Every ``*_backward``
takes the upstream gradient and whatever its forward returned as cache.
"""
import numpy as np

from ._validation import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def relu(x):
    return np.maximum(x, 0)


def relu_backward(y, grad):
    """Gate ``grad`` by the forward output ``y`` (``y > 0`` iff ``x > 0``)."""
    return grad * (y > 0)


def pointwise_dense(x, w, b=None):
    """Per-position affine map across channels: ``(..., Cin) @ (Cin, Cout) + b``.

    Works for images, batches, and plain ``(N, Cin)`` feature rows alike.
    """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input has {x.shape[-1]} channels, weight expects {w.shape[0]}")
    out = np.matmul(x.reshape(-1, w.shape[0]), w).reshape(x.shape[:-1] + (w.shape[1],))
    if b is not None:
        out += b
    return out


dense = pointwise_dense


def pointwise_dense_backward(x, w, grad, with_bias=True):
    """Return ``(grad_x, grad_w, grad_b)``; ``grad_b`` is None without bias."""
    g2 = grad.reshape(-1, w.shape[1])
    x2 = x.reshape(-1, w.shape[0])
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0) if with_bias else None
    grad_x = (g2 @ w.T).reshape(x.shape)
    return grad_x, grad_w, grad_b


def global_avg_pool(x):
    """Mean over the two spatial axes of ``(..., H, W, C)``."""
    return x.mean(axis=(-3, -2))


def global_avg_pool_backward(shape, grad):
    h, w = shape[-3], shape[-2]
    out = np.empty(shape, dtype=grad.dtype)
    out[...] = (grad / (h * w))[..., None, None, :]
    return out


def batch_norm(x, gamma, beta, state=None, mode="train", eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalization over every axis but the last.

    ``state`` is a dict with ``mean`` and ``var`` arrays; train mode reads
    batch statistics and updates ``state`` in place, infer mode reads
    ``state``. Returns ``(y, cache)``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"scale/shift must have length {c}")
    if x.size == 0:
        raise ValueError("batch_norm needs a non-empty batch")
    if mode == "train":
        x2 = x.reshape(-1, c)
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        if state is not None:
            state["mean"] *= momentum
            state["mean"] += (1 - momentum) * mean
            state["var"] *= momentum
            state["var"] += (1 - momentum) * var
    elif mode == "infer":
        if state is None:
            raise ValueError("infer mode needs running statistics")
        mean, var = state["mean"], state["var"]
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - mean.astype(x.dtype, copy=False)) * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, mode)


def batch_norm_backward(cache, gamma, grad):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, mode = cache
    c = grad.shape[-1]
    g2 = grad.reshape(-1, c)
    xh2 = xhat.reshape(-1, c)
    grad_beta = g2.sum(axis=0)
    grad_gamma = np.einsum("pc,pc->c", g2, xh2)
    if mode == "infer":
        return grad * (gamma * inv_std), grad_gamma, grad_beta
    m = g2.shape[0]
    scale = gamma * inv_std
    grad_x = (grad - (grad_beta / m) - xhat * (grad_gamma / m)) * scale
    return grad_x, grad_gamma, grad_beta


def patchify(x, size):
    """Split ``(N, H, W, C)`` into non-overlapping ``size x size`` patches.

    Returns ``(N, H/size, W/size, size*size*C)`` with patch entries ordered
    ``(row, col, channel)``; trailing rows/columns that do not fill a patch
    are dropped, as in a valid-padded strided convolution.
    """
    n, h, w, c = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} smaller than patch size {size}")
    x = x[:, :ho * size, :wo * size]
    return (x.reshape(n, ho, size, wo, size, c).transpose(0, 1, 3, 2, 4, 5)
            .reshape(n, ho, wo, size * size * c))


def unpatchify(p, size, shape):
    n, h, w, c = shape
    ho, wo = p.shape[1], p.shape[2]
    out = np.zeros(shape, dtype=p.dtype)
    out[:, :ho * size, :wo * size] = (p.reshape(n, ho, wo, size, size, c).transpose(0, 1, 3, 2, 4, 5)
                                      .reshape(n, ho * size, wo * size, c))
    return out


def stem_forward(x, w, b):
    """Strided ``k x k`` convolution with stride ``k``; ``w`` is ``(k, k, Cin, Cout)``."""
    k = w.shape[0]
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"stem expects {w.shape[2]} input channels, got {x.shape[-1]}")
    p = patchify(x, k)
    return pointwise_dense(p, w.reshape(-1, w.shape[-1]), b), p


def stem_backward(x_shape, patches, w, grad, need_x=False):
    k = w.shape[0]
    gp, gw, gb = pointwise_dense_backward(patches, w.reshape(-1, w.shape[-1]), grad)
    gx = unpatchify(gp, k, x_shape) if need_x else None
    return gx, gw.reshape(w.shape), gb
