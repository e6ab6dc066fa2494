"""ArConvNet: a patchifying stem, inverted-residual ArConv blocks, and a dense head.

Block internals (per block, input ``x`` with ``C_in`` channels)::

    expand  : pointwise dense C_in -> E*C_in (+bias), ReLU
    spatial : stride 1 -> ArConv (shared 3-tap kernel, no bias)
              stride 2 -> 3x3 depthwise conv, stride 2 (no bias), ReLU
    project : pointwise dense E*C_in -> C_out (+bias)
    batch norm, then ``+ x`` when stride is 1

Parameters live in a flat ``{name: ndarray}`` dict so optimizers and
checkpoints treat them uniformly; batch-norm running statistics live in a
separate ``state`` dict.
"""
from dataclasses import dataclass, field, replace
from typing import List

import numpy as np

from ._validation import ShapeError, check_random_state
from .conv import _arconv_grads, correlate, correlate_backward
from .layers import (
    batch_norm,
    batch_norm_backward,
    global_avg_pool,
    global_avg_pool_backward,
    pointwise_dense,
    pointwise_dense_backward,
    relu,
    relu_backward,
    stem_backward,
    stem_forward,
)


@dataclass(frozen=True)
class BlockConfig:
    in_channels: int
    out_channels: int
    expansion: int
    stride: int = 1

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 1 and self.in_channels != self.out_channels:
            raise ValueError("stride-1 blocks are residual and need in_channels == out_channels")
        if self.expansion < 1:
            raise ValueError("expansion must be >= 1")

    @property
    def width(self):
        return self.expansion * self.in_channels


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple
    classes: int = 2
    in_channels: int = 3
    stem_channels: int = 24
    stem_kernel: int = 4
    head_width: int = 1536
    head_activation: bool = True
    kernel_size: int = 3
    input_size: int = 224

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError("classes must be >= 1")
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            if b.in_channels != prev:
                raise ValueError(f"block {i} expects {b.in_channels} channels, previous layer gives {prev}")
            prev = b.out_channels

    @property
    def feature_channels(self):
        return self.blocks[-1].out_channels if self.blocks else self.stem_channels


def _stage(n, c_in, c_out, expansion):
    blocks = []
    if c_in != c_out:
        blocks.append(BlockConfig(c_in, c_out, expansion, stride=2))
        n -= 1
    blocks.extend(BlockConfig(c_out, c_out, expansion) for _ in range(n))
    return blocks


def default_config(classes=2) -> ModelConfig:
    """The 17-block ArConvNet for 224x224x3 input.

    Stage widths 24/32/48/96 with expansions 4/8/12/16; stages B-D open with
    the stride-2 channel-changing block.
    """
    blocks = (_stage(3, 24, 24, 4) + _stage(3, 24, 32, 8)
              + _stage(8, 32, 48, 12) + _stage(3, 48, 96, 16))
    return ModelConfig(blocks=tuple(blocks), classes=classes)


def tiny_config(classes=2, input_size=32) -> ModelConfig:
    """One block per stage (stride 1 in the first, stride 2 after) at small input size."""
    blocks = (_stage(1, 24, 24, 4) + _stage(1, 24, 32, 8)
              + _stage(1, 32, 48, 12) + _stage(1, 48, 96, 16))
    return ModelConfig(blocks=tuple(blocks), classes=classes, input_size=input_size)


# ---------------------------------------------------------------------------
# shapes and parameter accounting


def shape_trace(config: ModelConfig, input_size=None):
    """List of ``(layer, input_shape, output_shape)`` for one image."""
    s = input_size or config.input_size
    rows = []
    hw = s // config.stem_kernel
    rows.append(("stem", (s, s, config.in_channels), (hw, hw, config.stem_channels)))
    for i, b in enumerate(config.blocks):
        out = -(-hw // b.stride)
        rows.append((f"block{i + 1}", (hw, hw, b.in_channels), (out, out, b.out_channels)))
        hw = out
    c = config.feature_channels
    rows.append(("head_dense", (hw, hw, c), (hw, hw, config.head_width)))
    rows.append(("global_avg_pool", (hw, hw, config.head_width), (config.head_width,)))
    rows.append(("output_dense", (config.head_width,), (config.classes,)))
    return rows


def param_shapes(config: ModelConfig):
    """Ordered ``{name: shape}`` of every trainable tensor."""
    shapes = {}
    k = config.stem_kernel
    shapes["stem.w"] = (k, k, config.in_channels, config.stem_channels)
    shapes["stem.b"] = (config.stem_channels,)
    for i, b in enumerate(config.blocks):
        p = f"blocks.{i}."
        shapes[p + "expand.w"] = (b.in_channels, b.width)
        shapes[p + "expand.b"] = (b.width,)
        if b.stride == 2:
            shapes[p + "dw.k"] = (config.kernel_size, config.kernel_size, b.width)
        else:
            shapes[p + "arconv.k"] = (config.kernel_size, b.width)
        shapes[p + "project.w"] = (b.width, b.out_channels)
        shapes[p + "project.b"] = (b.out_channels,)
        shapes[p + "bn.gamma"] = (b.out_channels,)
        shapes[p + "bn.beta"] = (b.out_channels,)
    shapes["head.w"] = (config.feature_channels, config.head_width)
    shapes["head.b"] = (config.head_width,)
    shapes["out.w"] = (config.head_width, config.classes)
    shapes["out.b"] = (config.classes,)
    return shapes


@dataclass
class ParamLedger:
    rows: List[tuple] = field(default_factory=list)  # (group, layer, count)

    @property
    def total(self):
        return sum(r[2] for r in self.rows)

    def by_group(self):
        out = {}
        for g, _, n in self.rows:
            out[g] = out.get(g, 0) + n
        return out

    def to_text(self, reference=None):
        lines = [f"{'group':<10} {'layer':<22} {'params':>10}"]
        lines += [f"{g:<10} {name:<22} {n:>10,}" for g, name, n in self.rows]
        lines.append("per group: " + ", ".join(f"{g}={n:,}" for g, n in self.by_group().items()))
        lines.append(f"total: {self.total:,}")
        if reference:
            lines.append(f"reference: {reference:,}  difference: {self.total - reference:+,} "
                         f"({(self.total - reference) / reference:+.2%})")
        return "\n".join(lines)


def _stage_name(config, i):
    # stages open at each channel change; stage A is everything before the first
    opens = [j for j, b in enumerate(config.blocks) if b.stride == 2]
    return "stage" + "ABCDEFGHIJ"[sum(1 for j in opens if j <= i)]


def count_params(config: ModelConfig, with_head=True, with_bias=True, with_bn=True) -> ParamLedger:
    """Trainable-parameter ledger.

    The backbone is everything up to and including the 1536-wide dense
    layer; ``with_head`` adds the output dense layer (pooling has no
    parameters). ``with_bias`` toggles the biases of stem and dense layers.
    """
    ledger = ParamLedger()
    for name, shape in param_shapes(config).items():
        n = int(np.prod(shape))
        layer, kind = name.rsplit(".", 1)
        if kind == "b" and not with_bias:
            continue
        if layer.endswith("bn") and not with_bn:
            continue
        if name.startswith("out."):
            if not with_head:
                continue
            group = "output"
        elif name.startswith("head."):
            group = "head_dense"
        elif name.startswith("stem."):
            group = "stem"
        else:
            group = _stage_name(config, int(name.split(".")[1]))
        ledger.rows.append((group, name, n))
    return ledger


def layer_depth(config: ModelConfig):
    """Counts of parameterized layers: ``conv_dense`` (conv/dense only) and ``with_bn``."""
    conv_dense = 1 + 3 * len(config.blocks) + 2
    return {"conv_dense": conv_dense, "with_bn": conv_dense + len(config.blocks)}


# ---------------------------------------------------------------------------
# initialization


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: ModelConfig, seed=0, dtype=np.float32):
    """Fresh parameters and batch-norm state for ``config``.

    Conv/dense weights: truncated normal with fan-in scaling; ArConv kernels
    uniform in ``[-a, a)`` with ``a = sqrt(3 / n)`` so the induced 2D kernel
    has unit expected energy; biases and BN shift zero, BN scale one.
    """
    rng = check_random_state(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("b", "beta"):
            v = np.zeros(shape)
        elif kind == "gamma":
            v = np.ones(shape)
        elif name.endswith("arconv.k"):
            a = np.sqrt(3.0 / shape[0])
            v = rng.uniform(-a, a, size=shape)
        elif name.endswith("dw.k"):
            v = _trunc_normal(rng, shape, np.sqrt(2.0 / (shape[0] * shape[1])))
        elif name == "out.w":
            v = _trunc_normal(rng, shape, np.sqrt(1.0 / shape[0]))
        else:
            fan_in = int(np.prod(shape[:-1]))
            v = _trunc_normal(rng, shape, np.sqrt(2.0 / fan_in))
        params[name] = v.astype(dtype)
    state = {}
    for i, b in enumerate(config.blocks):
        state[f"blocks.{i}.bn.mean"] = np.zeros(b.out_channels, dtype=dtype)
        state[f"blocks.{i}.bn.var"] = np.ones(b.out_channels, dtype=dtype)
    return params, state


# ---------------------------------------------------------------------------
# forward / backward


def _bn_state(state, prefix):
    return {"mean": state[prefix + "mean"], "var": state[prefix + "var"]}


def block_forward(x, params, prefix, cfg: BlockConfig, state=None, mode="infer"):
    """One ArConv block. Returns ``(y, cache)``."""
    if x.shape[-1] != cfg.in_channels:
        raise ShapeError(f"{prefix}: input has {x.shape[-1]} channels, block expects {cfg.in_channels}")
    a1 = relu(pointwise_dense(x, params[prefix + "expand.w"], params[prefix + "expand.b"]))
    if cfg.stride == 2:
        a2 = relu(correlate(a1, params[prefix + "dw.k"], stride=2))
    else:
        a2 = correlate(correlate(a1, params[prefix + "arconv.k"][:, None, :]),
                       params[prefix + "arconv.k"][None, :, :])
    h3 = pointwise_dense(a2, params[prefix + "project.w"], params[prefix + "project.b"])
    bn_state = _bn_state(state, prefix + "bn.") if state is not None else None
    y, bn_cache = batch_norm(h3, params[prefix + "bn.gamma"], params[prefix + "bn.beta"], bn_state, mode)
    if cfg.stride == 1:
        y += x
    return y, (x, a1, a2, bn_cache)


def block_backward(cache, params, prefix, cfg: BlockConfig, grad):
    """Return ``(grad_x, {param_name: grad})`` for one block."""
    x, a1, a2, bn_cache = cache
    grads = {}
    g3, grads[prefix + "bn.gamma"], grads[prefix + "bn.beta"] = batch_norm_backward(
        bn_cache, params[prefix + "bn.gamma"], grad)
    ga2, grads[prefix + "project.w"], grads[prefix + "project.b"] = pointwise_dense_backward(
        a2, params[prefix + "project.w"], g3)
    if cfg.stride == 2:
        ga1, grads[prefix + "dw.k"] = correlate_backward(
            a1, params[prefix + "dw.k"], relu_backward(a2, ga2), stride=2)
    else:
        ga1, grads[prefix + "arconv.k"] = _arconv_grads(a1, params[prefix + "arconv.k"], ga2)
    gh1 = relu_backward(a1, ga1)
    gx, grads[prefix + "expand.w"], grads[prefix + "expand.b"] = pointwise_dense_backward(
        x, params[prefix + "expand.w"], gh1)
    if cfg.stride == 1:
        gx += grad
    return gx, grads


class ArConvNet:
    """Parameters, batch-norm state and forward/backward for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, params=None, state=None, seed=0, dtype=np.float32):
        self.config = config
        if params is None or state is None:
            fresh_params, fresh_state = init_params(config, seed, dtype)
            params = fresh_params if params is None else params
            state = fresh_state if state is None else state
        self.params = params
        self.state = state
        expected = param_shapes(config)
        for name, shape in expected.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name!r}")
            if tuple(self.params[name].shape) != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return self.params["stem.w"].dtype

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def forward(self, x, mode="infer", keep_cache=True):
        """Logits ``(N, classes)`` for a batch ``(N, H, W, C_in)``; returns ``(logits, cache)``.

        With ``keep_cache=False`` the cache is None and intermediate
        activations are released as soon as possible.
        """
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
            raise ShapeError(f"stem: expected (N, H, W, {cfg.in_channels}) input, got {x.shape}")
        h, patches = stem_forward(x, p["stem.w"], p["stem.b"])
        caches = []
        for i, b in enumerate(cfg.blocks):
            h, c = block_forward(h, p, f"blocks.{i}.", b, self.state, mode)
            if keep_cache:
                caches.append(c)
        feat_in = h
        h = pointwise_dense(h, p["head.w"], p["head.b"])
        if cfg.head_activation:
            h = relu(h)
        pooled = global_avg_pool(h)
        logits = pointwise_dense(pooled, p["out.w"], p["out.b"])
        if not keep_cache:
            return logits, None
        return logits, (x.shape, patches, caches, feat_in, h, pooled)

    def backward(self, cache, grad_logits):
        """Gradients for every parameter, keyed like ``self.params``."""
        cfg, p = self.config, self.params
        x_shape, patches, caches, feat_in, h, pooled = cache
        grads = {}
        g_pooled, grads["out.w"], grads["out.b"] = pointwise_dense_backward(pooled, p["out.w"], grad_logits)
        g = global_avg_pool_backward(h.shape, g_pooled)
        if cfg.head_activation:
            g = relu_backward(h, g)
        g, grads["head.w"], grads["head.b"] = pointwise_dense_backward(feat_in, p["head.w"], g)
        for i in range(len(cfg.blocks) - 1, -1, -1):
            g, bg = block_backward(caches[i], p, f"blocks.{i}.", cfg.blocks[i], g)
            grads.update(bg)
        _, grads["stem.w"], grads["stem.b"] = stem_backward(x_shape, patches, p["stem.w"], g)
        return grads

    def predict_logits(self, x, batch_size=32):
        out = [self.forward(x[i:i + batch_size], "infer", keep_cache=False)[0]
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def with_classes(config: ModelConfig, classes: int) -> ModelConfig:
    return replace(config, classes=classes)
