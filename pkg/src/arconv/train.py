"""Losses, the training loop, support-weighted metrics, and checkpoints."""
import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._validation import FormatError, ShapeError, check_random_state
from .model import ArConvNet, BlockConfig, ModelConfig
from .optim import OptimState, adam_step


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_logits(logits, labels):
    """Mean cross entropy over the batch from raw logits; returns ``(loss, grad)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(log_norm - z[np.arange(n), labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def mse_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSSES = {"ce": softmax_ce_logits, "mse": mse_loss}


@dataclass
class TrainResult:
    loss_curve: list
    optim_state: OptimState
    steps: int = 0


def train_epochs(model: ArConvNet, X, y, epochs, batch_size=32, seed=0, lr=1e-4, loss="ce",
                 optim_state=None, callback=None) -> TrainResult:
    """Mini-batch Adam training with a seeded shuffle each epoch.

    ``y`` holds class indices for ``loss='ce'`` and target vectors of width
    ``classes`` for ``loss='mse'``. Batch norm runs in train mode. The loss
    curve stores one sample-weighted mean loss per epoch.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("training set is empty")
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} images but {len(y)} labels")
    loss_fn = LOSSES[loss]
    rng = check_random_state(seed)
    state = optim_state or OptimState(lr=lr)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch_size):
            idx = np.sort(order[start:start + batch_size])
            xb = X[idx].astype(model.dtype, copy=False)
            yb = y[idx]
            logits, cache = model.forward(xb, mode="train")
            value, grad = loss_fn(logits, yb.astype(model.dtype) if loss == "mse" else yb)
            grads = model.backward(cache, grad.astype(model.dtype, copy=False))
            del cache
            adam_step(model.params, grads, state)
            total += value * len(idx)
        curve.append(total / len(X))
        if callback is not None:
            callback(epoch, curve[-1])
    return TrainResult(curve, state, state.step)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows true class, columns predicted
    weighted_accuracy: float
    weighted_precision: float
    n_samples: int
    per_class: list = field(default_factory=list)

    def to_rows(self):
        rows = [{"class": c["class"], "support": c["support"], "recall": c["recall"],
                 "precision": c["precision"]} for c in self.per_class]
        rows.append({"class": "weighted", "support": self.n_samples,
                     "recall": self.weighted_accuracy, "precision": self.weighted_precision})
        return rows


def metrics_from_predictions(y_true, y_pred, classes=None) -> MetricsReport:
    """Support-weighted recall ("weighted accuracy") and precision.

    A class with no predicted members contributes precision 0.
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if classes is None:
        classes = int(max(y_true.max(), y_pred.max())) + 1
    conf = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    support = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    tp = np.diag(conf)
    recall = np.divide(tp, support, out=np.zeros(classes), where=support > 0)
    precision = np.divide(tp, predicted, out=np.zeros(classes), where=predicted > 0)
    n = int(support.sum())
    per_class = [{"class": c, "support": int(support[c]), "recall": float(recall[c]),
                  "precision": float(precision[c])} for c in range(classes)]
    return MetricsReport(conf, float(support @ recall / n), float(support @ precision / n), n, per_class)


def evaluate(model: ArConvNet, X, y, batch_size=32) -> MetricsReport:
    X = np.asarray(X)
    if len(X) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = np.argmax(model.predict_logits(X, batch_size), axis=1)
    return metrics_from_predictions(y, pred, model.config.classes)


def write_loss_curve(curve, path, config=None):
    with open(path, "w", newline="") as f:
        if config is not None:
            f.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i + 1, repr(float(v))])


def write_metrics(report: MetricsReport, path, config=None):
    with open(path, "w", newline="") as f:
        if config is not None:
            f.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        w = csv.DictWriter(f, fieldnames=["class", "support", "recall", "precision"], lineterminator="\n")
        w.writeheader()
        w.writerows(report.to_rows())


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little endian):
#   b"ARCV" | u16 version | u8 dtype tag | u32 meta length | meta JSON
#   u32 tensor count | per tensor: u16 name length, name (utf-8), u8 rank,
#   u32 extent * rank, raw values

MAGIC = b"ARCV"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def config_to_dict(config: ModelConfig):
    d = {k: getattr(config, k) for k in ("classes", "in_channels", "stem_channels", "stem_kernel",
                                         "head_width", "head_activation", "kernel_size", "input_size")}
    d["blocks"] = [[b.in_channels, b.out_channels, b.expansion, b.stride] for b in config.blocks]
    return d


def config_from_dict(d):
    d = dict(d)
    blocks = tuple(BlockConfig(*b) for b in d.pop("blocks"))
    return ModelConfig(blocks=blocks, **d)


def save_checkpoint(model: ArConvNet, path, optim_state: OptimState = None, extra=None):
    """Write parameters, batch-norm state and (optionally) Adam moments.

    ``path`` may also be a binary file object. Returns the byte count.
    """
    dtype = model.dtype
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"bn/{k}": v for k, v in model.state.items()})
    meta = {"config": config_to_dict(model.config)}
    if optim_state is not None:
        meta["optim"] = {"lr": optim_state.lr, "beta1": optim_state.beta1, "beta2": optim_state.beta2,
                         "eps": optim_state.eps, "step": optim_state.step}
        tensors.update({f"adam.m/{k}": v for k, v in optim_state.m.items()})
        tensors.update({f"adam.v/{k}": v for k, v in optim_state.v.items()})
    if extra:
        meta["extra"] = extra
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    le = DTYPE_TAGS[TAG_OF[dtype]]
    own = not hasattr(path, "write")
    f = open(path, "wb") if own else path
    start = f.tell()
    try:
        f.write(MAGIC + struct.pack("<HB", VERSION, TAG_OF[dtype]))
        f.write(struct.pack("<I", len(meta_bytes)) + meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=le).tobytes())
        return f.tell() - start
    finally:
        if own:
            f.close()


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint; returns ``(model, optim_state_or_None, extra)``.

    Nothing is returned unless the whole file parses.
    """
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not an ArConvNet checkpoint", 0)
    version, tag = r.unpack("<HB", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}", 6)
    dtype = DTYPE_TAGS[tag]
    (meta_len,) = r.unpack("<I", "metadata length")
    at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
        config = config_from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad metadata: {e}", at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        (rank,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{rank}I", f"extents of {name}")
        raw = r.take(int(np.prod(shape)) * dtype.itemsize, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
    state = {k[3:]: v for k, v in tensors.items() if k.startswith("bn/")}
    try:
        model = ArConvNet(config, params=params, state=state)
    except ShapeError as e:
        raise FormatError(f"tensor table does not match config: {e}") from None
    optim = None
    if "optim" in meta:
        o = meta["optim"]
        optim = OptimState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                           m={k[7:]: v for k, v in tensors.items() if k.startswith("adam.m/")},
                           v={k[7:]: v for k, v in tensors.items() if k.startswith("adam.v/")})
    return model, optim, meta.get("extra")
