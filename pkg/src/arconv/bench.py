"""Micro-benchmark: 3x3 depthwise convolution against ArConv on one fixed input."""
import hashlib
import time
from dataclasses import asdict, dataclass

import numpy as np

from .conv import arconv_forward, depthwise_conv2d, line_conv
from .tensor import make_rng, transpose_hw


def arconv_transposed(x, k):
    """ArConv in its two-pass form: filter columns, transpose, filter columns again, transpose back."""
    return transpose_hw(line_conv(transpose_hw(line_conv(x, k, axis="cols")), k, axis="cols"))


@dataclass
class BenchReport:
    iterations: int
    warmup: int
    size: tuple
    seed: int
    conv2d_total_s: float
    arconv_total_s: float
    arconv_direct_total_s: float
    conv2d_checksum: str
    arconv_checksum: str
    arconv_direct_checksum: str

    def _mean(self, total):
        return total / self.iterations if self.iterations else 0.0

    @property
    def conv2d_mean_s(self):
        return self._mean(self.conv2d_total_s)

    @property
    def arconv_mean_s(self):
        return self._mean(self.arconv_total_s)

    @property
    def ratio(self):
        """ArConv / Conv2D wall-time ratio (NaN without samples)."""
        return self.arconv_total_s / self.conv2d_total_s if self.iterations else float("nan")

    @property
    def direct_ratio(self):
        return self.arconv_direct_total_s / self.conv2d_total_s if self.iterations else float("nan")

    def as_dict(self):
        d = asdict(self)
        d.update(conv2d_mean_s=self.conv2d_mean_s, arconv_mean_s=self.arconv_mean_s,
                 ratio=self.ratio, direct_ratio=self.direct_ratio)
        return d

    def to_text(self):
        h, w, c = self.size
        return "\n".join([
            f"input {h}x{w}x{c}, {self.iterations} iterations (+{self.warmup} warm-up), seed {self.seed}",
            f"conv2d 3x3 depthwise : total {self.conv2d_total_s:.3f} s, mean {self.conv2d_mean_s * 1e6:.2f} us",
            f"arconv (transposing) : total {self.arconv_total_s:.3f} s, mean {self.arconv_mean_s * 1e6:.2f} us",
            f"arconv (direct)      : total {self.arconv_direct_total_s:.3f} s",
            f"ratio arconv/conv2d  : {self.ratio:.3f} (direct form {self.direct_ratio:.3f})",
            f"checksums            : {self.conv2d_checksum} {self.arconv_checksum} {self.arconv_direct_checksum}",
        ])


def _checksum(out):
    if out is None:
        return "none"
    return hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()[:16]


def bench_convs(iterations=100_000, size=(5, 5, 1), seed=0, warmup=100, chunk=1000) -> BenchReport:
    """Time the operators on the same seeded input, reused every iteration.

    Iterations run in interleaved chunks (operator order rotating per
    chunk) so clock drift and frequency changes hit every operator alike;
    totals are sums over chunks.
    """
    if iterations < 0 or warmup < 0 or chunk < 1:
        raise ValueError("iterations and warmup must be non-negative, chunk positive")
    h, w, c = size
    rng = make_rng(seed)
    x = rng.uniform(size=(h, w, c))
    k2 = rng.uniform(-1, 1, size=(3, 3, c))
    k1 = rng.uniform(-1, 1, size=(3, c))
    ops = [(depthwise_conv2d, k2), (arconv_transposed, k1), (arconv_forward, k1)]
    totals = [0.0] * len(ops)
    outs = [None] * len(ops)
    for fn, k in ops:
        for _ in range(warmup):
            fn(x, k)
    done, turn = 0, 0
    while done < iterations:
        n = min(chunk, iterations - done)
        for j in range(len(ops)):
            i = (j + turn) % len(ops)
            fn, k = ops[i]
            t0 = time.perf_counter()
            for _ in range(n):
                out = fn(x, k)
            totals[i] += time.perf_counter() - t0
            outs[i] = out
        done += n
        turn += 1
    return BenchReport(iterations, warmup, tuple(size), seed, *totals, *(_checksum(o) for o in outs))
