"""Fundus preprocessing: threshold mask and crop, augmentation, average merging, label files."""
import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.filters import threshold_otsu
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import FormatError, PreprocessingError, ShapeError, check_random_state
from .tensor import derive_seed

RFMID_FLAGS = 45


@dataclass
class LabeledSample:
    id: str
    disease_risk: int
    flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))
    image: np.ndarray = None
    path: str = None

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if self.disease_risk not in (0, 1) or np.any(self.flags > 1):
            raise ValueError(f"sample {self.id}: flags must be 0 or 1")

    def load(self):
        """The image as float ``(H, W, 3)`` in ``[0, 1]``, reading ``path`` if needed."""
        if self.image is None:
            if self.path is None:
                raise PreprocessingError(f"sample {self.id} has neither image nor path")
            self.image = load_image(self.path)
        return self.image


@dataclass
class MaskResult:
    mask: np.ndarray
    box: tuple  # (top, left, bottom, right), bottom/right exclusive
    threshold: float


# ---------------------------------------------------------------------------
# image I/O


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, image):
    """Write a ``[0, 1]`` float image as 8-bit PNG/PPM (format from the suffix)."""
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _as_unit_float(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
    if image.size == 0:
        raise PreprocessingError("empty image")
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return np.clip(image.astype(np.float64), 0.0, 1.0)


# ---------------------------------------------------------------------------
# mask and crop


def binarize_adaptive(image) -> MaskResult:
    """Otsu threshold on the channel-mean gray image, keeping the largest 4-connected region."""
    gray = _as_unit_float(image).mean(axis=-1)
    lo, hi = gray.min(), gray.max()
    if hi <= 0:
        raise PreprocessingError("image is entirely dark, nothing to crop")
    if lo == hi:
        t = lo - 1.0  # flat bright image: everything is foreground
    else:
        t = float(threshold_otsu(gray))
    mask = gray > t
    labels, n = ndimage.label(mask)  # default structure is 4-connected
    if n == 0:
        raise PreprocessingError("threshold left an empty mask")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    rows = np.flatnonzero(keep.any(axis=1))
    cols = np.flatnonzero(keep.any(axis=0))
    box = (int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1)
    return MaskResult(keep, box, float(t))


def resize_bilinear(image, out_h, out_w):
    """Bilinear resampling with pixel centers at half-integers, edges clamped."""
    h, w = image.shape[:2]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    r0, r1, rw = axis_weights(h, out_h)
    c0, c1, cw = axis_weights(w, out_w)
    tmp = image[r0] * (1 - rw)[:, None, None] + image[r1] * rw[:, None, None]
    return tmp[:, c0] * (1 - cw)[None, :, None] + tmp[:, c1] * cw[None, :, None]


def crop_resize(image, box, target=224, margin=0.02):
    """Crop ``box`` grown by ``margin`` (fraction of box size, clamped to the image) and resize."""
    img = _as_unit_float(image)
    h, w = img.shape[:2]
    top, left, bottom, right = (int(v) for v in box)
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise PreprocessingError(f"degenerate or out-of-bounds box {box} for {h}x{w} image")
    dy = int(round(margin * (bottom - top)))
    dx = int(round(margin * (right - left)))
    top, bottom = max(0, top - dy), min(h, bottom + dy)
    left, right = max(0, left - dx), min(w, right + dx)
    out = resize_bilinear(img[top:bottom, left:right], target, target)
    return np.clip(out, 0.0, 1.0)


def box_iou(a, b):
    inter_h = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    inter_w = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = inter_h * inter_w
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])  # noqa: E731
    return inter / (area(a) + area(b) - inter)


class FundusCropper(TransformerMixin, BaseEstimator):
    """Mask-and-crop transformer; ``transform`` maps a sequence of images to ``(N, t, t, 3)``."""

    def __init__(self, target=224, margin=0.02):
        self.target = target
        self.margin = margin

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = np.empty((len(X), self.target, self.target, 3))
        for i, img in enumerate(X):
            out[i] = crop_resize(img, binarize_adaptive(img).box, self.target, self.margin)
        return out


def preprocess_directory(in_dir, out_dir, target=224, margin=0.02):
    """Mask and crop every PNG/PPM/JPEG in ``in_dir`` into ``out_dir`` as PNG; returns box rows."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in sorted(in_dir.iterdir()):
        if p.suffix.lower() not in (".png", ".ppm", ".jpg", ".jpeg"):
            continue
        img = load_image(p)
        res = binarize_adaptive(img)
        save_image(out_dir / (p.stem + ".png"), crop_resize(img, res.box, target, margin))
        rows.append({"file": p.name, "top": res.box[0], "left": res.box[1], "bottom": res.box[2],
                     "right": res.box[3], "threshold": round(res.threshold, 6)})
    return rows


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    rotation: tuple = (-15.0, 15.0)  # degrees
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    color_shift: tuple = (-0.05, 0.05)
    zoom: tuple = (1.0, 1.2)

    def __post_init__(self):
        for name in ("rotation", "brightness", "contrast", "color_shift", "zoom"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: {(lo, hi)}")
        if self.zoom[0] <= 0 or self.brightness[0] < 0 or self.contrast[0] < 0:
            raise ValueError("zoom must be positive, brightness/contrast non-negative")

    @classmethod
    def identity(cls):
        return cls((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0))


def _draw(rng, lo_hi):
    lo, hi = lo_hi
    # always consume one draw so the stream does not depend on which ranges are degenerate
    u = rng.random()
    return lo + (hi - lo) * u


def rotate_zoom(image, degrees, zoom=1.0):
    """Rotate counter-clockwise (as displayed) about the center and zoom in; zero fill outside."""
    if degrees == 0 and zoom == 1:
        return image.copy()
    h, w = image.shape[:2]
    t = np.deg2rad(degrees)
    # output (r, c) samples input center + M (o - center); rows point down, so
    # a counter-clockwise turn on screen is a clockwise one in (r, c)
    m = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]]) / zoom
    m = np.round(m, 14)  # exact right angles land on the grid
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - m @ center
    out = np.empty_like(image)
    for ch in range(image.shape[-1]):
        out[..., ch] = ndimage.affine_transform(image[..., ch], m, offset=offset, order=1,
                                                mode="constant", cval=0.0)
    return out


def augment_one(image, rng, policy: AugmentPolicy = AugmentPolicy()):
    """Rotation, zoom, brightness, contrast (about the image mean) and per-channel shift; clamped to [0, 1]."""
    rng = check_random_state(rng)
    img = _as_unit_float(image)
    angle = _draw(rng, policy.rotation)
    zoom = _draw(rng, policy.zoom)
    bright = _draw(rng, policy.brightness)
    contrast = _draw(rng, policy.contrast)
    shift = np.array([_draw(rng, policy.color_shift) for _ in range(3)])
    out = rotate_zoom(img, angle, zoom)
    if bright != 1:
        out = out * bright
    if contrast != 1:
        mean = out.mean()
        out = (out - mean) * contrast + mean
    if np.any(shift != 0):
        out = out + shift
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# merging and dataset materialization


def merge_average(a: LabeledSample, b: LabeledSample, id=None) -> LabeledSample:
    """Pixel-wise mean of two images; labels and disease risk are OR-ed."""
    ia, ib = a.load(), b.load()
    if ia.shape != ib.shape:
        raise ShapeError(f"cannot merge {ia.shape} with {ib.shape}")
    if a.flags.shape != b.flags.shape:
        raise ShapeError("label vectors differ in length")
    return LabeledSample(
        id=id or f"{a.id}+{b.id}",
        disease_risk=int(a.disease_risk or b.disease_risk),
        flags=np.maximum(a.flags, b.flags),
        image=(ia + ib) / 2.0,
    )


def _pick_pair(rng, samples):
    # prefer pairing a diseased sample with any other one
    sick = [i for i, s in enumerate(samples) if s.disease_risk]
    i = int(rng.choice(sick)) if sick else int(rng.integers(len(samples)))
    j = int(rng.integers(len(samples) - 1))
    return i, j + (j >= i)


def materialize_dataset(samples, out_dir, multiplier=1, merge_fraction=0.0, seed=0,
                        policy: AugmentPolicy = AugmentPolicy(), fmt="png"):
    """One-time dataset expansion written to ``out_dir``; returns the manifest rows.

    Each sample keeps its original plus ``multiplier - 1`` augmented copies.
    ``merge_fraction`` of that count is added again as averages of two
    independently augmented samples. Every row draws from its own seed,
    derived from ``seed`` and the row index.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to materialize")
    if multiplier < 1 or not 0 <= merge_fraction:
        raise ValueError("multiplier must be >= 1 and merge_fraction >= 0")
    if len(samples) < 2 and merge_fraction > 0:
        raise ValueError("merging needs at least two samples")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out_dir}: {e}") from e
    width = len(samples[0].flags)
    rows = []

    def emit(sample, sources, row_seed):
        name = f"{sample.id}.{fmt}"
        save_image(out_dir / name, sample.load())
        rows.append({"id": sample.id, "source_ids": "+".join(sources), "seed": row_seed,
                     "disease_risk": sample.disease_risk,
                     **{f"flag_{k + 1}": int(v) for k, v in enumerate(sample.flags)}})

    for s in samples:
        for copy in range(multiplier):
            row_seed = derive_seed(seed, len(rows))
            if copy == 0:
                out = replace(s, image=s.load())
            else:
                out = replace(s, id=f"{s.id}_aug{copy}",
                              image=augment_one(s.load(), np.random.default_rng(row_seed), policy))
            emit(out, [s.id], row_seed)
    n_merge = int(round(merge_fraction * len(rows)))
    for m in range(n_merge):
        row_seed = derive_seed(seed, len(rows))
        rng = np.random.default_rng(row_seed)
        i, j = _pick_pair(rng, samples)
        a = replace(samples[i], image=augment_one(samples[i].load(), rng, policy))
        b = replace(samples[j], image=augment_one(samples[j].load(), rng, policy))
        emit(merge_average(a, b, id=f"merge{m}"), [samples[i].id, samples[j].id], row_seed)

    csv_path = out_dir / "manifest.csv"
    with open(csv_path, "w", newline="") as f:
        fields = ["id", "source_ids", "seed", "disease_risk"] + [f"flag_{k + 1}" for k in range(width)]
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------------------
# label files


def _parse_flag(value, line, column):
    v = value.strip()
    if v not in ("0", "1"):
        raise FormatError(f"line {line}: column {column!r} must be 0 or 1, got {value!r}")
    return int(v)


def load_labels_csv(path, schema="rfmid", image_dir=None, image_ext=".png"):
    """Parse a label file into :class:`LabeledSample` rows (images are loaded lazily).

    ``rfmid``: id, Disease_Risk, then 45 disease flags. ``generic_binary``:
    id and one 0/1 label column.
    """
    if schema not in ("rfmid", "generic_binary"):
        raise ValueError(f"unknown schema {schema!r}")
    want = RFMID_FLAGS + 2 if schema == "rfmid" else 2
    samples = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise FormatError("line 1: missing header row")
        if len(header) != want:
            raise FormatError(f"line 1: {schema} schema needs {want} columns, header has {len(header)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != want:
                raise FormatError(f"line {line}: expected {want} fields, got {len(row)}")
            sid = row[0].strip()
            if not sid:
                raise FormatError(f"line {line}: empty id")
            risk = _parse_flag(row[1], line, header[1])
            flags = [_parse_flag(v, line, header[k + 2]) for k, v in enumerate(row[2:])]
            img_path = os.path.join(image_dir, sid + image_ext) if image_dir else None
            samples.append(LabeledSample(sid, risk, np.array(flags, dtype=np.uint8), path=img_path))
    return samples
