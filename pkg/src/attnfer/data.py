"""Dataset loading and the resize/normalise preprocessing contract.

Sources: the FER2013 CSV (``emotion,pixels,Usage``; 48x48 grayscale), binary
PGM (P5, maxval <= 255) directories laid out as ``root/<class>/<file>.pgm``,
and a seeded synthetic generator.  Images are float64 in [0, 1], N,C,H,W.

Other formats convert to P5 in one line, e.g. with Pillow:
``Image.open(src).convert("L").save(dst)`` where ``dst`` ends in ``.pgm``.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDataset, ParseError
from .rng import Stream

FER_CLASSES = ("angry", "disgust", "fear", "happy", "sad", "surprise", "neutral")
FER_SIDE = 48
FER_USAGES = ("Training", "PublicTest", "PrivateTest")


@dataclass
class DatasetBatch:
    images: np.ndarray
    labels: np.ndarray
    class_names: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.labels) != self.images.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for images of shape {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside class_names")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return DatasetBatch(self.images[idx], self.labels[idx], self.class_names)


# ---------------------------------------------------------------------------
# FER2013 CSV
# ---------------------------------------------------------------------------


def load_fer2013_csv(path, usage="All"):
    """Load rows whose ``Usage`` matches ``usage`` (``"All"`` keeps every row).

    Row numbers in errors count data rows from 1 (the header is row 0).
    """
    images, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["emotion", "pixels", "Usage"]:
            raise ParseError("expected header 'emotion,pixels,Usage'", row=0, path=path)
        for row_no, row in enumerate(reader, 1):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", row=row_no, path=path)
            emotion, pixels, row_usage = (f.strip() for f in row)
            try:
                label = int(emotion)
            except ValueError:
                raise ParseError(f"non-integer emotion {emotion!r}", row=row_no, path=path) from None
            if not 0 <= label < len(FER_CLASSES):
                raise ParseError(f"emotion {label} outside [0, 6]", row=row_no, path=path)
            tokens = pixels.split()
            if len(tokens) != FER_SIDE * FER_SIDE:
                raise ParseError(f"expected {FER_SIDE * FER_SIDE} pixels, got {len(tokens)}", row=row_no, path=path)
            try:
                values = np.array([int(t) for t in tokens], dtype=np.int64)
            except ValueError:
                raise ParseError("non-integer pixel value", row=row_no, path=path) from None
            if values.min() < 0 or values.max() > 255:
                raise ParseError("pixel value outside [0, 255]", row=row_no, path=path)
            if usage != "All" and row_usage != usage:
                continue
            images.append(values)
            labels.append(label)
    if images:
        arr = np.stack(images).reshape(-1, 1, FER_SIDE, FER_SIDE) / 255.0
    else:
        arr = np.zeros((0, 1, FER_SIDE, FER_SIDE))
    return DatasetBatch(arr, np.array(labels, dtype=np.int64), FER_CLASSES)


def write_fer2013_csv(batch, path, usage="Training"):
    """Inverse of :func:`load_fer2013_csv` for single-channel 48x48 batches."""
    if batch.images.shape[1:] != (1, FER_SIDE, FER_SIDE):
        raise ValueError(f"FER2013 rows are 1x48x48, got {batch.images.shape[1:]}")
    usages = [usage] * len(batch) if isinstance(usage, str) else list(usage)
    pixels = np.rint(batch.images.reshape(len(batch), -1) * 255.0).astype(np.int64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["emotion", "pixels", "Usage"])
        for label, px, u in zip(batch.labels, pixels, usages):
            w.writerow([int(label), " ".join(map(str, px)), u])


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def read_pgm(path):
    """Read a binary (P5) PGM with maxval <= 255 into an (H, W) array in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header", path=path)
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ParseError(f"unsupported PGM magic {tokens[0]!r}; only binary P5 is supported", path=path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ParseError("non-integer PGM header field", path=path) from None
    if width < 1 or height < 1:
        raise ParseError("PGM dimensions must be positive", path=path)
    if not 1 <= maxval <= 255:
        raise ParseError(f"maxval {maxval} unsupported (must be 1..255)", path=path)
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise ParseError("truncated PGM raster", path=path)
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64)
    if img.max() > maxval:
        raise ParseError("pixel above maxval", path=path)
    return img / maxval


def write_pgm(path, image):
    """Write an (H, W) array in [0, 1] as P5 with maxval 255."""
    img = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def load_pgm_dir(root, target=(80, 80), channels=1):
    """Stack every ``root/<class>/*.pgm``; class index follows sorted directory names.

    Images are resized to ``target`` with :func:`preprocess` (``None`` keeps native
    sizes, which must then agree).
    """
    if not os.path.isdir(root):
        raise EmptyDataset(f"{root} is not a directory")
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    images, labels = [], []
    for ci, cls in enumerate(classes):
        folder = os.path.join(root, cls)
        for fname in sorted(os.listdir(folder)):
            if not fname.lower().endswith(".pgm"):
                continue
            img = read_pgm(os.path.join(folder, fname))[None, None]
            if target is not None:
                img = preprocess(img, target, 1)
            images.append(img[0])
            labels.append(ci)
    if not images:
        raise EmptyDataset(f"no .pgm images under {root}")
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ParseError(f"images differ in size {sorted(shapes)}; pass a target size", path=root)
    arr = np.stack(images)
    if channels == 3:
        arr = np.repeat(arr, 3, axis=1)
    return DatasetBatch(arr, np.array(labels), tuple(classes))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _resize_axis(n_in, n_out):
    # align_corners=False: src = (dst + 0.5) * (n_in / n_out) - 0.5, clamped to [0, n_in - 1]
    dst = np.arange(n_out, dtype=np.float64)
    src = np.clip((dst + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def preprocess(images, target=(80, 80), channels=3):
    """Bilinear resize to ``target`` and replicate grayscale to ``channels``.

    Sample points follow ``src = (dst + 0.5) * scale - 0.5`` with
    ``scale = in / out``, clamped to the image.  Resizing to the current size is
    an exact copy.
    """
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected N,C,H,W images, got shape {x.shape}")
    th, tw = target
    h, w = x.shape[2:]
    if (h, w) == (th, tw):
        out = x.copy()
    else:
        r0, r1, fr = _resize_axis(h, th)
        c0, c1, fc = _resize_axis(w, tw)
        rows = x[:, :, r0, :] * (1.0 - fr)[:, None] + x[:, :, r1, :] * fr[:, None]
        out = rows[:, :, :, c0] * (1.0 - fc) + rows[:, :, :, c1] * fc
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    if out.shape[1] == 1 and channels == 3:
        out = np.repeat(out, 3, axis=1)
    elif out.shape[1] != channels:
        raise ValueError(f"cannot map {out.shape[1]} channels to {channels}")
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def class_centers(classes, hw):
    """Blob centres spaced evenly on a circle of radius 0.3 * min(H, W) around the image centre."""
    h, w = hw
    ang = 2.0 * np.pi * np.arange(classes) / classes
    rad = 0.3 * min(h, w)
    return np.stack([(h - 1) / 2 + rad * np.sin(ang), (w - 1) / 2 + rad * np.cos(ang)], axis=1)


def synthetic_dataset(classes=7, per_class=10, hw=(32, 32), seed=0, noise=0.1, channels=1):
    """Class ``k`` is a Gaussian blob at its own fixed centre plus N(0, noise^2) pixel noise, clipped to [0, 1]."""
    if classes < 2:
        raise ValueError("classes must be >= 2")
    h, w = hw
    sigma = 0.12 * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    templates = np.stack(
        [np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)) for cy, cx in class_centers(classes, hw)]
    )
    labels = np.repeat(np.arange(classes), per_class)
    n = len(labels)
    eps = Stream(seed, 7).normal(n * h * w).reshape(n, 1, h, w)
    images = np.clip(templates[labels][:, None] + noise * eps, 0.0, 1.0)
    if channels == 3:
        images = np.repeat(images, 3, axis=1)
    return DatasetBatch(images, labels, tuple(f"class{k}" for k in range(classes)))
