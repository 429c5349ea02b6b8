"""Dataset ingestion and preprocessing.

Supports the MNIST IDX container (big-endian headers, u8 payload),
deterministic subsetting, two featurizations (raw real-to-complex
inclusion and the centered 2D DFT), and a synthetic separable corpus for
fast tests.  Pixels are scaled to [0,1] by /255 and nothing else.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .ctensor import CTensor, RTensor, dft2d_centered

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX container."""


class BadMagicError(IdxError):
    def __init__(self, path, got, want):
        super().__init__(f"{path}: magic 0x{got:08x}, expected 0x{want:08x}")


class TruncatedError(IdxError):
    def __init__(self, path, need, have):
        super().__init__(f"{path}: needs {need} payload bytes, has {have}")


class CountMismatchError(IdxError):
    def __init__(self, n_images, n_labels):
        super().__init__(f"{n_images} images but {n_labels} labels")


@dataclass
class Dataset:
    images: RTensor  # [N, H, W], values in [0, 1]
    labels: np.ndarray  # [N] integers
    split: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label count mismatch")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("negative label")

    def __len__(self):
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path, raw: bytes, magic: int, ndim: int):
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise TruncatedError(path, header, len(raw))
    fields = struct.unpack(f">{1 + ndim}i", raw[:header])
    if fields[0] != magic:
        raise BadMagicError(path, fields[0], magic)
    dims = fields[1:]
    need = int(np.prod(dims))
    body = raw[header:]
    if len(body) < need:
        raise TruncatedError(path, need, len(body))
    if len(body) > need:
        raise IdxError(f"{path}: {len(body) - need} trailing bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split: str = "") -> Dataset:
    """Read an MNIST-format image/label file pair (.gz accepted)."""
    img = _parse_idx(images_path, _read_bytes(images_path), IMAGES_MAGIC, 3)
    lab = _parse_idx(labels_path, _read_bytes(labels_path), LABELS_MAGIC, 1)
    if img.shape[0] != lab.shape[0]:
        raise CountMismatchError(img.shape[0], lab.shape[0])
    return Dataset(RTensor(img.astype(np.float64) / 255.0),
                   lab.astype(np.int64), split)


def save_idx(ds: Dataset, images_path, labels_path):
    """Inverse of load_idx; loading then saving is byte-identical."""
    img = np.rint(ds.images.data * 255.0).astype(np.uint8)
    n, h, w = img.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4i", IMAGES_MAGIC, n, h, w))
        f.write(img.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2i", LABELS_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Fixed random sample without replacement; same seed, same subset."""
    total = len(ds)
    if n > total:
        raise ValueError(f"subset of {n} from {total} examples")
    idx = np.random.default_rng(seed).permutation(total)[:n]
    return Dataset(RTensor(ds.images.data[idx].copy()),
                   ds.labels[idx].copy(), ds.split)


def featurize(ds: Dataset, mode: str) -> CTensor:
    """raw: inclusion into the complex plane (zero imaginary part);
    fft: centered 2D DFT per image."""
    if mode == "raw":
        return CTensor(ds.images.data.copy(),
                       np.zeros_like(ds.images.data))
    if mode == "fft":
        return dft2d_centered(ds.images)
    raise ValueError(f"unknown feature mode {mode!r}")


def synthetic_gaussians(n_per_class: int, n_classes: int, dim: int,
                        seed: int) -> Dataset:
    """Well-separated Gaussian blobs, linearly separable by construction.

    Class means sit on a line with 10-sigma spacing; coordinates are
    affinely squeezed into [0,1] (6-sigma margin, then clipped).  Images
    come out with shape [N, 1, dim].
    """
    if n_per_class < 1 or n_classes < 1 or dim < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    spacing = 1.0
    sig = spacing / 10.0
    n = n_per_class * n_classes
    x = rng.standard_normal((n, dim)) * sig
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x[:, 0] += labels * spacing
    lo = np.full(dim, -6.0 * sig)
    hi = np.full(dim, 6.0 * sig)
    hi[0] += (n_classes - 1) * spacing
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    perm = rng.permutation(n)
    return Dataset(RTensor(x[perm].reshape(n, 1, dim)),
                   labels[perm].astype(np.int64), "synthetic")


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling with corner-aligned grids."""
    h, w = img.shape[-2:]
    ry = np.linspace(0.0, h - 1.0, out_h)
    rx = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.clip(np.floor(ry).astype(int), 0, h - 2) if h > 1 else np.zeros(out_h, int)
    x0 = np.clip(np.floor(rx).astype(int), 0, w - 2) if w > 1 else np.zeros(out_w, int)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], np.minimum(x0 + 1, w - 1)[None, :]]
    c = img[..., np.minimum(y0 + 1, h - 1)[:, None], x0[None, :]]
    d = img[..., np.minimum(y0 + 1, h - 1)[:, None],
            np.minimum(x0 + 1, w - 1)[None, :]]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def write_digits_corpus(out_dir) -> dict:
    """Materialize a small MNIST-format corpus in out_dir.

    Uses the scikit-learn handwritten-digits set (1797 8x8 images).
    Mirrors the MNIST geometry: each glyph is upscaled bilinearly into a
    20x20 box centered in a black 28x28 field, so the frame keeps the
    dead border real MNIST digits have.  Split 1500/297 by a fixed
    permutation.  Returns the four file paths keyed train_images,
    train_labels, test_images, test_labels.  Import of sklearn is lazy so
    the package itself does not depend on it.
    """
    import os

    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = raw.images.astype(np.float64) / 16.0
    core = np.clip(_bilinear_resize(imgs, 20, 20), 0.0, 1.0)
    big = np.zeros((core.shape[0], 28, 28))
    big[:, 4:24, 4:24] = core
    labels = raw.target.astype(np.int64)
    perm = np.random.default_rng(0).permutation(len(labels))
    tr, te = perm[:1500], perm[1500:]
    paths = {
        "train_images": os.path.join(out_dir, "train-images-idx3-ubyte"),
        "train_labels": os.path.join(out_dir, "train-labels-idx1-ubyte"),
        "test_images": os.path.join(out_dir, "t10k-images-idx3-ubyte"),
        "test_labels": os.path.join(out_dir, "t10k-labels-idx1-ubyte"),
    }
    os.makedirs(out_dir, exist_ok=True)
    save_idx(Dataset(RTensor(big[tr]), labels[tr], "train"),
             paths["train_images"], paths["train_labels"])
    save_idx(Dataset(RTensor(big[te]), labels[te], "test"),
             paths["test_images"], paths["test_labels"])
    return paths
