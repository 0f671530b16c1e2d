"""Datasets, augmentation and offset-label episode generation.

Images are stored as 20x20 float arrays in [0, 1] with ink = 1. Episode
streams are pure functions of ``(library, seed, episode index)``: episode
``i`` draws from ``SeedSequence(seed, spawn_key=(i,))``.
"""
from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

IMAGE_SIZE = 20
OMNIGLOT_CLASSES = 1623
OMNIGLOT_SAMPLES = 20
MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
LIBRARY_MAGIC = b"FLMNLIB1"
IMAGE_SUFFIXES = {".png", ".bmp", ".gif", ".jpg", ".jpeg", ".tif", ".tiff", ".pgm"}


class DatasetError(Exception):
    pass


@dataclass
class ClassLibrary:
    """Classes of small grayscale images.

    ``images[i]`` holds every sample of class ``ids[i]`` as an
    ``(n, 20, 20)`` array. ``native`` optionally keeps the full-resolution
    samples (uint8, ink = 255) for augmentation.
    """

    ids: list[int]
    images: list[np.ndarray]
    native: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.images):
            raise ValueError("ids and images differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("class ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def min_samples(self) -> int:
        return min((len(x) for x in self.images), default=0)

    def subset(self, indices: Sequence[int]) -> "ClassLibrary":
        native = None if self.native is None else [self.native[i] for i in indices]
        return ClassLibrary([self.ids[i] for i in indices], [self.images[i] for i in indices], native)


# --------------------------------------------------------------------------
# image transforms


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row j averages input cells overlapping [j, j+1) * n_in / n_out."""
    scale = n_in / n_out
    A = np.zeros((n_out, n_in))
    for j in range(n_out):
        lo, hi = j * scale, (j + 1) * scale
        for i in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            A[j, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return A / scale


def downscale(image: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Area-interpolated resize of a 2-D image to ``size x size``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    if (h, w) == (size, size):
        return image.copy()
    return _area_matrix(h, size) @ image @ _area_matrix(w, size).T


@dataclass(frozen=True)
class AugmentationSpec:
    max_angle: float = np.pi / 16
    max_shift: int = 10


def transform_image(image: np.ndarray, angle: float, dx: int, dy: int,
                    size: int = IMAGE_SIZE) -> np.ndarray:
    """Rotate about the centre (bilinear, zero fill), shift by whole pixels
    (``dx`` to the right, ``dy`` down), then downscale."""
    img = np.asarray(image, dtype=np.float64)
    if angle:
        img = ndimage.rotate(img, np.degrees(angle), reshape=False, order=1,
                             mode="constant", cval=0.0)
    if dx or dy:
        img = ndimage.shift(img, (dy, dx), order=0, mode="constant", cval=0.0)
    return np.clip(downscale(img, size), 0.0, 1.0)


def augment_image(image: np.ndarray, spec: AugmentationSpec, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    angle = rng.uniform(-spec.max_angle, spec.max_angle)
    dx, dy = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
    return transform_image(image, angle, int(dx), int(dy))


# --------------------------------------------------------------------------
# loaders


def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except Exception as e:  # PIL raises a zoo of types
        raise DatasetError(f"cannot read image {path}: {e}") from e
    # ink is the minority; flip dark-on-light sources
    if arr.mean() > 0.5:
        arr = 1.0 - arr
    return arr


def _omniglot_roots(root: Path) -> list[Path]:
    if (root / "omniglot").is_dir():
        root = root / "omniglot"
    known = [root / "images_background", root / "images_evaluation"]
    found = [p for p in known if p.is_dir()]
    return found or [root]


def load_omniglot(root, samples_per_class: int = OMNIGLOT_SAMPLES,
                  keep_native: bool = False) -> ClassLibrary:
    """Load ``<root>/<alphabet>/<character>/*.png``.

    Also accepts an ``omniglot`` subdirectory and the usual
    ``images_background``/``images_evaluation`` pair under it. Classes are numbered in sorted path order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"omniglot root {root} is not a directory")
    char_dirs = []
    for base in _omniglot_roots(root):
        for alphabet in sorted(p for p in base.iterdir() if p.is_dir()):
            char_dirs.extend(sorted(p for p in alphabet.iterdir() if p.is_dir()))
    if not char_dirs:
        raise DatasetError(f"no alphabet/character directories under {root}")

    short = []
    files_per_class = []
    for d in char_dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if len(files) < samples_per_class:
            short.append(f"{d.relative_to(root)} ({len(files)} images)")
        files_per_class.append(files)
    if short:
        raise DatasetError(f"{len(short)} classes have fewer than {samples_per_class} "
                           f"images: " + ", ".join(short[:20]))

    images, natives = [], []
    for files in files_per_class:
        raw = [_read_gray(f) for f in files]
        images.append(np.stack([downscale(r) for r in raw]))
        if keep_native:
            natives.append(np.stack([np.round(r * 255).astype(np.uint8) for r in raw]))
    return ClassLibrary(list(range(len(char_dirs))), images, natives if keep_native else None)


def _open_maybe_gz(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    try:
        with _open_maybe_gz(path) as f:
            data = f.read()
    except OSError as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetError(f"{path}: truncated header")
    got = struct.unpack(">i", data[:4])[0]
    if got != magic:
        raise DatasetError(f"{path}: bad magic {got}, expected {magic}")
    dims = struct.unpack(f">{ndim}i", data[4:header])
    need = int(np.prod(dims))
    if len(data) - header < need:
        raise DatasetError(f"{path}: truncated, expected {need} bytes of data, "
                           f"found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> ClassLibrary:
    """Read an IDX image/label pair (optionally gzipped) into 10 classes."""
    imgs = _read_idx(images_path, MNIST_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, MNIST_LABEL_MAGIC, 1)
    if len(imgs) != len(labels):
        raise DatasetError(f"image count {len(imgs)} != label count {len(labels)}")
    small = np.stack([downscale(im / 255.0) for im in imgs]) if len(imgs) else np.zeros((0, 20, 20))
    ids = sorted(int(c) for c in np.unique(labels))
    return ClassLibrary(ids, [small[labels == c] for c in ids])


def make_minimnist(library: ClassLibrary, per_class: int = 20, seed: int = 0) -> ClassLibrary:
    if per_class <= 0 or per_class > library.min_samples:
        raise ValueError(f"per_class must be in [1, {library.min_samples}], got {per_class}")
    rng = np.random.default_rng(seed)
    picked = [imgs[np.sort(rng.choice(len(imgs), per_class, replace=False))] for imgs in library.images]
    return ClassLibrary(list(library.ids), picked)


def split_classes(library: ClassLibrary, n_train: int, seed: int = 0):
    """Deterministic shuffled split into disjoint train/test libraries."""
    n = len(library)
    if not 0 < n_train < n:
        raise ValueError(f"n_train must be in [1, {n - 1}], got {n_train}")
    order = np.random.default_rng(seed).permutation(n)
    return library.subset(sorted(order[:n_train])), library.subset(sorted(order[n_train:]))


def synthetic_library(n_classes: int, samples_per_class: int = 20, size: int = IMAGE_SIZE,
                      noise: float = 0.1, seed: int = 0, id_offset: int = 0,
                      density: float = 0.5) -> ClassLibrary:
    """Random binary prototypes plus uniform noise in [-noise, noise], clipped.

    Each pixel of a prototype is on with probability ``density``. Prototypes
    are redrawn until every pair differs in at least a quarter of the pixels.
    """
    if n_classes < 2:
        raise ValueError("synthetic library needs at least 2 classes")
    if not 2 * density * (1 - density) > 0.26:
        raise ValueError(f"density {density} cannot give prototypes 25% apart")
    rng = np.random.default_rng(seed)
    npix = size * size
    protos: list[np.ndarray] = []
    while len(protos) < n_classes:
        p = (rng.random(npix) < density).astype(np.float64)
        if all(np.mean(p != q) >= 0.25 for q in protos):
            protos.append(p)
    images = []
    for p in protos:
        jitter = rng.uniform(-noise, noise, size=(samples_per_class, npix)) if noise else 0.0
        block = np.broadcast_to(p + jitter, (samples_per_class, npix))
        images.append(np.clip(block, 0.0, 1.0).reshape(samples_per_class, size, size))
    return ClassLibrary(list(range(id_offset, id_offset + n_classes)), images)


def save_library(path, library: ClassLibrary) -> None:
    """Flat cache: magic, u32 class count, then per class u32 id, u32 n and
    n*400 float32 pixels. Little-endian."""
    with open(path, "wb") as f:
        f.write(LIBRARY_MAGIC)
        f.write(struct.pack("<I", len(library)))
        for cid, imgs in zip(library.ids, library.images):
            f.write(struct.pack("<II", cid, len(imgs)))
            f.write(np.asarray(imgs, dtype="<f4").reshape(len(imgs), -1).tobytes())


def load_library(path) -> ClassLibrary:
    data = Path(path).read_bytes()
    if data[:8] != LIBRARY_MAGIC:
        raise DatasetError(f"{path}: not a library cache")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    ids, images = [], []
    px = IMAGE_SIZE * IMAGE_SIZE
    for _ in range(count):
        if off + 8 > len(data):
            raise DatasetError(f"{path}: truncated")
        cid, n = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = n * px * 4
        if off + nbytes > len(data):
            raise DatasetError(f"{path}: truncated")
        arr = np.frombuffer(data, dtype="<f4", count=n * px, offset=off)
        images.append(arr.reshape(n, IMAGE_SIZE, IMAGE_SIZE).astype(np.float64))
        ids.append(cid)
        off += nbytes
    return ClassLibrary(ids, images)


# --------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeBatch:
    """``B`` episodes of ``T = C * S`` steps.

    images: (B, T, 400); offset_labels: (B, T, C) with step 0 all zero;
    targets: (B, T) label slots; classes: (B, T) library class ids;
    slots: (B, C) label slot of each chosen class, chosen: (B, C) class ids;
    instance: (B, T) 1-based presentation count of the step's class.
    """

    images: np.ndarray
    offset_labels: np.ndarray
    targets: np.ndarray
    classes: np.ndarray
    chosen: np.ndarray
    slots: np.ndarray
    instance: np.ndarray
    first_index: int = 0

    @property
    def batch_size(self) -> int:
        return self.images.shape[0]

    @property
    def steps(self) -> int:
        return self.images.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.offset_labels, self.targets, self.classes):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed) % 2**64, spawn_key=(int(index),)))


def make_episode(library: ClassLibrary, C: int, S: int, rng: np.random.Generator,
                 augment: AugmentationSpec | None = None):
    n = len(library)
    chosen = rng.choice(n, C, replace=False)
    slots = rng.permutation(C)
    seq_class = np.repeat(np.arange(C), S)
    picks = [rng.choice(len(library.images[c]), S, replace=False) for c in chosen]
    sample_idx = np.concatenate(picks)
    order = rng.permutation(C * S)
    seq_class, sample_idx = seq_class[order], sample_idx[order]
    if augment is None:
        pool = np.concatenate([library.images[c][idx] for c, idx in zip(chosen, picks)])
        imgs = pool[order]
    else:
        src = library.native if library.native is not None else library.images
        imgs = np.stack([augment_image(np.asarray(src[chosen[k]][s], dtype=np.float64)
                                       / (255.0 if library.native is not None else 1.0), augment, rng)
                         for k, s in zip(seq_class, sample_idx)])
    targets = slots[seq_class]
    offset = np.zeros((C * S, C))
    offset[np.arange(1, C * S), targets[:-1]] = 1.0
    seen = np.cumsum(np.eye(C, dtype=int)[seq_class], axis=0)
    instance = seen[np.arange(C * S), seq_class]
    ids = np.asarray(library.ids)[chosen]
    return imgs.reshape(C * S, -1), offset, targets, ids[seq_class], ids, slots, instance


def make_episode_batch(library: ClassLibrary, C: int, S: int, B: int,
                       augment: AugmentationSpec | None = None, seed: int = 0,
                       first_index: int = 0) -> EpisodeBatch:
    """Episodes ``first_index .. first_index + B - 1`` of the stream for ``seed``."""
    if C < 1 or S < 1 or B < 1:
        raise ValueError("C, S and B must be positive")
    if len(library) < C:
        raise ValueError(f"library has {len(library)} classes, episode needs {C}")
    if library.min_samples < S:
        raise ValueError(f"some class has only {library.min_samples} samples, episode needs {S}")
    parts = [make_episode(library, C, S, episode_rng(seed, first_index + b), augment) for b in range(B)]
    fields = [np.stack(x) for x in zip(*parts)]
    return EpisodeBatch(*fields, first_index=first_index)


def data_root() -> Path | None:
    root = os.environ.get("FLMN_DATA_ROOT")
    return Path(root) if root else None
