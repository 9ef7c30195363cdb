"""Synthetic source/target domains, padding geometry, and dataset files.

The source domain stands in for a large natural-image corpus: each class is
a Gabor-like oriented grating with class-specific frequency, orientation,
phase offset and per-channel amplitude. The target domain is deliberately a
different family: bright blobs on a dark background, where the class
controls the blob count. Both are pure functions of (seed, parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .fileio import (
    FORMAT_VERSION,
    MAGIC_DATASET,
    _check_eof,
    _read_exact,
    _read_u32,
    _write_u32,
    read_tensor_block,
    write_tensor_block,
)

DOMAIN_TAGS = ("source", "target")


@dataclass(frozen=True)
class PaddingSpec:
    """Centered placement of an inner x inner image inside an outer frame."""

    inner: int
    outer: int
    channels: int

    def __post_init__(self):
        if self.inner >= self.outer:
            raise ConfigError(f"inner size {self.inner} must be < outer size {self.outer}")
        if self.inner < 1 or self.channels < 1:
            raise ConfigError("inner size and channels must be positive")

    @property
    def offset(self) -> int:
        return (self.outer - self.inner) // 2

    def mask(self) -> np.ndarray:
        """Binary mask: 1 on the frame, 0 over the centered inner block."""
        m = np.ones((self.outer, self.outer, self.channels))
        o = self.offset
        m[o : o + self.inner, o : o + self.inner, :] = 0.0
        return m

    def frame_cells_per_channel(self) -> int:
        return self.outer * self.outer - self.inner * self.inner


@dataclass
class LabeledDataset:
    """Stacked samples (n, h, w, c) in [-1, 1] with integer labels."""

    samples: np.ndarray
    labels: np.ndarray
    domain: str
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ShapeError(f"samples must be (n, h, w, c), got {self.samples.shape}")
        if self.labels.shape != (self.samples.shape[0],):
            raise ShapeError("labels length must match sample count")
        if self.domain not in DOMAIN_TAGS:
            raise ConfigError(f"domain must be one of {DOMAIN_TAGS}, got {self.domain!r}")
        if self.num_classes <= 0:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels out of range")
        if self.samples.size and (self.samples.min() < -1.0 or self.samples.max() > 1.0):
            raise ConfigError("sample values must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_dims(self) -> tuple:
        return self.samples.shape[1:]

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.domain, self.num_classes)


def _grid(size: int):
    coords = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(coords, coords, indexing="ij")


def gen_source_dataset(seed: int, num_classes: int, per_class: int, size: int, channels: int = 3) -> LabeledDataset:
    """Oriented-grating classes; separable by construction."""
    if num_classes < 2:
        raise ConfigError("source domain needs at least 2 classes")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    yy, xx = _grid(size)
    samples = np.empty((num_classes * per_class, size, size, channels))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        freq = 1.5 + 0.7 * c
        theta = np.pi * c / num_classes
        phase0 = 0.9 * c
        carrier_axis = xx * np.cos(theta) + yy * np.sin(theta)
        chan_amp = 0.55 + 0.4 * np.cos(phase0 + 2.1 * np.arange(channels))
        for j in range(per_class):
            # generous per-sample jitter keeps benign queries mutually distant
            phase = phase0 + rng.uniform(-1.5, 1.5)
            amp = rng.uniform(0.55, 1.0)
            cx, cy = rng.uniform(-0.25, 0.25, size=2)
            width = rng.uniform(0.45, 0.7)
            envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2))
            base = amp * envelope * np.cos(2 * np.pi * freq * carrier_axis + phase)
            noise = rng.normal(0.0, 0.25, size=(size, size, channels))
            img = base[:, :, None] * chan_amp[None, None, :] + noise
            samples[c * per_class + j] = np.clip(img, -1.0, 1.0)
            labels[c * per_class + j] = c
    return LabeledDataset(samples, labels, "source", num_classes)


def gen_target_dataset(seed: int, num_classes: int, per_class: int, size: int, channels: int = 3) -> LabeledDataset:
    """Blob-count classes on a dark textured background."""
    if num_classes < 1:
        raise ConfigError("target domain needs at least 1 class")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    yy, xx = _grid(size)
    samples = np.empty((num_classes * per_class, size, size, channels))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    blob_sigma = 0.22
    for c in range(num_classes):
        n_blobs = 1 + 3 * c
        # fixed anchor grid per class with small per-sample jitter: classes
        # differ strongly (blob count) while samples within a class stay close
        anchor_angles = 2 * np.pi * np.arange(n_blobs) / n_blobs + 0.7 * c
        anchors = 0.38 * np.stack([np.cos(anchor_angles), np.sin(anchor_angles)], axis=1)
        for j in range(per_class):
            img = np.full((size, size), -0.55)
            img += 0.08 * np.cos(2 * np.pi * 4.0 * xx) * np.cos(2 * np.pi * 4.0 * yy)
            for a in range(n_blobs):
                cx, cy = anchors[a] + rng.uniform(-0.12, 0.12, size=2)
                img += 1.25 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * blob_sigma**2))
            noise = rng.normal(0.0, 0.05, size=(size, size, channels))
            stacked = img[:, :, None] * np.array([1.0, 0.85, 0.7])[None, None, :channels] + noise
            samples[c * per_class + j] = np.clip(stacked, -1.0, 1.0)
            labels[c * per_class + j] = c
    return LabeledDataset(samples, labels, "target", num_classes)


def pad_and_mask(x: np.ndarray, spec: PaddingSpec):
    """Zero-pad a target sample into the outer frame; return (padded, mask).

    The mask is 0 over the centered inner block and 1 on the frame, so the
    padded image and the mask have disjoint supports.
    """
    x = np.asarray(x, dtype=np.float64)
    want = (spec.inner, spec.inner, spec.channels)
    if x.shape != want:
        raise ShapeError(f"target sample shape {x.shape}, expected {want}")
    padded = np.zeros((spec.outer, spec.outer, spec.channels))
    o = spec.offset
    padded[o : o + spec.inner, o : o + spec.inner, :] = x
    return padded, spec.mask()


def pad_batch(xs: np.ndarray, spec: PaddingSpec) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1:] != (spec.inner, spec.inner, spec.channels):
        raise ShapeError(f"batch sample shape {xs.shape[1:]} does not match spec")
    out = np.zeros((xs.shape[0], spec.outer, spec.outer, spec.channels))
    o = spec.offset
    out[:, o : o + spec.inner, o : o + spec.inner, :] = xs
    return out


@dataclass
class PairDataset:
    """Sample pairs with label 0 = same class ("similar"), 1 = different."""

    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if not (self.first.shape == self.second.shape and self.first.shape[0] == len(self.labels)):
            raise ShapeError("pair members and labels must align")
        if len(self.labels) and not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("pair labels must be 0 or 1")

    def __len__(self) -> int:
        return self.first.shape[0]

    def subset(self, indices) -> "PairDataset":
        idx = np.asarray(indices)
        return PairDataset(self.first[idx], self.second[idx], self.labels[idx])


def make_pairs(ds: LabeledDataset, seed: int, count: int, balance: float = 0.5) -> PairDataset:
    """Draw ``count`` distinct index pairs, a ``balance`` fraction same-class."""
    if not 0.0 <= balance <= 1.0:
        raise ConfigError("balance must be in [0, 1]")
    labels = ds.labels
    counts = np.bincount(labels, minlength=ds.num_classes)
    if (counts < 2).any():
        raise ConfigError("every class needs at least 2 samples to form pairs")

    i, j = np.triu_indices(len(ds), k=1)
    same = labels[i] == labels[j]
    similar_pool = np.stack([i[same], j[same]], axis=1)
    dissimilar_pool = np.stack([i[~same], j[~same]], axis=1)

    n_similar = int(round(balance * count))
    n_dissimilar = count - n_similar
    if n_similar > len(similar_pool) or n_dissimilar > len(dissimilar_pool):
        raise ConfigError(
            f"requested {n_similar} similar / {n_dissimilar} dissimilar pairs, "
            f"only {len(similar_pool)} / {len(dissimilar_pool)} available"
        )

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    chosen_s = similar_pool[rng.choice(len(similar_pool), n_similar, replace=False)]
    chosen_d = dissimilar_pool[rng.choice(len(dissimilar_pool), n_dissimilar, replace=False)]
    pair_idx = np.concatenate([chosen_s, chosen_d], axis=0)
    pair_labels = np.concatenate([np.zeros(n_similar, dtype=np.int64), np.ones(n_dissimilar, dtype=np.int64)])
    order = rng.permutation(count)
    pair_idx = pair_idx[order]
    pair_labels = pair_labels[order]
    return PairDataset(ds.samples[pair_idx[:, 0]], ds.samples[pair_idx[:, 1]], pair_labels)


def save_dataset(path, ds: LabeledDataset):
    with open(path, "wb") as f:
        f.write(MAGIC_DATASET)
        _write_u32(f, FORMAT_VERSION)
        write_tensor_block(f, [("samples", ds.samples)])
        _write_u32(f, len(ds.labels))
        for lab in ds.labels:
            _write_u32(f, int(lab))
        raw = ds.domain.encode("utf-8")
        _write_u32(f, len(raw))
        f.write(raw)


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != MAGIC_DATASET:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC_DATASET!r}")
        version = _read_u32(f)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported format version {version}")
        tensors = read_tensor_block(f)
        if "samples" not in tensors:
            raise FormatError("dataset file has no 'samples' tensor")
        n = _read_u32(f)
        labels = np.array([_read_u32(f) for _ in range(n)], dtype=np.int64)
        tag_len = _read_u32(f)
        domain = _read_exact(f, tag_len).decode("utf-8")
        _check_eof(f)
    samples = tensors["samples"]
    if samples.ndim != 4:
        raise FormatError(f"samples tensor must be rank 4, got rank {samples.ndim}")
    if samples.shape[0] != n:
        raise FormatError("label count does not match sample count")
    return LabeledDataset(samples, labels, domain)
