"""Dataset loading and preparation: IDX binary files, synthetic cluster data,
mean subtraction, IID partitioning, and batch sampling.

Datasets are immutable after construction (arrays are marked read-only) and
every operation is a pure function of its seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message carries the byte offset of the problem."""


@dataclass
class Dataset:
    """Feature rows xs (n, input_dim), integer labels ys (n,), and the number
    of classes. Immutable by contract."""

    xs: np.ndarray
    ys: np.ndarray
    class_count: int

    def __post_init__(self):
        self.xs = np.ascontiguousarray(self.xs, dtype=np.float64)
        self.ys = np.ascontiguousarray(self.ys, dtype=np.int64)
        if self.xs.ndim != 2 or self.ys.ndim != 1 or len(self.xs) != len(self.ys):
            raise ValueError(
                f"xs {self.xs.shape} and ys {self.ys.shape} must be (n, d) and (n,)"
            )
        if len(self.ys) and (self.ys.min() < 0 or self.ys.max() >= self.class_count):
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), "
                f"got range [{self.ys.min()}, {self.ys.max()}]"
            )
        self.xs.flags.writeable = False
        self.ys.flags.writeable = False

    def __len__(self) -> int:
        return len(self.ys)

    @property
    def input_dim(self) -> int:
        return self.xs.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.xs[indices], self.ys[indices], self.class_count)


@dataclass
class Partition:
    """Disjoint per-client datasets covering one source dataset."""

    clients: list[Dataset]

    @property
    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    @property
    def total(self) -> int:
        return sum(self.sizes)


def _read_header(buf: bytes, path: str, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated header, file ends at byte {len(buf)}")
    return struct.unpack(f">{1 + n_dims}I", buf[:need])


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Load an IDX image/label file pair (the MNIST distribution format).

    Pixels come back as float64 in [0, 1] (bytes / 255), one flat row per
    image. class_count defaults to max(label) + 1.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    magic, n_images, rows, cols = _read_header(img_buf, str(images_path), 3)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    expected = n_images * rows * cols
    pixels = img_buf[16:]
    if len(pixels) != expected:
        raise IdxFormatError(
            f"{images_path}: expected {expected} pixel bytes at byte 16, got {len(pixels)}"
        )

    with open(labels_path, "rb") as f:
        lab_buf = f.read()
    magic, n_labels = _read_header(lab_buf, str(labels_path), 1)
    if magic != IDX_LABEL_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic 0x{magic:08x} at byte 0, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    labels = lab_buf[8:]
    if len(labels) != n_labels:
        raise IdxFormatError(
            f"{labels_path}: expected {n_labels} label bytes at byte 8, got {len(labels)}"
        )

    if n_images != n_labels:
        raise IdxFormatError(
            f"image count {n_images} ({images_path}) != label count {n_labels} ({labels_path})"
        )

    xs = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(n_images, rows * cols)
    xs /= 255.0
    ys = np.frombuffer(labels, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(ys.max()) + 1 if len(ys) else 1
    return Dataset(xs, ys, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) as an IDX file pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


def _cluster_means(class_count: int, input_dim: int) -> np.ndarray:
    # adjacent means exactly unit distance apart
    means = np.zeros((class_count, input_dim))
    if class_count == 1:
        return means
    if input_dim == 1:
        means[:, 0] = np.arange(class_count)
        return means
    radius = 1.0 / (2.0 * np.sin(np.pi / class_count))
    theta = 2.0 * np.pi * np.arange(class_count) / class_count
    means[:, 0] = radius * np.cos(theta)
    means[:, 1] = radius * np.sin(theta)
    return means


def gen_synthetic(
    class_count: int, input_dim: int, n_per_class: int, seed: int, std: float = 0.1
) -> Dataset:
    """Gaussian clusters, one per class, means exactly unit distance apart."""
    if min(class_count, input_dim, n_per_class) <= 0:
        raise ValueError("class_count, input_dim, and n_per_class must be positive")
    rng = np.random.default_rng(seed)
    means = _cluster_means(class_count, input_dim)
    xs = np.concatenate(
        [means[c] + std * rng.standard_normal((n_per_class, input_dim)) for c in range(class_count)]
    )
    ys = np.repeat(np.arange(class_count), n_per_class)
    return Dataset(xs, ys, class_count)


def gen_cluster_images(
    class_count: int,
    side: int,
    n_per_class: int,
    seed: int,
    noise: float = 70.0,
    bank_size: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic image-like byte data: each class is a template mixing
    four Gaussian bumps drawn from a small shared bank (so classes genuinely
    overlap), each sample the template plus brightness jitter and pixel noise.
    Returns (images u8 (n, side, side), labels u8 (n,)), ready for write_idx."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)

    if bank_size is None:
        bank_size = class_count + 2
    cx = rng.uniform(0.15 * side, 0.85 * side, bank_size)
    cy = rng.uniform(0.15 * side, 0.85 * side, bank_size)
    sg = rng.uniform(0.08 * side, 0.22 * side, bank_size)
    bumps = np.exp(
        -((xx[None] - cx[:, None, None]) ** 2 + (yy[None] - cy[:, None, None]) ** 2)
        / (2.0 * sg[:, None, None] ** 2)
    )

    templates = np.zeros((class_count, side, side))
    n_picks = min(4, bank_size)
    for c in range(class_count):
        picks = rng.choice(bank_size, size=n_picks, replace=False)
        weights = rng.uniform(0.4, 1.0, n_picks)
        templates[c] = (weights[:, None, None] * bumps[picks]).sum(axis=0)
    templates *= 200.0 / templates.max(axis=(1, 2), keepdims=True)

    images = np.empty((class_count * n_per_class, side, side), dtype=np.uint8)
    labels = np.repeat(np.arange(class_count), n_per_class).astype(np.uint8)
    for c in range(class_count):
        brightness = rng.uniform(0.7, 1.3, (n_per_class, 1, 1))
        block = templates[c] * brightness + rng.normal(0.0, noise, (n_per_class, side, side))
        images[c * n_per_class : (c + 1) * n_per_class] = np.clip(block, 0, 255).astype(np.uint8)
    return images, labels


def subtract_mean(
    train: Dataset, others: tuple[Dataset, ...] | list[Dataset] = ()
) -> tuple[Dataset, list[Dataset], np.ndarray]:
    """Center every given dataset by the per-feature mean of `train` only.
    Labels are untouched. Returns new datasets plus the mean vector.

    Not idempotent: re-applying recenters by the new (near-zero) mean; to undo
    or repeat a preprocessing exactly, reuse the returned mean vector."""
    mean = train.xs.mean(axis=0)
    out_others = []
    for d in others:
        if d.input_dim != train.input_dim:
            raise ValueError(f"input_dim mismatch: {d.input_dim} vs {train.input_dim}")
        out_others.append(Dataset(d.xs - mean, d.ys, d.class_count))
    return Dataset(train.xs - mean, train.ys, train.class_count), out_others, mean


def partition_iid(d: Dataset, num_clients: int, seed: int) -> Partition:
    """Shuffle, then split as evenly as possible; any remainder is handed out
    one sample per client starting from client 0."""
    if num_clients <= 0:
        raise ValueError(f"num_clients must be positive, got {num_clients}")
    if num_clients > len(d):
        raise ValueError(f"cannot split {len(d)} samples across {num_clients} clients")
    perm = np.random.default_rng(seed).permutation(len(d))
    base, rem = divmod(len(d), num_clients)
    clients, start = [], 0
    for k in range(num_clients):
        size = base + (1 if k < rem else 0)
        clients.append(d.subset(perm[start : start + size]))
        start += size
    return Partition(clients)


def sample_batch(
    d: Dataset, batch_size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sample without replacement; advances the generator state."""
    if batch_size > len(d):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(d)}")
    idx = rng.choice(len(d), size=batch_size, replace=False)
    return d.xs[idx], d.ys[idx]
