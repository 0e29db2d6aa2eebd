"""Dataset ingestion, client partitioning and per-client splits.

Two sources are built in: IDX image/label file pairs (the classic big-endian
handwritten-digit format) and a seeded synthetic generator. A third "dir"
source reads pre-partitioned per-client IDX files laid out as
``clients/<id>/{train,val,test}-{images,labels}.idx``.

Partitioning is deterministic given the plan seed: ``iid`` deals a global
shuffle into equal shares, ``k_class`` gives every client samples from
exactly k label classes. Each client's allocation is then split 80/10/10
into train/val/test (floor for val and test, remainder to train).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PartitionError

Array = np.ndarray

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Images scaled to [0,1], shape (N, H, W, C); integer class labels."""

    images: Array
    labels: Array
    n_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ConfigError(f"images must be N x H x W x C, got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ConfigError("labels length does not match image count")
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ConfigError("label value outside [0, n_classes)")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx: Array) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def n_k(self) -> int:
        return len(self.train)


@dataclass(frozen=True)
class PartitionPlan:
    mode: str  # iid | k_class
    n_clients: int
    max_per_client: int
    k: int = 1
    seed: int = 0
    size_jitter: float = 0.0  # iid only: relative spread of client sizes

    def __post_init__(self):
        if self.mode not in ("iid", "k_class"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.n_clients < 1 or self.max_per_client < 1:
            raise ConfigError("n_clients and max_per_client must be >= 1")
        if self.mode == "k_class" and self.k < 1:
            raise ConfigError("k must be >= 1 in k_class mode")
        if not 0.0 <= self.size_jitter < 1.0:
            raise ConfigError("size_jitter must be in [0,1)")


# ---------------------------------------------------------------------------
# IDX files


def _read_be32(f, path: Path) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise DataError(f"{path}: truncated header")
    return struct.unpack(">I", data)[0]


def load_idx(images_path: str | Path, labels_path: str | Path,
             n_classes: int | None = None) -> Dataset:
    """Read a big-endian IDX image/label file pair into a Dataset."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be32(f, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{images_path}: bad image magic 0x{magic:08x}")
        n = _read_be32(f, images_path)
        rows = _read_be32(f, images_path)
        cols = _read_be32(f, images_path)
        raw = f.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise DataError(f"{images_path}: truncated pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols, 1)
    with open(labels_path, "rb") as f:
        magic = _read_be32(f, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"{labels_path}: bad label magic 0x{magic:08x}")
        n_labels = _read_be32(f, labels_path)
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise DataError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if n_labels != n:
        raise DataError(
            f"{images_path} / {labels_path}: image count {n} != label count {n_labels}")
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images.astype(np.float64) / 255.0, labels, n_classes)


def save_idx(dataset: Dataset, images_path: str | Path, labels_path: str | Path) -> None:
    """Write a Dataset back to an IDX pair (images quantized to uint8)."""
    images = np.clip(np.round(dataset.images * 255.0), 0, 255).astype(np.uint8)
    n, rows, cols, channels = images.shape
    if channels != 1:
        raise ConfigError("IDX export supports single-channel images only")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_client_dir(root: str | Path, n_classes: int | None = None) -> list[ClientDataset]:
    """Read pre-partitioned clients from clients/<id>/{split}-{images,labels}.idx."""
    root = Path(root)
    base = root / "clients" if (root / "clients").is_dir() else root
    client_dirs = sorted((d for d in base.iterdir() if d.is_dir()), key=lambda d: int(d.name))
    if not client_dirs:
        raise DataError(f"{base}: no client directories found")
    clients = []
    for d in client_dirs:
        splits = {}
        for split in ("train", "val", "test"):
            splits[split] = load_idx(d / f"{split}-images.idx", d / f"{split}-labels.idx",
                                     n_classes=n_classes)
        if n_classes is None:
            n_classes = max(s.n_classes for s in splits.values())
            splits = {k: Dataset(v.images, v.labels, n_classes) for k, v in splits.items()}
        clients.append(ClientDataset(client_id=int(d.name), train=splits["train"],
                                     val=splits["val"], test=splits["test"]))
    return clients


def save_client_dir(clients: list[ClientDataset], root: str | Path) -> None:
    root = Path(root)
    for client in clients:
        d = root / "clients" / str(client.client_id)
        d.mkdir(parents=True, exist_ok=True)
        for split, ds in (("train", client.train), ("val", client.val), ("test", client.test)):
            save_idx(ds, d / f"{split}-images.idx", d / f"{split}-labels.idx")


# ---------------------------------------------------------------------------
# Synthetic data


def synth_dataset(n: int, n_classes: int, image_side: int, seed: int,
                  noise_sigma: float = 0.1, template_contrast: float = 1.0) -> Dataset:
    """Per-class template plus seeded Gaussian noise, clipped to [0,1].

    ``template_contrast`` < 1 pulls the class templates toward mid-gray,
    which makes classes overlap more and the task harder.
    """
    if n < n_classes:
        raise ConfigError("synth_dataset needs n >= n_classes")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5D])
    templates = rng.random((n_classes, image_side, image_side, 1))
    templates = 0.5 + template_contrast * (templates - 0.5)
    labels = np.arange(n, dtype=np.int64) % n_classes
    perm = rng.permutation(n)
    labels = labels[perm]
    noise = rng.normal(0.0, 1.0, size=(n, image_side, image_side, 1))
    images = np.clip(templates[labels] + noise_sigma * noise, 0.0, 1.0)
    return Dataset(images, labels, n_classes)


# ---------------------------------------------------------------------------
# Partitioning


def split_80_10_10(dataset: Dataset, rng: np.random.Generator) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle and slice one client's allocation into train/val/test."""
    n = len(dataset)
    perm = rng.permutation(n)
    n_val = n // 10
    n_test = n // 10
    n_train = n - n_val - n_test
    train = dataset.subset(perm[:n_train])
    val = dataset.subset(perm[n_train:n_train + n_val])
    test = dataset.subset(perm[n_train + n_val:])
    return train, val, test


def partition(dataset: Dataset, plan: PartitionPlan) -> list[ClientDataset]:
    if plan.mode == "iid":
        allocations = _allocate_iid(dataset, plan)
    else:
        allocations = _allocate_k_class(dataset, plan)
    clients = []
    for cid, idx in enumerate(allocations):
        rng = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x51, cid])
        train, val, test = split_80_10_10(dataset.subset(idx), rng)
        clients.append(ClientDataset(client_id=cid, train=train, val=val, test=test))
    return clients


def _allocate_iid(dataset: Dataset, plan: PartitionPlan) -> list[Array]:
    n = len(dataset)
    rng = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x11D])
    sizes = np.full(plan.n_clients, plan.max_per_client, dtype=np.int64)
    if plan.size_jitter > 0.0:
        factor = 1.0 - plan.size_jitter * rng.random(plan.n_clients)
        sizes = np.maximum(3, np.floor(sizes * factor).astype(np.int64))
    total = int(sizes.sum())
    if total > n:
        raise PartitionError(
            f"iid partition needs {total} samples but dataset has {n} "
            f"(short by {total - n})")
    perm = rng.permutation(n)
    out, offset = [], 0
    for size in sizes:
        out.append(perm[offset:offset + int(size)])
        offset += int(size)
    return out


def _allocate_k_class(dataset: Dataset, plan: PartitionPlan) -> list[Array]:
    n_classes = dataset.n_classes
    if plan.k > n_classes:
        raise ConfigError(f"k={plan.k} exceeds n_classes={n_classes}")
    rng = np.random.default_rng([plan.seed & 0xFFFFFFFF, 0x4C])
    per_class_quota = plan.max_per_client // plan.k
    if per_class_quota < 1:
        raise ConfigError("max_per_client must be >= k")
    # Client c draws from classes {(c + j*offset) mod n_classes}: k distinct classes.
    class_lists = [rng.permutation(np.flatnonzero(dataset.labels == c))
                   for c in range(n_classes)]
    taken = [0] * n_classes
    start = int(rng.integers(0, n_classes))
    allocations = []
    shortfall = []
    for cid in range(plan.n_clients):
        chosen = [(start + cid + j * max(1, n_classes // plan.k)) % n_classes
                  for j in range(plan.k)]
        if len(set(chosen)) < plan.k:  # degenerate stride, fall back to consecutive
            chosen = [(start + cid + j) % n_classes for j in range(plan.k)]
        idx_parts = []
        for c in chosen:
            lo = taken[c]
            hi = lo + per_class_quota
            if hi > class_lists[c].size:
                shortfall.append((cid, c, hi - class_lists[c].size))
                continue
            idx_parts.append(class_lists[c][lo:hi])
            taken[c] = hi
        if len(idx_parts) < plan.k:
            raise PartitionError(
                f"k_class partition ran out of samples: shortfall {shortfall}")
        allocations.append(np.concatenate(idx_parts))
    return allocations


def pooled_train(clients: list[ClientDataset]) -> Dataset:
    """Union of all client train sets (the centralized-training view)."""
    images = np.concatenate([c.train.images for c in clients])
    labels = np.concatenate([c.train.labels for c in clients])
    return Dataset(images, labels, clients[0].train.n_classes)


def pooled_val(clients: list[ClientDataset]) -> Dataset:
    images = np.concatenate([c.val.images for c in clients])
    labels = np.concatenate([c.val.labels for c in clients])
    return Dataset(images, labels, clients[0].val.n_classes)
