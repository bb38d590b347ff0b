"""Datasets and federated partitioning.

Loads MNIST-style IDX files, generates Gaussian-blob classification data for
desk-scale runs, and splits a dataset across clients either uniformly (IID) or
with Dirichlet label skew.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import as_rng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"features have {self.features.shape[0]} rows but labels have "
                f"{self.labels.shape[0]} entries"
            )
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.n_classes)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def equals(self, other: "LabeledDataset") -> bool:
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(eq=False)
class ClientShard:
    client_id: int
    data: LabeledDataset
    weight: float
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def n_samples(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    strategy: str = "iid"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.strategy not in ("iid", "dirichlet"):
            raise ValueError(f"unknown partition strategy {self.strategy!r}")
        if self.strategy == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet alpha must be > 0")


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------


def _read_idx(path, expected_magic: int, n_dims: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * n_dims
    if len(raw) < header_len:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, header needs {header_len}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{n_dims}I", raw[4:header_len])
    payload = raw[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return dims, payload[:expected]


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an MNIST-layout image/label pair; pixels are scaled to [0, 1]."""
    (n_images, rows, cols), img_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), lbl_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise CountMismatchError(f"{n_images} images but {n_labels} labels")
    images = np.frombuffer(img_bytes, dtype=np.uint8).reshape(n_images, rows * cols)
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8).astype(np.int64)
    n_classes = max(10, int(labels.max()) + 1) if labels.size else 10
    return LabeledDataset(images.astype(np.float64) / 255.0, labels, n_classes)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX layout."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def synth_classification(n_samples: int, n_features: int, n_classes: int,
                         cluster_spread: float = 1.0, seed=0) -> LabeledDataset:
    """Class-conditional Gaussian blobs.

    Class means are drawn from N(0, I); each sample is its class mean plus
    ``cluster_spread`` times standard normal noise.  Labels are balanced
    (round-robin, then shuffled).
    """
    for name, value in (("n_samples", n_samples), ("n_features", n_features), ("n_classes", n_classes)):
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if cluster_spread < 0:
        raise ValueError("cluster_spread must be >= 0")
    rng = as_rng(seed)
    means = rng.standard_normal((n_classes, n_features))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    noise = rng.standard_normal((n_samples, n_features))
    features = means[labels] + cluster_spread * noise
    return LabeledDataset(features, labels, n_classes)


def train_test_split(dataset: LabeledDataset, test_fraction: float = 0.2, seed=0):
    rng = as_rng(seed)
    perm = rng.permutation(len(dataset))
    n_test = int(round(test_fraction * len(dataset)))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def _dirichlet_assignment(labels: np.ndarray, n_classes: int, n_clients: int,
                          alpha: float, rng: np.random.Generator) -> list[np.ndarray]:
    # rows: per-client label proportions
    proportions = rng.dirichlet(np.full(n_classes, alpha), size=n_clients)
    proportions = np.nan_to_num(proportions, nan=0.0)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        column = proportions[:, c]
        total = column.sum()
        probs = column / total if total > 0 else np.full(n_clients, 1.0 / n_clients)
        counts = rng.multinomial(idx.size, probs)
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if chunk.size:
                buckets[k].append(chunk)
    return [np.concatenate(b) if b else np.empty(0, dtype=np.int64) for b in buckets]


def _repair_empty(shards: list[np.ndarray]) -> list[np.ndarray]:
    shards = [np.asarray(s, dtype=np.int64) for s in shards]
    for k in range(len(shards)):
        while shards[k].size == 0:
            donor = max(range(len(shards)), key=lambda j: (shards[j].size, -j))
            shards[k] = shards[donor][-1:]
            shards[donor] = shards[donor][:-1]
            logger.debug("moved one sample from client %d to empty client %d", donor, k)
    return shards


def partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    """Split ``dataset`` across ``spec.n_clients`` disjoint, non-empty shards.

    Weights are data-proportional, ``n_k / n``.
    """
    n = len(dataset)
    if spec.n_clients > n:
        raise ValueError(f"cannot split {n} samples across {spec.n_clients} clients")
    rng = as_rng(spec.seed)
    if spec.strategy == "iid":
        shards = np.array_split(rng.permutation(n), spec.n_clients)
    else:
        shards = _dirichlet_assignment(dataset.labels, dataset.n_classes, spec.n_clients, spec.alpha, rng)
    shards = _repair_empty(shards)
    out = []
    for k, idx in enumerate(shards):
        idx = np.sort(idx)
        out.append(ClientShard(k, dataset.subset(idx), idx.size / n, idx))
    return out


def max_label_share(shards: list[ClientShard]) -> np.ndarray:
    """Fraction of each client's samples that carry its most common label."""
    return np.array([s.data.label_counts().max() / s.n_samples for s in shards])


def label_histogram(shards: list[ClientShard]) -> np.ndarray:
    return np.stack([s.data.label_counts() for s in shards])
