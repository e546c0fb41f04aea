"""Datasets, IDX ingestion and non-IID partitioning across devices."""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedprune.fileio import atomic_write_bytes, atomic_write_csv

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Raised for invalid datasets and impossible partitions."""
    pass


class IdxFormatError(DataError):
    """Raised when an IDX file is malformed."""
    pass


@dataclass(frozen=True, eq=False)
class MiniBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Samples as rows of ``inputs`` (features in [0, 1]) with integer labels."""
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DataError(f"inputs must be samples x features, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{y.size} labels for {x.shape[0]} samples")
        if self.class_count < 1:
            raise DataError("class_count must be >= 1")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def feature_count(self) -> int:
        return int(self.inputs.shape[1])

    def batch(self, indices: Sequence[int] | np.ndarray) -> MiniBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return MiniBatch(self.inputs[idx], self.labels[idx])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.class_count)


@dataclass(frozen=True, eq=False)
class DevicePartition:
    """Per-device sample indices into one dataset; lists never overlap."""
    indices: tuple[np.ndarray, ...]

    def __post_init__(self):
        parts = tuple(np.asarray(ix, dtype=np.int64) for ix in self.indices)
        merged = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        if np.unique(merged).size != merged.size:
            raise DataError("device index lists overlap")
        object.__setattr__(self, "indices", parts)

    def __len__(self) -> int:
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [int(ix.size) for ix in self.indices]

    def label_sets(self, ds: LabeledDataset) -> list[frozenset[int]]:
        return [frozenset(int(c) for c in np.unique(ds.labels[ix])) for ix in self.indices]


def _open_maybe_gzip(path: Path) -> bytes:
    path = Path(path)
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        raise IdxFormatError(f"{path}: {e}") from e


def _read_header(raw: bytes, path: Path, magic: int, dims: int) -> tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(raw) < size:
        raise IdxFormatError(f"{path}: truncated header")
    values = struct.unpack(f">{1 + dims}I", raw[:size])
    if values[0] != magic:
        raise IdxFormatError(f"{path}: bad magic 0x{values[0]:08x}, expected 0x{magic:08x}")
    return values[1:]


def load_idx(images_path: Path, labels_path: Path, class_count: int | None = None) -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzip-compressed); pixels scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    raw_images = _open_maybe_gzip(images_path)
    raw_labels = _open_maybe_gzip(labels_path)

    n_images, rows, cols = _read_header(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,) = _read_header(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise IdxFormatError(f"count mismatch: {n_images} images vs {n_labels} labels")

    pixels = raw_images[16:]
    if len(pixels) != n_images * rows * cols:
        raise IdxFormatError(f"{images_path}: truncated file, expected {n_images * rows * cols} pixel bytes, got {len(pixels)}")
    label_bytes = raw_labels[8:]
    if len(label_bytes) != n_labels:
        raise IdxFormatError(f"{labels_path}: truncated file, expected {n_labels} label bytes, got {len(label_bytes)}")

    inputs = np.frombuffer(pixels, dtype=np.uint8).reshape(n_images, rows * cols) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels.size else 1
    logger.info("loaded %d samples (%dx%d) from %s", n_images, rows, cols, images_path)
    return LabeledDataset(inputs, labels, class_count)


def write_idx(ds: LabeledDataset, images_path: Path, labels_path: Path, image_shape: tuple[int, int]) -> None:
    """Write ``ds`` back as an IDX pair; ``.gz`` paths are gzip-compressed."""
    rows, cols = image_shape
    if rows * cols != ds.feature_count:
        raise DataError(f"image shape {image_shape} does not hold {ds.feature_count} features")
    if ds.inputs.size and (ds.inputs.min() < 0 or ds.inputs.max() > 1):
        raise DataError("IDX pixels need inputs in [0, 1]")
    if ds.class_count > 256:
        raise DataError("IDX labels are single bytes")
    n = len(ds)
    pixels = np.rint(ds.inputs * 255.0).astype(np.uint8).tobytes()
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels
    labels = struct.pack(">II", IDX_LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes()
    for path, payload in ((Path(images_path), images), (Path(labels_path), labels)):
        if path.suffix == ".gz":
            payload = gzip.compress(payload, mtime=0)
        atomic_write_bytes(path, payload)


def synth_blobs(seed, classes: int, per_class: int, dims: int, std: float = 0.3) -> LabeledDataset:
    """Gaussian clusters around unit-separated means, min-max scaled to [0, 1].

    Class ``c`` is centred on ``(1 + c // dims) * e_(c % dims)``.
    """
    if min(classes, per_class, dims) < 1:
        raise DataError("classes, per_class and dims must be >= 1")
    if std < 0:
        raise DataError("std must be >= 0")
    rng = np.random.default_rng(seed)
    means = np.zeros((classes, dims))
    for c in range(classes):
        means[c, c % dims] = 1.0 + c // dims
    labels = np.repeat(np.arange(classes), per_class)
    inputs = means[labels] + rng.normal(0.0, std, size=(labels.size, dims))
    lo, hi = inputs.min(), inputs.max()
    if hi > lo:
        inputs = (inputs - lo) / (hi - lo)
    else:
        inputs = np.zeros_like(inputs)
    order = rng.permutation(labels.size)
    return LabeledDataset(inputs[order], labels[order], classes)


def export_csv(ds: LabeledDataset, path: Path) -> None:
    header = [f"f{i}" for i in range(ds.feature_count)] + ["label"]
    rows = ([*map(repr, x.tolist()), int(y)] for x, y in zip(ds.inputs, ds.labels))
    atomic_write_csv(Path(path), header, rows)


def train_test_split(ds: LabeledDataset, test_fraction: float, seed) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if len(ds) < 2:
        raise DataError("need at least two samples to split")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = min(max(int(round(test_fraction * len(ds))), 1), len(ds) - 1)
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def partition_noniid(ds: LabeledDataset, k_devices: int, labels_per_device: int, seed) -> DevicePartition:
    """Give each device samples from exactly ``labels_per_device`` classes.

    Classes are dealt round-robin in a seeded order: device ``d`` gets slots
    ``d*L .. d*L + L - 1`` of the cyclic class sequence. Each class's shuffled
    samples are split into as many contiguous shards as the class has slots.
    """
    c = ds.class_count
    if k_devices < 1 or labels_per_device < 1:
        raise DataError("k_devices and labels_per_device must be >= 1")
    if labels_per_device > c:
        raise DataError(f"labels_per_device={labels_per_device} exceeds class_count={c}")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(c)
    slots = [[int(perm[(d * labels_per_device + j) % c]) for j in range(labels_per_device)] for d in range(k_devices)]

    owners: dict[int, list[int]] = {}
    for d, classes in enumerate(slots):
        for cls in classes:
            owners.setdefault(cls, []).append(d)

    per_device: list[list[np.ndarray]] = [[] for _ in range(k_devices)]
    for cls in sorted(owners):
        members = np.flatnonzero(ds.labels == cls)
        rng.shuffle(members)
        if members.size < len(owners[cls]):
            raise DataError(
                f"class {cls} has {members.size} samples for {len(owners[cls])} devices; "
                "reduce k_devices or labels_per_device"
            )
        for d, shard in zip(owners[cls], np.array_split(members, len(owners[cls]))):
            per_device[d].append(shard)

    return DevicePartition(tuple(np.sort(np.concatenate(shards)) for shards in per_device))


def split_by_labels(ds: LabeledDataset, label_sets: Sequence[frozenset[int]]) -> list[np.ndarray]:
    """Per-device test indices: every sample whose label the device trains on."""
    return [np.flatnonzero(np.isin(ds.labels, sorted(labels))) for labels in label_sets]
