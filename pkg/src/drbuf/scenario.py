"""Class-incremental scenarios and dataset ingestion.

Dataset file layout (little-endian)::

    magic "DRDS" | version u16 | sample_count u64 | feature_dim u32 | class_count u32
    sample_count x (feature_dim x f32, label u32)

An optional sidecar ``<path>.split`` holds one byte per record, 1 for
training and 0 for evaluation.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from drbuf.core import ConfigError, MiniBatch, ceil_div

DS_MAGIC = b"DRDS"
DS_VERSION = 1
DS_HEADER = struct.Struct("<4sHQII")
TRAIN_FRACTION = 0.8


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[tuple[int, ...], ...]
    epochs_per_task: int = 1

    def __len__(self):
        return len(self.tasks)

    @property
    def n_classes(self) -> int:
        return sum(len(t) for t in self.tasks)

    def classes_up_to(self, t: int) -> tuple[int, ...]:
        """Classes of tasks 0..t inclusive."""
        return tuple(c for task in self.tasks[: t + 1] for c in task)

    def task_of(self, class_id: int) -> int:
        for t, task in enumerate(self.tasks):
            if class_id in task:
                return t
        raise KeyError(class_id)


def make_schedule(
    n_classes: int, n_tasks: int, seed: int, epochs_per_task: int = 1, allow_uneven: bool = False
) -> TaskSchedule:
    """Permute the classes with ``seed`` and cut them into ``n_tasks`` chunks.

    With ``allow_uneven`` a non-divisible split yields chunk sizes that differ
    by at most one, ordered by :func:`chunk_sizes`.
    """
    if n_tasks < 1 or n_classes < n_tasks:
        raise ConfigError(f"cannot split {n_classes} classes into {n_tasks} tasks")
    if n_classes % n_tasks and not allow_uneven:
        raise ConfigError(f"{n_tasks} tasks do not divide {n_classes} classes")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5C3E,))))
    perm = rng.permutation(n_classes).tolist()
    tasks, start = [], 0
    for size in chunk_sizes(n_classes, n_tasks):
        tasks.append(tuple(int(c) for c in perm[start : start + size]))
        start += size
    return TaskSchedule(tuple(tasks), epochs_per_task)


def chunk_sizes(n_classes: int, n_tasks: int) -> list[int]:
    """Near-equal task sizes placed so the cumulative class count matches an even split.

    Retraining on every class seen so far costs sum of prefix sizes; an even
    split gives (T + 1) / 2 times the single-pass cost. Where the larger
    chunks go is chosen to land as close to that as possible (a palindromic
    layout hits it exactly), earliest placement winning ties.
    """
    q, r = divmod(n_classes, n_tasks)
    if r == 0:
        return [q] * n_tasks
    target = (n_tasks + 1) / 2 * n_classes

    def cost(positions):
        sizes = [q + (t in positions) for t in range(n_tasks)]
        return abs(sum(itertools.accumulate(sizes)) - target)

    if math.comb(n_tasks, r) <= 20_000:
        best = min(itertools.combinations(range(n_tasks), r), key=cost)
    else:
        ends = [t for pair in zip(range(n_tasks), reversed(range(n_tasks))) for t in pair]
        best = tuple(dict.fromkeys(ends))[:r]
    return [q + (t in best) for t in range(n_tasks)]


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DatasetError("features must be (n, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def ensure_split(self, seed: int = 0) -> "Dataset":
        """Attach a per-class 80/20 split if none is present."""
        if self.train_mask is None:
            rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5B17,))))
            self.train_mask = _split_mask(self.labels, self.n_classes, rng)
        return self

    def subset(self, classes: Sequence[int], train: bool | None = None) -> "Dataset":
        keep = np.isin(self.labels, np.asarray(classes, dtype=np.int64))
        if train is not None:
            if self.train_mask is None:
                raise DatasetError("dataset has no train/eval split")
            keep &= self.train_mask == train
        mask = None if self.train_mask is None else self.train_mask[keep]
        return Dataset(self.features[keep], self.labels[keep], self.n_classes, mask)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise DatasetError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            parts[0].n_classes,
        )


def _split_mask(labels: np.ndarray, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(len(labels), dtype=bool)
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        idx = rng.permutation(idx)
        mask[idx[: int(round(TRAIN_FRACTION * len(idx)))]] = True
    return mask


def _record_dtype(feature_dim: int) -> np.dtype:
    return np.dtype([("x", "<f4", (feature_dim,)), ("y", "<u4")])


def encode_dataset(ds: Dataset) -> bytes:
    header = DS_HEADER.pack(DS_MAGIC, DS_VERSION, len(ds), ds.feature_dim, ds.n_classes)
    rec = np.empty(len(ds), dtype=_record_dtype(ds.feature_dim))
    rec["x"] = ds.features
    rec["y"] = ds.labels
    return header + rec.tobytes()


def decode_dataset(data: bytes) -> Dataset:
    if len(data) < DS_HEADER.size:
        raise DatasetError(f"file too short for a header ({len(data)} bytes)")
    magic, version, count, dim, n_classes = DS_HEADER.unpack_from(data)
    if magic != DS_MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if version != DS_VERSION:
        raise DatasetError(f"unsupported dataset version {version}")
    dtype = _record_dtype(dim)
    expected = DS_HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise DatasetError(f"file is {len(data)} bytes, header implies {expected}")
    rec = np.frombuffer(data, dtype=dtype, offset=DS_HEADER.size, count=count)
    if count and rec["y"].max() >= n_classes:
        raise DatasetError(f"label {rec['y'].max()} >= class_count {n_classes}")
    return Dataset(rec["x"].reshape(count, dim).copy(), rec["y"].astype(np.int64), n_classes)


def write_dataset(path: str | Path, ds: Dataset) -> None:
    path = Path(path)
    path.write_bytes(encode_dataset(ds))
    if ds.train_mask is not None:
        Path(f"{path}.split").write_bytes(ds.train_mask.astype(np.uint8).tobytes())


def read_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    ds = decode_dataset(path.read_bytes())
    split = Path(f"{path}.split")
    if split.exists():
        mask = np.frombuffer(split.read_bytes(), dtype=np.uint8)
        if len(mask) != len(ds):
            raise DatasetError(f"{split} has {len(mask)} entries for {len(ds)} records")
        ds.train_mask = mask.astype(bool)
    return ds


def class_means(n_classes: int, feature_dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centres with every pairwise distance >= ``separation``."""
    if separation <= 0:
        raise ConfigError("separation must be positive")
    if feature_dim >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((feature_dim, n_classes)))
        # orthonormal columns scaled by s/sqrt(2) sit exactly s apart
        return (q.T * (separation / np.sqrt(2.0))).astype(np.float64)
    scale = separation * max(n_classes, 2) ** (1.0 / feature_dim) * 2
    while True:
        means = rng.uniform(-scale, scale, size=(n_classes, feature_dim))
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if np.all(d[np.triu_indices(n_classes, 1)] >= separation):
            return means
        scale *= 1.1


def synth_dataset(
    n_classes: int, per_class: int, feature_dim: int, separation: float, seed: int
) -> Dataset:
    """Gaussian blobs N(mu_i, I) with an 80/20 per-class train/eval split."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0xDA7A,))))
    means = class_means(n_classes, feature_dim, separation, rng)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    noise = rng.standard_normal((len(labels), feature_dim))
    features = (means[labels] + noise).astype(np.float32) if len(labels) else np.zeros((0, feature_dim), np.float32)
    mask = _split_mask(labels, n_classes, rng)
    return Dataset(features, labels, n_classes, mask)


def epoch_permutation(n: int, epoch: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0x5A4D, epoch))))
    return rng.permutation(n)


def n_batches_per_epoch(n: int, n_workers: int, batch_size: int) -> int:
    return ceil_div(ceil_div(n, n_workers), batch_size)


def shard(
    data: Dataset,
    worker_id: int,
    n_workers: int,
    epoch: int,
    seed: int,
    batch_size: int,
) -> Iterator[MiniBatch]:
    """This worker's mini-batches for one epoch.

    The permutation depends only on (seed, epoch), so all workers agree on it;
    worker ``w`` takes positions ``w, w+N, ...``. Every worker yields the same
    number of batches so data-parallel steps stay in lockstep: workers whose
    shard runs short get shorter (possibly empty) trailing batches.
    """
    if not 0 <= worker_id < n_workers:
        raise ValueError(f"worker_id {worker_id} outside [0, {n_workers})")
    perm = epoch_permutation(len(data), epoch, seed)
    mine = perm[worker_id::n_workers]
    for i in range(n_batches_per_epoch(len(data), n_workers, batch_size)):
        idx = mine[i * batch_size : (i + 1) * batch_size]
        yield MiniBatch(data.features[idx], data.labels[idx])
