"""Per-worker rehearsal buffer: one bounded slot array per class.

Candidates are drawn from each incoming mini-batch without replacement and
either appended to their class's slot array or, once it is full, written over
a uniformly chosen resident slot. Classes never compete for each other's
slots, so in a class-incremental run old classes are never evicted.
"""

from __future__ import annotations

import enum
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from drbuf.core import MiniBatch, Sample, per_class_capacity


class RWLock:
    """Many concurrent readers or one writer. Writers are preferred once waiting."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0

    def acquire_read(self):
        with self._cond:
            while self._writer or self._waiting_writers:
                self._cond.wait()
            self._readers += 1

    def release_read(self):
        with self._cond:
            self._readers -= 1
            if not self._readers:
                self._cond.notify_all()

    def acquire_write(self):
        with self._cond:
            self._waiting_writers += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting_writers -= 1
            self._writer = True

    def release_write(self):
        with self._cond:
            self._writer = False
            self._cond.notify_all()

    class _Guard:
        def __init__(self, enter, leave):
            self._enter, self._leave = enter, leave

        def __enter__(self):
            self._enter()

        def __exit__(self, *exc):
            self._leave()

    def read(self):
        return self._Guard(self.acquire_read, self.release_read)

    def write(self):
        return self._Guard(self.acquire_write, self.release_write)


class ReadFlag(enum.IntEnum):
    EXACT = 0
    SUBSTITUTED = 1
    EMPTY = 2


class SlotRead(NamedTuple):
    class_id: int
    flag: ReadFlag
    sample: Sample | None

    @property
    def substituted(self) -> bool:
        return self.flag == ReadFlag.SUBSTITUTED


class SizeSnapshot(NamedTuple):
    occupancy: np.ndarray
    version: int

    @property
    def total(self) -> int:
        return int(self.occupancy.sum())

    def as_dict(self) -> dict[int, int]:
        return {int(i): int(n) for i, n in enumerate(self.occupancy) if n}


@dataclass
class InsertionReport:
    appends: Counter = field(default_factory=Counter)
    replacements: Counter = field(default_factory=Counter)
    # (class_id, slot) for every overwritten slot, in insertion order.
    replaced_slots: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    @property
    def n_appends(self) -> int:
        return sum(self.appends.values())

    @property
    def n_replacements(self) -> int:
        return sum(self.replacements.values())


class ClassBuffer:
    """Slot array for a single class."""

    def __init__(self, class_id: int, capacity: int, feature_dim: int):
        self.class_id = class_id
        self.capacity = capacity
        self.features = np.zeros((capacity, feature_dim), dtype=np.float32)
        self.labels = np.full(capacity, -1, dtype=np.int64)
        self.occupancy = 0
        self.lock = RWLock()

    def read(self, slot: int) -> Sample:
        with self.lock.read():
            return Sample(self.features[slot].copy(), int(self.labels[slot]))


class LocalRehearsalBuffer:
    """Rehearsal buffer owned by one worker.

    ``capacity`` is the per-worker sample budget; each class gets
    ``capacity // n_classes`` slots. Thread-safe: one writer thread plus any
    number of readers (local sampling and RPC handlers).
    """

    def __init__(
        self,
        n_classes: int,
        capacity: int,
        feature_dim: int,
        candidate_count: int,
        substitution_rng: np.random.Generator | None = None,
        record_log: bool = False,
    ):
        self.n_classes = n_classes
        self.capacity = capacity
        self.class_capacity = per_class_capacity(capacity, n_classes)
        self.feature_dim = feature_dim
        self.candidate_count = candidate_count
        self._classes: dict[int, ClassBuffer] = {}
        self._occupancy = np.zeros(n_classes, dtype=np.int64)
        self._version = 0
        self._meta = threading.Lock()
        self._sub_rng = substitution_rng or np.random.default_rng()
        self._sub_lock = threading.Lock()
        self.cross_class_evictions = 0
        self.mutation_log: list[tuple[int, int, int, str]] | None = [] if record_log else None

    @property
    def version(self) -> int:
        return self._version

    def __len__(self) -> int:
        return int(self._occupancy.sum())

    def present_classes(self) -> set[int]:
        with self._meta:
            return {int(i) for i in np.flatnonzero(self._occupancy)}

    def _class(self, class_id: int) -> ClassBuffer:
        cb = self._classes.get(class_id)
        if cb is None:
            cb = self._classes[class_id] = ClassBuffer(
                class_id, self.class_capacity, self.feature_dim
            )
        return cb

    def update_buffer(
        self,
        batch: MiniBatch,
        rng: np.random.Generator,
        eviction_rng: np.random.Generator | None = None,
    ) -> InsertionReport:
        """Insert ``min(c, len(batch))`` random candidates from ``batch``."""
        eviction_rng = eviction_rng or rng
        report = InsertionReport()
        n = len(batch)
        k = min(self.candidate_count, n)
        if k == 0:
            return report
        if np.any(batch.labels >= self.n_classes) or np.any(batch.labels < 0):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        chosen = rng.choice(n, size=k, replace=False)
        for idx in chosen:
            label = int(batch.labels[idx])
            self._insert(label, batch.features[idx], eviction_rng, report)
            report.candidates.append(int(idx))
        return report

    def _insert(self, label: int, features: np.ndarray, eviction_rng, report: InsertionReport):
        cb = self._class(label)
        with cb.lock.write():
            if cb.occupancy < cb.capacity:
                slot = cb.occupancy
                kind = "append"
            else:
                slot = int(eviction_rng.integers(cb.capacity))
                kind = "replace"
                if cb.labels[slot] != label:
                    self.cross_class_evictions += 1
            cb.features[slot] = features
            cb.labels[slot] = label
            with self._meta:
                if kind == "append":
                    cb.occupancy += 1
                    self._occupancy[label] += 1
                self._version += 1
                if self.mutation_log is not None:
                    self.mutation_log.append((self._version, label, slot, kind))
        if kind == "append":
            report.appends[label] += 1
        else:
            report.replacements[label] += 1
            report.replaced_slots.append((label, slot))

    def insert_sample(self, sample: Sample, eviction_rng: np.random.Generator) -> InsertionReport:
        """Insert one sample unconditionally (bypasses candidate selection)."""
        report = InsertionReport()
        self._insert(sample.label, sample.features, eviction_rng, report)
        return report

    def size_snapshot(self) -> SizeSnapshot:
        with self._meta:
            return SizeSnapshot(self._occupancy.copy(), self._version)

    def read_slots(self, requests: Sequence[tuple[int, int]]) -> list[SlotRead]:
        out = []
        for class_id, slot in requests:
            class_id, slot = int(class_id), int(slot)
            cb = self._classes.get(class_id)
            if cb is not None and 0 <= slot < cb.occupancy:
                out.append(SlotRead(class_id, ReadFlag.EXACT, cb.read(slot)))
                continue
            out.append(self._substitute(class_id, cb))
        return out

    def _substitute(self, class_id: int, cb: ClassBuffer | None) -> SlotRead:
        with self._sub_lock:
            if cb is not None and cb.occupancy > 0:
                slot = int(self._sub_rng.integers(cb.occupancy))
                return SlotRead(class_id, ReadFlag.SUBSTITUTED, cb.read(slot))
            snap = self.size_snapshot()
            total = snap.total
            if total == 0:
                return SlotRead(class_id, ReadFlag.EMPTY, None)
            flat = int(self._sub_rng.integers(total))
        cum = np.cumsum(snap.occupancy)
        other = int(np.searchsorted(cum, flat, side="right"))
        slot = flat - (int(cum[other - 1]) if other else 0)
        return SlotRead(class_id, ReadFlag.SUBSTITUTED, self._classes[other].read(slot))

    def contents(self) -> dict[int, np.ndarray]:
        """Copy of every class's occupied slot features (for tests and replay checks)."""
        out = {}
        for cid, cb in sorted(self._classes.items()):
            with cb.lock.read():
                out[cid] = cb.features[: cb.occupancy].copy()
        return out
