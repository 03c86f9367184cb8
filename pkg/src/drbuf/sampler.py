"""Globally uniform sampling of representatives from the distributed buffer.

Every occupied slot of every worker is one cell of a flat index space; a plan
is a uniformly random subset of that space drawn without replacement, so each
stored sample is equally likely to be picked wherever it lives. Fetching
consolidates a plan into at most one request per remote owner.
"""

from __future__ import annotations

import logging
import threading
from collections import defaultdict
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from drbuf.buffer import LocalRehearsalBuffer, ReadFlag, SizeSnapshot
from drbuf.core import MiniBatch, Sample
from drbuf.transport import ProtocolError, SampleRequest, SampleResponse, Transport, TransportError

log = logging.getLogger(__name__)


class SizeTable:
    """Cached per-(worker, class) occupancy, refreshed by piggybacked replies."""

    def __init__(self, n_workers: int, n_classes: int, rank: int = 0):
        self.n_workers = n_workers
        self.n_classes = n_classes
        self.rank = rank
        self._occ = np.zeros((n_workers, n_classes), dtype=np.int64)
        self._versions = np.full(n_workers, -1, dtype=np.int64)
        self._lock = threading.Lock()

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]], rank: int = 0) -> "SizeTable":
        rows = np.asarray(rows, dtype=np.int64)
        table = cls(rows.shape[0], rows.shape[1], rank)
        for w, row in enumerate(rows):
            table.merge(w, 0, row)
        return table

    def merge(self, worker: int, version: int, occupancy: np.ndarray) -> bool:
        """Adopt ``occupancy`` if it is newer than what is cached for ``worker``."""
        occupancy = np.asarray(occupancy, dtype=np.int64)
        if occupancy.shape != (self.n_classes,):
            raise ValueError(f"occupancy vector of shape {occupancy.shape}, expected ({self.n_classes},)")
        if np.any(occupancy < 0):
            raise ValueError("occupancy must be nonnegative")
        with self._lock:
            if version <= self._versions[worker]:
                return False
            self._versions[worker] = version
            self._occ[worker] = occupancy
            return True

    def set_local(self, snapshot: SizeSnapshot):
        self.merge(self.rank, snapshot.version, snapshot.occupancy)

    def rows(self) -> np.ndarray:
        with self._lock:
            return self._occ.copy()

    def version(self, worker: int) -> int:
        with self._lock:
            return int(self._versions[worker])

    @property
    def total(self) -> int:
        with self._lock:
            return int(self._occ.sum())


@dataclass
class SamplingPlan:
    entries: list = field(default_factory=list)  # [(owner, class_id, slot)]

    def __len__(self):
        return len(self.entries)

    def by_owner(self) -> dict[int, list[tuple[int, int, int]]]:
        """owner -> [(plan position, class_id, slot)] in plan order."""
        groups: dict[int, list] = defaultdict(list)
        for pos, (owner, cid, slot) in enumerate(self.entries):
            groups[owner].append((pos, cid, slot))
        return dict(groups)

    def owners(self) -> set[int]:
        return {e[0] for e in self.entries}


def _locate(rows: np.ndarray, flat_idx: np.ndarray) -> list[tuple[int, int, int]]:
    n_classes = rows.shape[1]
    cum = np.cumsum(rows.ravel())
    cells = np.searchsorted(cum, flat_idx, side="right")
    before = np.where(cells > 0, cum[cells - 1], 0)
    out = []
    for cell, idx, b in zip(cells.tolist(), flat_idx.tolist(), before.tolist()):
        owner, cid = divmod(cell, n_classes)
        out.append((owner, cid, idx - b))
    return out


def plan(
    r: int,
    table: SizeTable | np.ndarray,
    rng: np.random.Generator,
    exclude_owners: Iterable[int] = (),
    taken: Iterable[tuple[int, int, int]] = (),
) -> SamplingPlan:
    """Pick ``min(r, total)`` distinct slots uniformly over the cached view.

    ``exclude_owners`` drops whole workers (e.g. unreachable ones) and
    ``taken`` removes slots already used this round, for re-planning.
    """
    rows = table.rows() if isinstance(table, SizeTable) else np.array(table, dtype=np.int64)
    exclude_owners = set(exclude_owners)
    for w in exclude_owners:
        rows[w] = 0
    taken = {(w, c, s) for w, c, s in taken if s < rows[w, c]}
    total = int(rows.sum())
    want = min(r, total - len(taken))
    if want <= 0:
        return SamplingPlan()
    draw = min(total, want + len(taken))
    idx = rng.choice(total, size=draw, replace=False)
    entries = [e for e in _locate(rows, idx) if e not in taken][:want]
    return SamplingPlan(entries)


@dataclass
class FetchStats:
    sample_req_frames: int = 0
    remote_owners: int = 0
    substituted: int = 0
    replanned: int = 0
    failed_peers: list = field(default_factory=list)


def fetch(
    sampling_plan: SamplingPlan,
    transport: Transport | None,
    local_buffer: LocalRehearsalBuffer,
    rank: int = 0,
    table: SizeTable | None = None,
    rng: np.random.Generator | None = None,
    retries: int = 1,
    timeout: float = 10.0,
    stats: FetchStats | None = None,
) -> list[Sample]:
    """Resolve a plan into samples, in plan order.

    Local slots are read directly; each remote owner gets one consolidated
    request, all in flight together. Entries of owners that stay unreachable
    are re-planned over the remaining reachable slots.
    """
    stats = stats if stats is not None else FetchStats()
    results: list[Sample | None] = [None] * len(sampling_plan)
    groups = sampling_plan.by_owner()
    pending = {}
    for owner, items in groups.items():
        req = [(cid, slot) for _, cid, slot in items]
        if owner == rank:
            for (pos, _, _), read in zip(items, local_buffer.read_slots(req)):
                if read.sample is not None:
                    results[pos] = read.sample
                    stats.substituted += read.flag == ReadFlag.SUBSTITUTED
            continue
        if transport is None:
            raise ValueError("plan references remote owners but no transport was given")
        pending[owner] = (items, SampleRequest(req), transport.send_request(owner, SampleRequest(req)))
        stats.sample_req_frames += 1
    stats.remote_owners += len(pending)

    failed = []
    for owner, (items, req, fut) in pending.items():
        resp = _await(fut, owner, req, transport, retries, timeout)
        if resp is None:
            failed.append(owner)
            continue
        if table is not None:
            table.merge(resp.worker, resp.version, resp.occupancy)
        if len(resp.entries) != len(items):
            raise ProtocolError(f"worker {owner} answered {len(resp.entries)} of {len(items)} entries")
        for (pos, _, _), entry in zip(items, resp.entries):
            sample = entry.to_sample()
            if sample is not None:
                results[pos] = sample
                stats.substituted += entry.flag == ReadFlag.SUBSTITUTED

    missing = [i for i, s in enumerate(results) if s is None]
    if missing and table is not None and rng is not None:
        stats.failed_peers.extend(failed)
        if failed:
            log.warning("workers %s unreachable; re-planning %d entries", failed, len(missing))
        replan = plan(len(missing), table, rng, exclude_owners=failed, taken=sampling_plan.entries)
        stats.replanned += len(replan)
        exclude = set(failed)
        if replan.owners() & exclude:
            raise AssertionError("re-plan selected an excluded owner")
        extra = fetch(replan, transport, local_buffer, rank, None, None, retries, timeout, stats)
        for pos, sample in zip(missing, extra):
            results[pos] = sample
    return [s for s in results if s is not None]


def _await(fut, owner, req, transport, retries, timeout) -> SampleResponse | None:
    for attempt in range(retries + 1):
        try:
            return fut.result(timeout)
        except (TransportError, FutureTimeout) as exc:
            log.info("request to worker %d failed (attempt %d): %s", owner, attempt + 1, exc)
            if attempt < retries:
                fut = transport.send_request(owner, req)
    return None


class AugmentedBatch(MiniBatch):
    """Incoming mini-batch followed by representatives; ``n_incoming`` marks the split."""

    def __init__(self, features, labels, n_incoming: int):
        super().__init__(features, labels)
        self.n_incoming = n_incoming

    @property
    def n_representatives(self) -> int:
        return len(self) - self.n_incoming


def augment(m: MiniBatch, reps: Sequence[Sample]) -> AugmentedBatch:
    if not reps:
        return AugmentedBatch(m.features.copy(), m.labels.copy(), len(m))
    rep_x = np.stack([s.features for s in reps]).astype(np.float32, copy=False)
    rep_y = np.array([s.label for s in reps], dtype=np.int64)
    return AugmentedBatch(
        np.concatenate([m.features, rep_x]), np.concatenate([m.labels, rep_y]), len(m)
    )


class GlobalSampler:
    """Bundles the state one worker needs for plan + fetch rounds."""

    def __init__(
        self,
        rank: int,
        table: SizeTable,
        buffer: LocalRehearsalBuffer,
        transport: Transport | None,
        rng: np.random.Generator,
        retries: int = 1,
        timeout: float = 10.0,
    ):
        self.rank = rank
        self.table = table
        self.buffer = buffer
        self.transport = transport
        self.rng = rng
        self.retries = retries
        self.timeout = timeout
        self.last_stats = FetchStats()
        self.last_owners: set[int] = set()

    def sample(self, r: int) -> list[Sample]:
        self.table.set_local(self.buffer.size_snapshot())
        p = plan(r, self.table, self.rng)
        self.last_owners = p.owners()
        self.last_stats = FetchStats()
        return fetch(p, self.transport, self.buffer, self.rank, self.table, self.rng,
                     self.retries, self.timeout, self.last_stats)

    def probe(self, peers: Iterable[int]):
        """Fire zero-slot requests; their piggybacked sizes refresh the table."""
        if self.transport is None:
            return
        for peer in peers:
            fut = self.transport.send_request(peer, SampleRequest([]))
            fut.add_done_callback(self._absorb)

    def _absorb(self, fut):
        try:
            resp = fut.result()
        except Exception:  # noqa: BLE001 - a failed probe only leaves the row stale
            return
        self.table.merge(resp.worker, resp.version, resp.occupancy)
