"""Asynchronous update primitive driving the rehearsal buffer.

``update(m)`` hands back the representatives gathered during the previous
call and queues, on one background thread, the insertion of ``m``'s
candidates followed by the next global sampling round. The training thread
only ever blocks waiting for that previous round.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import CancelledError, Future, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from drbuf.buffer import LocalRehearsalBuffer
from drbuf.core import MiniBatch, Sample
from drbuf.sampler import GlobalSampler
from drbuf.transport import Server

log = logging.getLogger(__name__)


class EngineError(RuntimeError):
    """The background pipeline died; ``__cause__`` holds the original error."""


class EngineUsageError(RuntimeError):
    pass


@dataclass
class RoundTiming:
    iteration: int
    populate: float = 0.0
    augment: float = 0.0
    n_reps: int = 0


@dataclass
class PipelineState:
    pending: Future | None = None
    iteration: int = 0
    wait_time: float = 0.0
    waits: list = field(default_factory=list)
    rounds: list = field(default_factory=list)


class RehearsalEngine:
    def __init__(
        self,
        buffer: LocalRehearsalBuffer,
        sampler: GlobalSampler,
        rep_count: int,
        candidate_rng: np.random.Generator,
        eviction_rng: np.random.Generator,
        server: Server | None = None,
        probe_sizes: bool = True,
    ):
        self.buffer = buffer
        self.sampler = sampler
        self.rep_count = rep_count
        self.candidate_rng = candidate_rng
        self.eviction_rng = eviction_rng
        self.server = server
        self.probe_sizes = probe_sizes
        self.state = PipelineState()
        self._pool: ThreadPoolExecutor | None = None
        self._started = False
        self._closed = False
        self._updates: list[Future] = []
        self._owns_server = False

    @property
    def wait_time(self) -> float:
        return self.state.wait_time

    def start(self) -> "RehearsalEngine":
        if self._started:
            raise EngineUsageError("engine already started")
        if self._closed:
            raise EngineUsageError("engine was shut down and cannot restart")
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="drbuf-pipeline")
        if self.server is not None and self.server._sock is None:
            self.server.start()
            self._owns_server = True
        self._started = True
        return self

    def update(self, m: MiniBatch) -> list[Sample]:
        if not self._started:
            raise EngineUsageError("update() before start()")
        if self._closed:
            raise EngineUsageError("update() after shutdown()")
        st = self.state
        reps: list[Sample] = []
        t0 = time.perf_counter()
        if st.pending is not None:
            try:
                reps = st.pending.result()
            except Exception as exc:
                self._closed = True
                raise EngineError(f"rehearsal pipeline failed at iteration {st.iteration}") from exc
        waited = time.perf_counter() - t0
        st.wait_time += waited
        st.waits.append(waited)

        timing = RoundTiming(st.iteration)
        st.rounds.append(timing)
        upd = self._pool.submit(self._populate, m, timing)
        self._updates = [f for f in self._updates if not f.done()] + [upd]
        st.pending = self._pool.submit(self._sample, timing, upd)
        st.iteration += 1
        return reps

    def _populate(self, m: MiniBatch, timing: RoundTiming):
        t0 = time.perf_counter()
        self.buffer.update_buffer(m, self.candidate_rng, self.eviction_rng)
        timing.populate = time.perf_counter() - t0

    def _sample(self, timing: RoundTiming, populated: Future) -> list[Sample]:
        populated.result()
        t0 = time.perf_counter()
        reps = self.sampler.sample(self.rep_count) if self.rep_count else []
        if self.probe_sizes and self.sampler.transport is not None:
            skip = self.sampler.last_owners | {self.sampler.rank}
            self.sampler.probe(w for w in range(self.sampler.table.n_workers) if w not in skip)
        timing.augment = time.perf_counter() - t0
        timing.n_reps = len(reps)
        return reps

    def drain(self):
        """Block until every queued buffer update has been applied."""
        for f in list(self._updates):
            f.result()
        if self.state.pending is not None:
            try:
                self.state.pending.result()
            except Exception:
                pass

    def shutdown(self, timeout: float = 30.0):
        if not self._started:
            raise EngineUsageError("shutdown() before start()")
        if self._closed and self._pool is None:
            return
        self._closed = True
        pending = self.state.pending
        if pending is not None and not pending.cancel():
            try:
                pending.result(timeout)
            except (CancelledError, Exception) as exc:  # noqa: BLE001
                log.debug("in-flight sampling ended with %r during shutdown", exc)
        for f in self._updates:
            if not f.cancelled():
                f.result(timeout)
        self._pool.shutdown(wait=True)
        self._pool = None
        if self._owns_server:
            self.server.stop()
