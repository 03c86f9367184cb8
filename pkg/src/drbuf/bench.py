"""In-process experiment drivers: sampling-bias test and overlap benchmark.

Both run real listeners on localhost ports, one per simulated worker, so the
wire protocol is exercised end to end.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from drbuf.buffer import LocalRehearsalBuffer
from drbuf.core import MiniBatch, Purpose, RngStreams, Sample
from drbuf.engine import RehearsalEngine
from drbuf.metrics import BiasReport, bias_report
from drbuf.sampler import GlobalSampler, SizeTable, fetch, plan
from drbuf.transport import MsgType, SampleRequest, Server, Transport


def free_ports(n: int, host: str = "127.0.0.1") -> list[str]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket()
            s.bind((host, 0))
            socks.append(s)
        return [f"{host}:{s.getsockname()[1]}" for s in socks]
    finally:
        for s in socks:
            s.close()


class LocalCluster:
    """N buffers, each behind its own listener, plus one transport per worker."""

    def __init__(self, buffers: list[LocalRehearsalBuffer], timeout: float = 10.0):
        self.buffers = buffers
        self.roster = free_ports(len(buffers))
        self.tables = [SizeTable(len(buffers), buffers[0].n_classes, w) for w in range(len(buffers))]
        self.servers = [
            Server(addr, buf, w, on_size=self._absorber(w)).start()
            for w, (addr, buf) in enumerate(zip(self.roster, buffers))
        ]
        self.transports = [Transport(w, self.roster, timeout) for w in range(len(buffers))]

    def _absorber(self, w):
        return lambda msg: self.tables[w].merge(msg.worker, msg.version, msg.occupancy)

    def refresh(self, rank: int) -> SizeTable:
        """Fill ``rank``'s size table with fresh zero-slot probes of every peer."""
        table = self.tables[rank]
        table.set_local(self.buffers[rank].size_snapshot())
        futs = [(p, self.transports[rank].send_request(p, SampleRequest([])))
                for p in range(len(self.buffers)) if p != rank]
        for _, fut in futs:
            resp = fut.result(10)
            table.merge(resp.worker, resp.version, resp.occupancy)
        return table

    def close(self):
        for t in self.transports:
            t.close()
        for s in self.servers:
            s.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def filled_buffers(n_workers: int, fill: int, n_classes: int = 10, feature_dim: int = 8,
                   seed: int = 0) -> list[LocalRehearsalBuffer]:
    """Buffers holding ``fill`` samples each; feature 0 carries a global sample id."""
    rng = np.random.default_rng(seed)
    out = []
    for w in range(n_workers):
        buf = LocalRehearsalBuffer(n_classes, max(fill, 1) * n_classes, feature_dim, candidate_count=1)
        labels = rng.integers(n_classes, size=fill)
        for i, label in enumerate(labels):
            x = rng.standard_normal(feature_dim).astype(np.float32)
            x[0] = w * fill + i
            buf.insert_sample(Sample(x, int(label)), rng)
        out.append(buf)
    return out


def slot_offsets(rows: np.ndarray) -> np.ndarray:
    """Flat index of slot 0 of every (worker, class) cell."""
    flat = rows.ravel()
    return (np.cumsum(flat) - flat).reshape(rows.shape)


@dataclass
class BiasTestResult:
    report: BiasReport
    control: BiasReport
    n_slots: int
    fetch_checked: int
    fetch_mismatches: int
    consolidation_violations: int
    duplicate_plans: int

    def format(self) -> str:
        return (
            "[global sampler]\n" + self.report.format()
            + "[local-only control]\n" + self.control.format()
            + f"slots: {self.n_slots}\n"
            f"fetch_checked: {self.fetch_checked}\n"
            f"fetch_mismatches: {self.fetch_mismatches}\n"
            f"consolidation_violations: {self.consolidation_violations}\n"
            f"duplicate_plans: {self.duplicate_plans}\n"
        )


def count_plans(rows: np.ndarray, r: int, draws: int, rng: np.random.Generator,
                local_only: int | None = None) -> tuple[np.ndarray, int]:
    """Per-slot selection counts over ``draws`` plans; also counts plans with duplicates."""
    offsets = slot_offsets(rows)
    view = rows.copy()
    if local_only is not None:
        mask = np.zeros(len(rows), bool)
        mask[local_only] = True
        view[~mask] = 0
    counts = np.zeros(int(rows.sum()), dtype=np.int64)
    dups = 0
    for _ in range(draws):
        p = plan(r, view, rng)
        if len(set(p.entries)) != len(p.entries):
            dups += 1
        for w, c, s in p.entries:
            counts[offsets[w, c] + s] += 1
    return counts, dups


def bias_test(n_workers: int = 2, fill: int = 40, draws: int = 100_000, r: int = 7,
              n_classes: int = 10, seed: int = 0, fetch_check: int = 500) -> BiasTestResult:
    buffers = filled_buffers(n_workers, fill, n_classes, seed=seed)
    with LocalCluster(buffers) as cluster:
        table = cluster.refresh(0)
        rows = table.rows()
        total = int(rows.sum())
        rng = RngStreams(seed, 0).get(Purpose.GLOBAL_SAMPLING)
        counts, dups = count_plans(rows, r, draws, rng)
        per_plan = min(r, total)
        report = bias_report(counts, draws=draws, r=per_plan)
        control_counts, _ = count_plans(rows, r, draws, RngStreams(seed, 0).get(Purpose.SUBSTITUTION),
                                        local_only=0)
        control = bias_report(control_counts, expected=control_counts.sum() / total, draws=draws)

        # spot-check that fetching a plan really returns the planned samples
        offsets = slot_offsets(rows)
        ids = np.empty(total, dtype=np.int64)
        for w, buf in enumerate(buffers):
            for c, feats in buf.contents().items():
                ids[offsets[w, c] : offsets[w, c] + len(feats)] = feats[:, 0].astype(np.int64)
        mismatches = violations = 0
        transport = cluster.transports[0]
        for _ in range(fetch_check):
            p = plan(r, rows, rng)
            before = transport.frames_sent(MsgType.SAMPLE_REQ)
            got = fetch(p, transport, buffers[0], rank=0)
            sent = transport.frames_sent(MsgType.SAMPLE_REQ) - before
            if sent != len(p.owners() - {0}):
                violations += 1
            want = [ids[offsets[w, c] + s] for w, c, s in p.entries]
            mismatches += sum(int(g.features[0]) != x for g, x in zip(got, want)) + abs(len(got) - len(want))
    return BiasTestResult(report, control, total, fetch_check, mismatches, violations, dups)


# -- overlap benchmark ----------------------------------------------------------


def spin(seconds: float, _work=np.ones((48, 48), np.float32)):
    """Busy-wait for ``seconds``; the numpy kernel releases the GIL between checks."""
    deadline = time.perf_counter() + seconds
    while time.perf_counter() < deadline:
        _work @ _work


@dataclass
class OverlapReport:
    train_cost_ms: float
    iterations: int
    n_workers: int
    mean_wait_ms: float
    mean_iteration_ms: float
    mean_background_ms: float
    waits_ms: list = field(default_factory=list, repr=False)

    @property
    def wait_fraction(self) -> float:
        return self.mean_wait_ms / self.mean_iteration_ms if self.mean_iteration_ms else 0.0

    @property
    def cost_ratio(self) -> float:
        return self.train_cost_ms / self.mean_background_ms if self.mean_background_ms else float("inf")

    def format(self) -> str:
        return (
            f"train_cost_ms: {self.train_cost_ms:.3f}\n"
            f"iterations: {self.iterations}\n"
            f"workers: {self.n_workers}\n"
            f"mean_wait_ms: {self.mean_wait_ms:.6f}\n"
            f"mean_iteration_ms: {self.mean_iteration_ms:.6f}\n"
            f"wait_fraction: {self.wait_fraction:.6f}\n"
            f"mean_background_ms: {self.mean_background_ms:.6f}\n"
            f"train_to_background_ratio: {self.cost_ratio:.3f}\n"
        )


def overlap_bench(train_cost_ms: float, iters: int, n_workers: int = 2, batch_size: int = 56,
                  r: int = 7, c: int = 14, n_classes: int = 10, feature_dim: int = 32,
                  capacity: int = 2000, seed: int = 0, stub: str = "spin") -> OverlapReport:
    """Drive ``update`` on every worker with a fake training step of fixed cost."""
    step = spin if stub == "spin" else time.sleep
    buffers = [LocalRehearsalBuffer(n_classes, capacity, feature_dim, c) for _ in range(n_workers)]
    results: list = [None] * n_workers
    errors: list = []
    with LocalCluster(buffers) as cluster:
        engines = []
        for w in range(n_workers):
            rngs = RngStreams(seed, w)
            sampler = GlobalSampler(w, cluster.tables[w], buffers[w], cluster.transports[w],
                                    rngs.get(Purpose.GLOBAL_SAMPLING))
            engines.append(RehearsalEngine(buffers[w], sampler, r, rngs.get(Purpose.CANDIDATE_SELECTION),
                                           rngs.get(Purpose.EVICTION)).start())
        barrier = threading.Barrier(n_workers)

        def loop(w):
            try:
                rng = np.random.default_rng(seed + w)
                batches = [MiniBatch(rng.standard_normal((batch_size, feature_dim)),
                                     rng.integers(n_classes, size=batch_size)) for _ in range(16)]
                barrier.wait()
                times = []
                for i in range(iters):
                    t0 = time.perf_counter()
                    engines[w].update(batches[i % len(batches)])
                    step(train_cost_ms / 1e3)
                    times.append(time.perf_counter() - t0)
                results[w] = times
            except Exception as exc:  # noqa: BLE001 - surfaced below
                errors.append(exc)

        threads = [threading.Thread(target=loop, args=(w,)) for w in range(n_workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for e in engines:
            e.shutdown()
    if errors:
        raise errors[0]
    waits = np.concatenate([e.state.waits for e in engines]) * 1e3
    iter_ms = np.concatenate(results) * 1e3
    bg = np.array([rd.populate + rd.augment for e in engines for rd in e.state.rounds]) * 1e3
    return OverlapReport(train_cost_ms, iters, n_workers, float(waits.mean()), float(iter_ms.mean()),
                         float(bg.mean()), waits.tolist())
