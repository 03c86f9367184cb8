"""Data-parallel training of a small classifier, plus the three scenario modes."""

from __future__ import annotations

import hashlib
import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from drbuf.buffer import LocalRehearsalBuffer
from drbuf.core import MiniBatch, Mode, Purpose, RngStreams, RunConfig, parse_address
from drbuf.engine import RehearsalEngine
from drbuf.metrics import AccuracyMatrix, BreakdownRecord, MetricsLog
from drbuf.sampler import GlobalSampler, SizeTable, augment
from drbuf.scenario import Dataset, TaskSchedule, n_batches_per_epoch, shard
from drbuf.transport import Collective, Rendezvous, Server, Transport, TransportError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class MLP:
    """Two-layer perceptron (ReLU hidden layer) with a fixed K-way softmax head.

    All parameters live in one flat float32 vector; ``W1``, ``b1``, ``W2`` and
    ``b2`` are views into it, so gradients can be all-reduced in one piece.
    """

    def __init__(self, in_dim: int, hidden: int, n_classes: int):
        self.in_dim, self.hidden, self.n_classes = in_dim, hidden, n_classes
        self.shapes = {
            "W1": (in_dim, hidden),
            "b1": (hidden,),
            "W2": (hidden, n_classes),
            "b2": (n_classes,),
        }
        self.slices: dict[str, slice] = {}
        off = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.slices[name] = slice(off, off + n)
            off += n
        self.params = np.zeros(off, dtype=np.float32)

    @property
    def n_params(self) -> int:
        return self.params.size

    def view(self, name: str, flat: np.ndarray | None = None) -> np.ndarray:
        flat = self.params if flat is None else flat
        return flat[self.slices[name]].reshape(self.shapes[name])

    W1 = property(lambda self: self.view("W1"))
    b1 = property(lambda self: self.view("b1"))
    W2 = property(lambda self: self.view("W2"))
    b2 = property(lambda self: self.view("b2"))

    def initialize(self, rng: np.random.Generator) -> "MLP":
        self.params[:] = 0
        self.W1[...] = rng.standard_normal(self.shapes["W1"]) * np.sqrt(2.0 / self.in_dim)
        self.W2[...] = rng.standard_normal(self.shapes["W2"]) * np.sqrt(1.0 / self.hidden)
        return self

    def copy(self) -> "MLP":
        other = MLP(self.in_dim, self.hidden, self.n_classes)
        other.params[:] = self.params
        return other

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.maximum(x @ self.W1 + self.b1, 0)
        return h @ self.W2 + self.b2

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return self.loss_and_grad(x, y, need_grad=False)[0]

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray, need_grad: bool = True):
        """Mean cross-entropy over the batch and its gradient (flat float32)."""
        n = len(y)
        grad = np.zeros_like(self.params)
        if n == 0:
            return 0.0, grad
        x = np.asarray(x, dtype=np.float32)
        pre = x @ self.W1 + self.b1
        h = np.maximum(pre, 0)
        z = h @ self.W2 + self.b2
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        denom = ez.sum(axis=1, keepdims=True)
        logp = z - np.log(denom)
        loss = float(-logp[np.arange(n), y].mean())
        if not need_grad:
            return loss, grad
        dz = ez / denom
        dz[np.arange(n), y] -= 1
        dz /= n
        self.view("W2", grad)[...] = h.T @ dz
        self.view("b2", grad)[...] = dz.sum(axis=0)
        dh = dz @ self.W2.T
        dh[pre <= 0] = 0
        self.view("W1", grad)[...] = x.T @ dh
        self.view("b1", grad)[...] = dh.sum(axis=0)
        return loss, grad

    def digest(self) -> str:
        return hashlib.blake2b(self.params.tobytes(), digest_size=8).hexdigest()


@dataclass
class LrSchedule:
    """Per-task schedule: linear warmup, then piecewise-constant multipliers.

    The target rate is ``base * n_workers`` under linear scaling; warmup ramps
    from ``base`` to the target over ``warmup_epochs``. A milestone ``e: m``
    sets the multiplier to ``m`` from epoch ``e`` (0-based, within the task)
    until the next milestone. The result never exceeds ``cap``.
    """

    base: float
    warmup_epochs: int = 0
    milestones: Mapping[int, float] = field(default_factory=dict)
    linear_scaling: bool = False
    n_workers: int = 1
    cap: float = float("inf")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LrSchedule":
        return cls(cfg.base_lr, cfg.warmup_epochs, dict(cfg.milestones), cfg.linear_scaling,
                   cfg.n_workers, cfg.lr_cap)

    def rate(self, epoch: int, progress: float = 0.0) -> float:
        target = self.base * (self.n_workers if self.linear_scaling else 1)
        if self.warmup_epochs and epoch < self.warmup_epochs:
            frac = min((epoch + progress) / self.warmup_epochs, 1.0)
            lr = self.base + (target - self.base) * frac
        else:
            lr = target
        mult = 1.0
        for e in sorted(self.milestones):
            if epoch >= e:
                mult = self.milestones[e]
        return min(self.cap, lr * mult)


class SGD:
    def __init__(self, n_params: int, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = np.float32(momentum)
        self.weight_decay = np.float32(weight_decay)
        self.velocity = np.zeros(n_params, dtype=np.float32) if momentum else None

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float):
        if self.weight_decay:
            grad = grad + self.weight_decay * params
        if self.velocity is not None:
            self.velocity *= self.momentum
            self.velocity += grad
            grad = self.velocity
        params -= np.float32(lr) * grad


def train_step(
    model: MLP,
    batch: MiniBatch,
    lr: float,
    optimizer: SGD | None = None,
    collective: Collective | None = None,
    iteration: int = 0,
) -> float:
    """One synchronous data-parallel SGD step; returns the global mean loss.

    Each worker contributes ``n_local * grad`` and ``n_local`` so the averaged
    gradient is the mean over the union of all workers' samples, exactly the
    plain mean when local batches have equal sizes.
    """
    loss, grad = model.loss_and_grad(batch.features, batch.labels)
    n = np.float32(len(batch))
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise TrainingError(f"non-finite loss/gradient at iteration {iteration} (loss={loss})")
    vec = np.empty(model.n_params + 2, dtype=np.float32)
    vec[:-2] = grad * n
    vec[-2] = np.float32(loss) * n
    vec[-1] = n
    if collective is not None:
        vec = collective.allreduce(vec)
    total = vec[-1]
    if total <= 0:
        return 0.0
    mean_grad = vec[:-2] / total
    if not np.all(np.isfinite(mean_grad)):
        raise TrainingError(f"non-finite averaged gradient at iteration {iteration}")
    (optimizer or SGD(model.n_params)).step(model.params, mean_grad, lr)
    return float(vec[-2] / total)


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label is among the k largest logits (ties go to lower class ids)."""
    labels = np.asarray(labels, dtype=np.int64)
    true = logits[np.arange(len(labels)), labels][:, None]
    classes = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (classes < labels[:, None])).sum(axis=1)
    return rank < k


def evaluate(model: MLP, data: Dataset, k: int = 1) -> float:
    if not 1 <= k <= model.n_classes:
        raise ValueError(f"k={k} outside [1, {model.n_classes}]")
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    return float(topk_correct(model.logits(data.features), data.labels, k).mean())


# -- worker wiring --------------------------------------------------------------


def wait_for_listener(address: str, timeout: float) -> None:
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout
    while True:
        try:
            socket.create_connection((host, port), timeout=1.0).close()
            return
        except OSError as exc:
            if time.monotonic() > deadline:
                raise TransportError(f"worker at {address} never came up: {exc}") from exc
            time.sleep(0.05)


class Node:
    """Networking for one worker: listener, peer clients and the collective."""

    def __init__(self, rank: int, cfg: RunConfig):
        self.rank = rank
        self.cfg = cfg
        self.n = cfg.n_workers
        self.server: Server | None = None
        self.transport: Transport | None = None
        self.rendezvous: Rendezvous | None = None
        self.collective = Collective(rank, 1, None, None)

    def start(self, buffer: LocalRehearsalBuffer | None = None, table: SizeTable | None = None) -> "Node":
        if self.n == 1:
            return self
        cfg = self.cfg
        if len(cfg.roster) != self.n:
            raise TransportError(f"roster has {len(cfg.roster)} entries for {self.n} workers")
        if self.rank == 0:
            self.rendezvous = Rendezvous(self.n, cfg.collective_timeout)
        on_size = None
        if table is not None:
            on_size = lambda msg: table.merge(msg.worker, msg.version, msg.occupancy)  # noqa: E731
        self.server = Server(cfg.roster[self.rank], buffer, self.rank, self.rendezvous, on_size,
                             max_workers=max(4, self.n))
        self.server.start()
        self.transport = Transport(self.rank, cfg.roster, cfg.rpc_timeout, cfg.rpc_retries)
        self.collective = Collective(self.rank, self.n, self.transport, self.rendezvous,
                                     cfg.collective_timeout)
        peers = range(self.n) if buffer is not None else ([0] if self.rank else [])
        for p in peers:
            if p != self.rank:
                wait_for_listener(cfg.roster[p], cfg.collective_timeout)
        self.collective.barrier()
        return self

    def close(self):
        if self.n == 1:
            return
        try:
            self.collective.barrier()
        finally:
            if self.transport is not None:
                self.transport.close()
            if self.server is not None:
                self.server.stop()


@dataclass
class ScenarioResult:
    model: MLP
    log: MetricsLog
    buffer: LocalRehearsalBuffer | None = None
    table: SizeTable | None = None


def shared_rng(seed: int, purpose: Purpose, *extra: int) -> np.random.Generator:
    """A stream every worker derives identically (worker id fixed at 0)."""
    return RngStreams.make(seed, 0, purpose, *extra)


def run_scenario(
    cfg: RunConfig,
    schedule: TaskSchedule,
    dataset: Dataset,
    rank: int = 0,
    mode: Mode | str | None = None,
    on_step: Callable[[int, MLP], None] | None = None,
) -> ScenarioResult:
    """Train through every task of ``schedule`` in the given mode and evaluate.

    After task ``i`` the model is scored on the eval split of every task
    ``j <= i``; rows of the accuracy matrix are 1-based.
    """
    mode = Mode(mode or cfg.mode)
    cfg.validate()
    dataset.ensure_split(cfg.rng_seed)
    n, T, E, b = cfg.n_workers, len(schedule), schedule.epochs_per_task, cfg.batch_size
    k = cfg.resolve_top_k()
    rngs = RngStreams(cfg.rng_seed, rank)
    train_all = dataset.subset(range(dataset.n_classes), train=True)
    evals = [dataset.subset(task, train=False) for task in schedule.tasks]

    model = MLP(dataset.feature_dim, cfg.hidden_dim, dataset.n_classes)
    model.initialize(shared_rng(cfg.rng_seed, Purpose.MODEL_INIT, 0))
    sched = LrSchedule.from_config(cfg)
    opt = SGD(model.n_params, cfg.momentum, cfg.weight_decay)

    buffer = table = engine = None
    if mode is Mode.REHEARSAL:
        s_max = cfg.resolve_capacity(len(train_all))
        buffer = LocalRehearsalBuffer(dataset.n_classes, s_max, dataset.feature_dim, cfg.candidate_count,
                                      substitution_rng=rngs.get(Purpose.SUBSTITUTION))
        table = SizeTable(n, dataset.n_classes, rank)
    node = Node(rank, cfg).start(buffer, table)
    if mode is Mode.REHEARSAL:
        sampler = GlobalSampler(rank, table, buffer, node.transport, rngs.get(Purpose.GLOBAL_SAMPLING),
                                retries=cfg.rpc_retries, timeout=cfg.rpc_timeout)
        engine = RehearsalEngine(buffer, sampler, cfg.rep_count, rngs.get(Purpose.CANDIDATE_SELECTION),
                                 rngs.get(Purpose.EVICTION)).start()

    acc = AccuracyMatrix(T)
    acc5 = AccuracyMatrix(T)
    records: list[BreakdownRecord] = []
    digests: list[str] = []
    counters = {"lost_classes": 0}
    task_times = []
    train_time = 0.0
    task_epochs = 0
    iteration = 0
    present_before: set[int] = set()
    wall0 = time.perf_counter()
    try:
        for t, classes in enumerate(schedule.tasks):
            if mode is Mode.FROM_SCRATCH:
                data = train_all.subset(schedule.classes_up_to(t))
                if t:
                    model.initialize(shared_rng(cfg.rng_seed, Purpose.MODEL_INIT, t))
                    opt = SGD(model.n_params, cfg.momentum, cfg.weight_decay)
            else:
                data = train_all.subset(classes)
            n_batches = n_batches_per_epoch(len(data), n, b)
            task_t0 = time.perf_counter()
            for epoch in range(E):
                batches = shard(data, rank, n, t * 100_000 + epoch, cfg.rng_seed, b)
                for bi in range(n_batches):
                    t0 = time.perf_counter()
                    m = next(batches)
                    t1 = time.perf_counter()
                    wait = 0.0
                    if engine is not None:
                        reps = engine.update(m)
                        wait = engine.state.waits[-1]
                        m = augment(m, reps)
                    t2 = time.perf_counter()
                    train_step(model, m, sched.rate(epoch, bi / n_batches), opt, node.collective, iteration)
                    t3 = time.perf_counter()
                    records.append(BreakdownRecord(iteration, rank, load=t1 - t0, train=t3 - t2, wait=wait))
                    if cfg.check_replicas:
                        digests.append(model.digest())
                    if on_step is not None:
                        on_step(iteration, model)
                    iteration += 1
            elapsed = time.perf_counter() - task_t0
            train_time += elapsed
            task_times.append(elapsed)
            task_epochs += E * (t + 1 if mode is Mode.FROM_SCRATCH else 1)

            for j in range(t + 1):
                logits = model.logits(evals[j].features)
                acc.set(t + 1, j + 1, float(topk_correct(logits, evals[j].labels, k).mean()))
                acc5.set(t + 1, j + 1, float(topk_correct(logits, evals[j].labels, min(5, dataset.n_classes)).mean()))

            if buffer is not None:
                present = buffer.present_classes()
                counters["lost_classes"] += len(present_before - present)
                present_before = present
                if node.transport is not None:
                    node.transport.broadcast_sizes(buffer.size_snapshot())
    finally:
        if engine is not None:
            engine.shutdown()
        node.close()

    if engine is not None:
        for rec, rnd in zip(records, engine.state.rounds):
            rec.populate_buffer = rnd.populate
            rec.augment_batch = rnd.augment
        counters["cross_class_evictions"] = buffer.cross_class_evictions
        if cfg.candidate_count:
            counters["classes_missing"] = dataset.n_classes - len(buffer.present_classes())

    metrics = MetricsLog(
        mode=mode.value, n_workers=n, n_tasks=T, top_k=k, accuracy=acc, accuracy_top5=acc5,
        breakdown=records, config=cfg.to_mapping(), counters=counters,
        totals={
            "train_time": train_time,
            "wall_time": time.perf_counter() - wall0,
            "task_epochs": task_epochs,
            "iterations": iteration,
            "wait_time": engine.wait_time if engine else 0.0,
            "final_digest": model.digest(),
        },
        task_times=task_times, replica_digests=digests,
    )
    return ScenarioResult(model, metrics, buffer, table)
