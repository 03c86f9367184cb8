"""End-to-end acceptance checks. Each test prints one PASS/FAIL line.

The forgetting and runtime checks share three 2-worker runs of a wide MLP
(about three minutes on one core); the wide model makes the per-iteration
training step expensive enough that buffer upkeep can hide behind it.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from drbuf.bench import LocalCluster, bias_test, filled_buffers, overlap_bench
from drbuf.buffer import LocalRehearsalBuffer, ReadFlag
from drbuf.cli import EXIT_OK, main
from drbuf.core import Purpose, RngStreams, Sample
from drbuf.metrics import read_summary
from drbuf.sampler import fetch, plan
from drbuf.scenario import synth_dataset
from drbuf.trainer import MLP
from drbuf.transport import (
    AllreduceChunk,
    MsgType,
    ResponseEntry,
    SampleRequest,
    SampleResponse,
    Shutdown,
    SizeBroadcast,
    decode_message,
    encode_message,
)

WIDE = ["--feature-dim", "1024", "--hidden-dim", "2048"]
SCENARIO = ["--n-classes", "10", "--n-tasks", "4", "--workers", "2", "--epochs-per-task", "10",
            "--buffer-fraction", "0.3", "--batch-size", "56", "--rep-count", "7", "--candidate-count", "14"]


def verdict(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {number} {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def launch(results, *flags):
    assert main(["run", "--spawn-local", *SCENARIO, *flags, "--results", str(results)]) == EXIT_OK
    summary = read_summary(results / "summary.txt")
    text = (results / "summary.txt").read_text()
    extra = dict(line.split(": ", 1) for line in text.splitlines() if ": " in line)
    ranks = [json.loads(p.read_text()) for p in sorted((results / "workers").glob("rank*.json"))]
    rows = {}
    for line in (results / "accuracy.csv").read_text().splitlines()[1:]:
        i, j, a, _ = line.split(",")
        rows[(int(i), int(j))] = float(a)
    return dict(summary, **extra, ranks=ranks, a=rows)


@pytest.fixture(scope="module")
def wide_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("wide")
    return {mode: launch(root / mode, "--mode", mode, *WIDE) for mode in ("incremental", "rehearsal", "from_scratch")}


def test_criterion_1_forgetting_and_ordering(wide_runs, capsys):
    inc, reh, scr = (float(wide_runs[m]["accuracy_T"]) for m in ("incremental", "rehearsal", "from_scratch"))
    a = wide_runs["incremental"]["a"]
    forgetting = a[(1, 1)] - a[(4, 1)]
    ok = reh >= inc + 0.20 and forgetting >= 0.30 and scr >= reh
    verdict(capsys, 1, "forgetting", ok,
            f"incremental {inc:.3f}, rehearsal {reh:.3f}, from-scratch {scr:.3f}; "
            f"incremental a11 {a[(1, 1)]:.3f} -> a41 {a[(4, 1)]:.3f} (drop {forgetting:.3f})")


def test_criterion_2_buffer_size_monotone(tmp_path, capsys):
    fractions = (0.025, 0.10, 0.30)
    acc = np.zeros((3, len(fractions)))
    for s, seed in enumerate((0, 1, 2)):
        for f, frac in enumerate(fractions):
            out = launch(tmp_path / f"s{seed}_{frac}", "--mode", "rehearsal", "--rng-seed", str(seed),
                         "--buffer-fraction", str(frac))
            acc[s, f] = float(out["accuracy_T"])
    mean = acc.mean(axis=0)
    ok = bool(np.all(np.diff(mean) >= -0.02))
    per_seed = "; ".join(" ".join(f"{v:.3f}" for v in row) for row in acc)
    verdict(capsys, 2, "buffer-size monotonicity", ok,
            f"mean accuracy_T at {fractions}: {' '.join(f'{m:.3f}' for m in mean)} (per seed: {per_seed})")


def test_criterion_3_runtime_shape(wide_runs, capsys):
    epochs = {m: int(wide_runs[m]["task_epochs"]) for m in wide_runs}
    times = {m: float(wide_runs[m]["max_train_time"]) for m in wide_runs}
    bookkeeping = epochs["from_scratch"] / epochs["incremental"]
    wall = times["from_scratch"] / times["incremental"]
    slowdown = times["rehearsal"] / times["incremental"]
    bound = 1 + 7 / 56 + 0.05
    ok = bookkeeping == 2.5 and abs(wall - 2.5) <= 0.2 * 2.5 and slowdown <= bound
    verdict(capsys, 3, "runtime shape", ok,
            f"epochs ratio {bookkeeping} ({epochs['from_scratch']}/{epochs['incremental']}), "
            f"wall ratio {wall:.3f}, rehearsal/incremental {slowdown:.3f} (bound {bound:.3f})")


def test_criterion_4_global_sampling_unbiased(capsys):
    parts, ok = [], True
    for n in (2, 4):
        res = bias_test(n_workers=n, fill=40, draws=100_000, r=7, seed=0, fetch_check=500)
        ok &= res.report.p_value > 0.01 and res.control.p_value < 1e-6
        ok &= res.fetch_mismatches == res.duplicate_plans == 0
        parts.append(f"{n} workers: p={res.report.p_value:.3f} over {res.n_slots} slots, "
                     f"control p={res.control.p_value:.2e}")
    verdict(capsys, 4, "sampling bias", ok, "; ".join(parts))


def test_criterion_5_overlap(capsys):
    rep = overlap_bench(train_cost_ms=50, iters=500, n_workers=2, stub="spin")
    ok = rep.iterations >= 500 and rep.cost_ratio >= 10 and rep.wait_fraction < 0.05
    verdict(capsys, 5, "overlap", ok,
            f"{rep.iterations} iterations, background {rep.mean_background_ms:.3f} ms "
            f"(train/background {rep.cost_ratio:.1f}x), mean wait {rep.mean_wait_ms:.4f} ms "
            f"= {100 * rep.wait_fraction:.3f}% of {rep.mean_iteration_ms:.2f} ms")


def test_criterion_6_replica_consistency(tmp_path, capsys):
    out = launch(tmp_path, "--mode", "rehearsal", "--workers", "4", "--check-replicas", "true")
    digests = [r["replica_digests"] for r in out["ranks"]]
    iterations = {r["totals"]["iterations"] for r in out["ranks"]}
    ok = (len(digests) == 4 and len(iterations) == 1 and all(len(d) == min(iterations) for d in digests)
          and all(d == digests[0] for d in digests) and out["replica_divergence"] == "0")
    verdict(capsys, 6, "replica consistency", ok,
            f"{len(digests)} ranks, {len(digests[0])} per-iteration digests compared, "
            f"divergent iterations {out['replica_divergence']}")


def float64_loss(model, flat, x, y):
    parts = {n: flat[model.slices[n]].reshape(model.shapes[n]) for n in model.slices}
    hidden = np.maximum(x @ parts["W1"] + parts["b1"], 0.0)
    z = hidden @ parts["W2"] + parts["b2"]
    z -= z.max(axis=1, keepdims=True)
    return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]))


def test_criterion_7_gradient_oracle(capsys):
    ds = synth_dataset(10, 8, 32, 4.0, seed=3)
    model = MLP(32, 128, 10).initialize(np.random.default_rng(3))
    rng = np.random.default_rng(7)
    model.b1[...] = rng.normal(0, 0.1, 128)
    x, y = ds.features[:56], ds.labels[:56]
    _, grad = model.loss_and_grad(x, y)
    base, x64 = model.params.astype(np.float64), x.astype(np.float64)
    step, worst, checked = 1e-3, {}, 0
    # the difference quotient is only an oracle where no ReLU input crosses
    # zero under a +-step nudge, so coordinates next to a kink are skipped
    pre = np.abs(x64 @ base[model.slices["W1"]].reshape(model.shapes["W1"]) + base[model.slices["b1"]])
    smooth = {
        "W1": (pre[:, None, :] > step * np.abs(x64)[:, :, None]).all(axis=0).ravel(),
        "b1": (pre > step).all(axis=0),
    }
    skipped = {n: int((~m).sum()) for n, m in smooth.items()}
    for name, sl in model.slices.items():
        allowed = np.arange(sl.start, sl.stop)[smooth.get(name, slice(None))]
        errs = []
        # 20 coordinates per tensor, or all of them for the 10-wide output bias
        for i in rng.choice(allowed, size=min(20, len(allowed)), replace=False):
            up, down = base.copy(), base.copy()
            up[i] += step
            down[i] -= step
            numeric = (float64_loss(model, up, x64, y) - float64_loss(model, down, x64, y)) / (2 * step)
            scale = max(abs(numeric), abs(float(grad[i])))
            errs.append(abs(numeric - grad[i]) / scale if scale > 1e-6 else abs(numeric - grad[i]))
            checked += 1
        worst[name] = max(errs)
    ok = checked == 70 and max(worst.values()) < 1e-3
    verdict(capsys, 7, "gradient oracle", ok,
            f"{checked} coordinates, max relative error " + ", ".join(f"{n} {e:.2e}" for n, e in worst.items())
            + f" (kink-adjacent coordinates excluded: W1 {skipped['W1']}, b1 {skipped['b1']})")


def test_criterion_8_eviction_invariants(wide_runs, capsys):
    run_counter = int(wide_runs["rehearsal"]["cross_class_evictions"])
    n_classes, per_class, trials = 10, 8, 100_000
    buf = LocalRehearsalBuffer(n_classes, n_classes * per_class, 2, candidate_count=1)
    rngs = RngStreams(8, 0)
    evict, pick = rngs.get(Purpose.EVICTION), np.random.default_rng(8)
    for c in range(n_classes):
        for _ in range(per_class):
            buf.insert_sample(Sample(np.zeros(2), c), evict)
    counts = np.zeros((n_classes, per_class), np.int64)
    wrong_class = 0
    for label in pick.integers(n_classes, size=trials):
        (cls, slot), = buf.insert_sample(Sample(np.ones(2), int(label)), evict).replaced_slots
        wrong_class += cls != label
        counts[cls, slot] += 1
    p = stats.chisquare(counts.ravel()).pvalue
    ok = run_counter == 0 and buf.cross_class_evictions == 0 and wrong_class == 0 and p > 0.01
    verdict(capsys, 8, "eviction invariants", ok,
            f"cross-class evictions: run {run_counter}, stress {buf.cross_class_evictions}; "
            f"per-slot eviction chi-square p={p:.3f} over {trials} trials")


def random_message(rng):
    kind = MsgType(int(rng.integers(1, 6)))
    u32 = lambda: int(rng.integers(0, 2**32))  # noqa: E731
    u63 = lambda: int(rng.integers(0, 2**63))  # noqa: E731
    bits = lambda n: rng.integers(0, 2**32, size=n, dtype=np.uint32).view(np.float32)  # noqa: E731
    if kind == MsgType.SAMPLE_REQ:
        return SampleRequest([(u32(), u32()) for _ in range(rng.integers(0, 30))])
    if kind == MsgType.SAMPLE_RESP:
        dim = int(rng.integers(0, 9))
        entries = []
        for _ in range(rng.integers(0, 8)):
            flag = ReadFlag(int(rng.choice([int(f) for f in ReadFlag])))
            entries.append(ResponseEntry(u32(), flag) if flag == ReadFlag.EMPTY
                           else ResponseEntry(u32(), flag, bits(dim), u32()))
        occ = rng.integers(0, 2**32, size=rng.integers(0, 12))
        return SampleResponse(u32(), u63(), occ, dim, entries)
    if kind == MsgType.SIZE_BCAST:
        return SizeBroadcast(u32(), u63(), rng.integers(0, 2**32, size=rng.integers(0, 12)))
    if kind == MsgType.ALLREDUCE_CHUNK:
        return AllreduceChunk(u63(), u32(), u32(), u32(), bits(int(rng.integers(0, 40))))
    return Shutdown()


def test_criterion_9_protocol_round_trip(capsys):
    rng = np.random.default_rng(9)
    failures, seen = 0, set()
    for _ in range(10_000):
        msg = random_message(rng)
        rid = int(rng.integers(0, 2**64, dtype=np.uint64))
        seen.add(msg.msg_type)
        frame = encode_message(msg, rid)
        back_rid, back = decode_message(frame)
        failures += not (back_rid == rid and back == msg and encode_message(back, rid) == frame)

    buffers = filled_buffers(4, 30, n_classes=5)
    violations, fetches = 0, 0
    with LocalCluster(buffers) as cluster:
        table = cluster.refresh(0)
        t = cluster.transports[0]
        prng = np.random.default_rng(10)
        for _ in range(300):
            p = plan(int(prng.integers(1, 12)), table, prng)
            before = t.frames_sent(MsgType.SAMPLE_REQ)
            fetch(p, t, buffers[0], 0, table)
            violations += t.frames_sent(MsgType.SAMPLE_REQ) - before != len(p.owners() - {0})
            fetches += 1
    ok = failures == 0 and len(seen) == 5 and violations == 0
    verdict(capsys, 9, "protocol round-trip", ok,
            f"10000 random messages over {len(seen)} types, {failures} mismatches; "
            f"{fetches} fetches, {violations} with frames != distinct remote owners")
