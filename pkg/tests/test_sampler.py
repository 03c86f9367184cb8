import math
import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from drbuf.bench import LocalCluster, count_plans, filled_buffers, free_ports
from drbuf.buffer import LocalRehearsalBuffer, SizeSnapshot
from drbuf.core import MiniBatch, Sample
from drbuf.sampler import FetchStats, GlobalSampler, SamplingPlan, SizeTable, augment, fetch, plan
from drbuf.transport import MsgType, Server, Transport


def hypergeom_pmf(k, pool, drawn, total):
    return math.comb(pool, k) * math.comb(total - pool, drawn - k) / math.comb(total, drawn)


def test_hypergeometric_owner_counts():
    table = SizeTable.from_rows([[10], [30]])
    p_all_w1 = math.comb(30, 4) / math.comb(40, 4)
    assert p_all_w1 == pytest.approx(0.2998, abs=1e-4)
    rng = np.random.default_rng(2024)
    trials = 100_000
    from_w1 = Counter()
    for _ in range(trials):
        p = plan(4, table, rng)
        from_w1[sum(owner == 1 for owner, _, _ in p.entries)] += 1
    for k in range(5):
        expected = hypergeom_pmf(k, 30, 4, 40)
        sigma = math.sqrt(trials * expected * (1 - expected))
        assert abs(from_w1[k] - trials * expected) < 3 * sigma, k
    assert hypergeom_pmf(4, 30, 4, 40) == pytest.approx(p_all_w1)


def test_plan_exhaustion_and_zero():
    table = SizeTable.from_rows([[2, 0], [1, 2]])
    p = plan(7, table, np.random.default_rng(0))
    assert sorted(p.entries) == [(0, 0, 0), (0, 0, 1), (1, 0, 0), (1, 1, 0), (1, 1, 1)]
    assert len(plan(0, table, np.random.default_rng(0))) == 0
    assert len(plan(7, SizeTable(3, 4), np.random.default_rng(0))) == 0


def test_plans_never_repeat_a_slot_and_stay_in_range():
    rows = np.array([[3, 0, 5], [0, 1, 2], [4, 4, 0]])
    rng = np.random.default_rng(1)
    for _ in range(5000):
        p = plan(7, rows, rng)
        assert len(p) == 7 and len(set(p.entries)) == 7
        assert all(s < rows[w, c] for w, c, s in p.entries)


def test_slot_level_uniformity_small():
    rows = np.array([[1, 6, 0], [9, 0, 3]])
    counts, dups = count_plans(rows, 4, 20_000, np.random.default_rng(7))
    assert dups == 0
    assert counts.sum() == 80_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_worker_uniform_sampling_would_be_detected():
    # picking a worker first then a slot overweights the small worker
    rows = np.array([[2, 0], [10, 8]])
    rng = np.random.default_rng(0)
    sizes = rows.sum(axis=1)
    counts = np.zeros(rows.sum(), np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    for _ in range(20_000):
        w = rng.integers(2)
        counts[offsets[w] + rng.integers(sizes[w])] += 1
    assert stats.chisquare(counts).pvalue < 1e-6


def test_replan_excludes_owners_and_taken_slots():
    rows = np.array([[2], [3], [4]])
    taken = [(0, 0, 0), (1, 0, 2)]
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = plan(3, rows, rng, exclude_owners=[2], taken=taken)
        assert len(p) == 3
        assert not set(p.entries) & set(taken)
        assert all(w != 2 for w, _, _ in p.entries)


def test_size_table_keeps_newest_version():
    t = SizeTable(2, 3, rank=0)
    assert t.merge(1, 5, np.array([1, 2, 3]))
    assert not t.merge(1, 4, np.array([9, 9, 9]))
    assert not t.merge(1, 5, np.array([9, 9, 9]))
    assert t.rows()[1].tolist() == [1, 2, 3]
    t.set_local(SizeSnapshot(np.array([0, 1, 0]), 2))
    assert t.total == 7 and t.version(0) == 2
    with pytest.raises(ValueError):
        t.merge(0, 9, np.array([1, -1, 0]))


def test_local_only_fetch_sends_nothing():
    buf = filled_buffers(1, 20)[0]
    table = SizeTable(1, 10)
    table.set_local(buf.size_snapshot())
    p = plan(7, table, np.random.default_rng(0))
    got = fetch(p, None, buf, rank=0)
    assert [int(s.features[0]) for s in got] == [
        int(buf.read_slots([(c, s)])[0].sample.features[0]) for _, c, s in p.entries
    ]


def test_remote_fetch_is_one_frame_per_owner_in_plan_order():
    buffers = filled_buffers(3, 30, n_classes=4)
    with LocalCluster(buffers) as cluster:
        table = cluster.refresh(0)
        rows = table.rows()
        w1 = [(1, c, s) for c in range(4) for s in range(rows[1, c])][:2]
        p = SamplingPlan([w1[0], (0, 0, 0), w1[1]])
        t = cluster.transports[0]
        before = t.frames_sent(MsgType.SAMPLE_REQ)
        got = fetch(p, t, buffers[0], rank=0, table=table)
        assert t.frames_sent(MsgType.SAMPLE_REQ) - before == 1
        want = [buffers[w].read_slots([(c, s)])[0].sample for w, c, s in p.entries]
        assert got == want
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = plan(7, table, rng)
            before = t.frames_sent(MsgType.SAMPLE_REQ)
            fetch(p, t, buffers[0], rank=0, table=table)
            assert t.frames_sent(MsgType.SAMPLE_REQ) - before == len(p.owners() - {0})


def test_piggybacked_sizes_refresh_the_table():
    buffers = filled_buffers(2, 10, n_classes=2)
    with LocalCluster(buffers) as cluster:
        table = cluster.refresh(0)
        old = table.version(1)
        buffers[1].insert_sample(Sample(np.zeros(8), 1), np.random.default_rng(0))
        fetch(SamplingPlan([(1, 0, 0)]), cluster.transports[0], buffers[0], 0, table)
        assert table.version(1) == old + 1
        assert table.rows()[1].sum() == 11


def test_unreachable_peer_entries_are_replanned():
    buffers = filled_buffers(3, 30, n_classes=3)
    roster = free_ports(3)
    servers = [Server(roster[w], buffers[w], w).start() for w in (0, 1)]  # worker 2 is down
    try:
        t = Transport(0, roster, timeout=0.5, retries=0)
        table = SizeTable(3, 3, 0)
        for w in range(3):
            table.merge(w, 1, buffers[w].size_snapshot().occupancy)
        rows = table.rows()
        dead = [(2, c, s) for c in range(3) for s in range(rows[2, c])][:2]
        others = [(w, c, 0) for w in (0, 1) for c in range(3) if rows[w, c]][:5]
        p = SamplingPlan(others[:3] + dead + others[3:])
        st = FetchStats()
        got = fetch(p, t, buffers[0], 0, table, np.random.default_rng(0), retries=0, timeout=1.0, stats=st)
        assert len(got) == 7
        assert st.failed_peers == [2] and st.replanned == 2
        ids = [int(s.features[0]) for s in got]
        assert len(set(ids)) == 7
        assert all(i < 60 for i in ids)  # ids 60.. live on worker 2
        t.close()
    finally:
        for s in servers:
            s.stop()


def test_augment_layout():
    rng = np.random.default_rng(0)
    m = MiniBatch(rng.standard_normal((56, 3)), rng.integers(5, size=56))
    reps = [Sample(np.full(3, i), i % 5) for i in range(7)]
    a = augment(m, reps)
    assert len(a) == 63 and a.n_incoming == 56 and a.n_representatives == 7
    np.testing.assert_array_equal(a.features[:56], m.features)
    assert list(a)[56:] == reps
    assert len(augment(m, reps[:5])) == 61
    same = augment(m, [])
    np.testing.assert_array_equal(same.features, m.features)
    assert same.features is not m.features


def test_global_sampler_round():
    buffers = filled_buffers(2, 25, n_classes=5)
    with LocalCluster(buffers) as cluster:
        s = GlobalSampler(0, cluster.tables[0], buffers[0], cluster.transports[0], np.random.default_rng(0))
        # before any probe only the local row is known
        assert len(s.sample(7)) == 7 and s.last_owners == {0}
        s.probe([1])
        deadline = time.monotonic() + 5
        while s.table.total < 50 and time.monotonic() < deadline:
            time.sleep(0.01)
        assert s.table.total == 50
        assert len(s.sample(25)) == 25 and s.last_owners == {0, 1}
