import threading
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from drbuf.buffer import LocalRehearsalBuffer, ReadFlag
from drbuf.core import MiniBatch, Purpose, RngStreams, Sample


def batch(labels, dim=4, value=None):
    labels = np.asarray(labels)
    if value is None:
        feats = np.arange(len(labels) * dim, dtype=np.float32).reshape(len(labels), dim)
    else:
        feats = np.full((len(labels), dim), value, np.float32)
    return MiniBatch(feats, labels)


def test_fresh_labels_always_append():
    buf = LocalRehearsalBuffer(n_classes=8, capacity=80, feature_dim=4, candidate_count=2)
    rep = buf.update_buffer(batch(range(8)), np.random.default_rng(0))
    assert rep.n_appends == 2 and rep.n_replacements == 0
    assert len(rep.candidates) == len(set(rep.candidates)) == 2
    assert len(buf) == 2 and buf.version == 2


def test_short_batch_takes_all_candidates():
    buf = LocalRehearsalBuffer(4, 40, 4, candidate_count=14)
    rep = buf.update_buffer(batch([0, 1, 2]), np.random.default_rng(0))
    assert sorted(rep.candidates) == [0, 1, 2]
    assert buf.update_buffer(MiniBatch.empty(4), np.random.default_rng(0)).n_appends == 0


def test_bad_labels_rejected():
    buf = LocalRehearsalBuffer(4, 40, 4, candidate_count=2)
    with pytest.raises(ValueError):
        buf.update_buffer(batch([0, 7]), np.random.default_rng(0))


def test_eviction_is_uniform_over_resident_slots():
    buf = LocalRehearsalBuffer(n_classes=1, capacity=4, feature_dim=2, candidate_count=1)
    rng = RngStreams(11, 0).get(Purpose.EVICTION)
    for i in range(4):
        buf.insert_sample(Sample(np.full(2, i), 0), rng)
    counts = Counter()
    trials = 100_000
    for _ in range(trials):
        rep = buf.insert_sample(Sample(np.zeros(2), 0), rng)
        assert rep.n_replacements == 1
        counts[rep.replaced_slots[0][1]] += 1
    assert buf.size_snapshot().occupancy[0] == 4
    observed = np.array([counts[s] for s in range(4)])
    sigma = np.sqrt(trials * 0.25 * 0.75)
    assert np.all(np.abs(observed - 25_000) < 3 * sigma)
    assert stats.chisquare(observed).pvalue > 0.01


def test_candidate_inclusion_probability_is_c_over_b():
    b, c = 56, 14
    buf = LocalRehearsalBuffer(n_classes=1, capacity=64, feature_dim=1, candidate_count=c)
    rng = RngStreams(3, 0).get(Purpose.CANDIDATE_SELECTION)
    m = MiniBatch(np.zeros((b, 1)), np.zeros(b, np.int64))
    counts = np.zeros(b, np.int64)
    rounds = 100_000 // c + 1
    for _ in range(rounds):
        rep = buf.update_buffer(m, rng)
        counts[rep.candidates] += 1
    assert counts.sum() == rounds * c
    np.testing.assert_allclose(counts / rounds, c / b, atol=0.02)
    assert stats.chisquare(counts).pvalue > 0.01


def test_read_after_single_insert():
    buf = LocalRehearsalBuffer(4, 40, 3, 1)
    s = Sample(np.array([1.0, 2.0, 3.0]), 2)
    buf.insert_sample(s, np.random.default_rng(0))
    (read,) = buf.read_slots([(2, 0)])
    assert read.flag == ReadFlag.EXACT and read.sample == s


def test_stale_slot_is_substituted_from_same_class():
    buf = LocalRehearsalBuffer(4, 40, 2, 1, substitution_rng=np.random.default_rng(5))
    rng = np.random.default_rng(0)
    stored = [Sample(np.array([i, 0.0]), 1) for i in range(5)]
    for s in stored:
        buf.insert_sample(s, rng)
    seen = Counter()
    for _ in range(2000):
        (read,) = buf.read_slots([(1, 9)])
        assert read.flag == ReadFlag.SUBSTITUTED and read.class_id == 1
        assert read.sample in stored
        seen[int(read.sample.features[0])] += 1
    assert stats.chisquare([seen[i] for i in range(5)]).pvalue > 0.001


def test_stale_class_falls_back_to_any_class_then_empty():
    buf = LocalRehearsalBuffer(4, 40, 2, 1)
    (read,) = buf.read_slots([(3, 0)])
    assert read.flag == ReadFlag.EMPTY and read.sample is None
    s = Sample(np.array([7.0, 7.0]), 0)
    buf.insert_sample(s, np.random.default_rng(0))
    (read,) = buf.read_slots([(3, 0)])
    assert read.flag == ReadFlag.SUBSTITUTED and read.sample == s


def test_snapshot_examples():
    buf = LocalRehearsalBuffer(4, 40, 2, 1)
    snap = buf.size_snapshot()
    assert snap.total == 0 and snap.version == 0
    for _ in range(3):
        buf.insert_sample(Sample(np.zeros(2), 2), np.random.default_rng(0))
    snap = buf.size_snapshot()
    assert snap.as_dict() == {2: 3} and snap.version == 3


def test_snapshots_are_linearizable_under_concurrent_updates():
    buf = LocalRehearsalBuffer(5, 100, 4, 6, record_log=True)
    rng = np.random.default_rng(1)
    batches = [batch(rng.integers(5, size=12)) for _ in range(300)]
    snaps = []
    done = threading.Event()

    def writer():
        r = np.random.default_rng(2)
        for m in batches:
            buf.update_buffer(m, r)
        done.set()

    def reader():
        while not done.is_set():
            snaps.append(buf.size_snapshot())

    threads = [threading.Thread(target=writer), threading.Thread(target=reader)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    snaps.append(buf.size_snapshot())

    # replay the mutation log single-threaded: state after each version
    occ = np.zeros(5, np.int64)
    states = {0: occ.copy()}
    for version, label, _slot, kind in buf.mutation_log:
        if kind == "append":
            occ[label] += 1
        states[version] = occ.copy()
    assert sorted(states) == list(range(len(buf.mutation_log) + 1))
    assert len(snaps) > 10
    versions = [s.version for s in snaps]
    assert versions == sorted(versions)
    for s in snaps:
        np.testing.assert_array_equal(s.occupancy, states[s.version])


def test_reads_never_tear_during_overwrites():
    dim = 512
    buf = LocalRehearsalBuffer(1, 4, dim, 1)
    rng = np.random.default_rng(0)
    for v in range(4):
        buf.insert_sample(Sample(np.full(dim, v), 0), rng)
    done = threading.Event()
    torn = []

    def writer():
        for v in range(4, 20_000):
            buf.insert_sample(Sample(np.full(dim, v), 0), rng)
        done.set()

    def reader():
        r = np.random.default_rng(1)
        while not done.is_set():
            for read in buf.read_slots([(0, int(s)) for s in r.integers(4, size=8)]):
                f = read.sample.features
                if not np.all(f == f[0]):
                    torn.append(f)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not torn


def test_disjoint_tasks_never_evict_other_classes():
    buf = LocalRehearsalBuffer(n_classes=6, capacity=30, feature_dim=2, candidate_count=14)
    rng = np.random.default_rng(0)
    present = set()
    for task in ([0, 1], [2, 3], [4, 5]):
        for _ in range(40):
            labels = rng.choice(task, size=56)
            buf.update_buffer(MiniBatch(rng.standard_normal((56, 2)), labels), rng)
        now = buf.present_classes()
        assert present <= now
        present = now
    assert buf.cross_class_evictions == 0
    for cid, feats in buf.contents().items():
        assert len(feats) == 5
    for cid in range(6):
        reads = buf.read_slots([(cid, s) for s in range(5)])
        assert all(r.sample.label == cid and r.flag == ReadFlag.EXACT for r in reads)


def test_same_streams_same_decisions():
    def run(seed):
        rngs = RngStreams(seed, 3)
        buf = LocalRehearsalBuffer(4, 20, 3, 5)
        r = np.random.default_rng(9)
        for _ in range(50):
            m = MiniBatch(r.standard_normal((10, 3)), r.integers(4, size=10))
            buf.update_buffer(m, rngs.get(Purpose.CANDIDATE_SELECTION), rngs.get(Purpose.EVICTION))
        return buf.contents()

    a, b, c = run(1), run(1), run(2)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


@settings(max_examples=60, deadline=None)
@given(
    n_classes=st.integers(1, 6),
    slack=st.integers(0, 20),
    c=st.integers(0, 8),
    labels=st.lists(st.lists(st.integers(0, 5), min_size=0, max_size=12), max_size=25),
)
def test_occupancy_bounds(n_classes, slack, c, labels):
    s_max = n_classes + slack
    buf = LocalRehearsalBuffer(n_classes, s_max, 2, c)
    rng = np.random.default_rng(0)
    prev = np.zeros(n_classes, np.int64)
    for ls in labels:
        ls = [x % n_classes for x in ls]
        rep = buf.update_buffer(MiniBatch(np.zeros((len(ls), 2)), np.array(ls, np.int64)), rng)
        assert rep.n_appends + rep.n_replacements == min(c, len(ls))
        snap = buf.size_snapshot()
        assert np.all(snap.occupancy >= prev)
        assert np.all(snap.occupancy <= buf.class_capacity)
        assert snap.total <= s_max
        prev = snap.occupancy
