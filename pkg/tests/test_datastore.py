import collections
import random
import threading
import time

import pytest
import xxhash

from kvmodels.datastore import (
    DELETED, INSERTED, NOT_FOUND, REPLACED, KeyTooLong, Store, StoreError, ValueTooLarge,
)
from kvmodels.benchclient import WorkloadSpec, generate_dataset


@pytest.fixture
def store():
    return Store()


def test_put_get_insert(store):
    assert store.put(b"a", b"x") == INSERTED
    assert store.get(b"a") == b"x"


def test_put_replaces(store):
    store.put(b"a", b"x")
    assert store.put(b"a", b"y") == REPLACED
    assert store.get(b"a") == b"y"
    assert store.stats().record_count == 1


def test_get_missing(store):
    assert store.get(b"missing") is None


def test_delete(store):
    assert store.delete(b"nope") == NOT_FOUND
    store.put(b"k", b"v")
    assert store.delete(b"k") == DELETED
    assert store.get(b"k") is None


def test_empty_value_is_kept_verbatim(store):
    store.put(b"k", b"")
    assert store.get(b"k") == b""


def test_key_limits(store):
    with pytest.raises(KeyTooLong):
        store.put(b"k" * 65536, b"v")
    with pytest.raises(KeyTooLong):
        store.get(b"k" * 65536)
    with pytest.raises(KeyTooLong):
        store.delete(b"k" * 65536)
    with pytest.raises(StoreError):
        store.put(b"", b"v")
    assert store.put(b"k" * 65535, b"v") == INSERTED


def test_value_cap():
    s = Store(value_cap=4)
    s.put(b"k", b"1234")
    with pytest.raises(ValueTooLarge):
        s.put(b"k", b"12345")


def test_bucket_count_must_be_power_of_two():
    with pytest.raises(ValueError):
        Store(bucket_count=1000)


def test_empty_stats(store):
    st = store.stats()
    assert st.record_count == 0
    assert st.bucket_count == 65536


def test_random_ops_match_flat_map():
    # small bucket count so trees get deep and deletes hit every shape
    s = Store(bucket_count=16)
    ref = {}
    rng = random.Random(7)
    keys = [bytes(rng.randrange(256) for _ in range(rng.randrange(1, 6))) for _ in range(400)]
    for _ in range(10_000):
        k = rng.choice(keys)
        v = rng.randbytes(rng.randrange(0, 20))
        assert s.put(k, v) == (REPLACED if k in ref else INSERTED)
        ref[k] = v
    for k, v in ref.items():
        assert s.get(k) == v
    assert s.stats().record_count == len(ref)


def test_tree_invariants_after_mixed_ops():
    s = Store(bucket_count=4)
    rng = random.Random(3)
    ref = {}
    for _ in range(5000):
        k = b"%d" % rng.randrange(300)
        if rng.random() < 0.4:
            assert s.delete(k) == (DELETED if ref.pop(k, None) is not None else NOT_FOUND)
        else:
            s.put(k, k)
            ref[k] = k
    total = 0
    for b in range(4):
        keys = s.bucket_keys(b)
        assert keys == sorted(set(keys))
        assert all(s.bucket_of(k) == b for k in keys)
        total += len(keys)
    assert total == s.stats().record_count == len(ref)


def test_dataset_load_and_delete_all():
    data = generate_dataset(WorkloadSpec())
    s = Store()
    for r in data:
        s.put(r.key, r.value)
    assert s.stats().record_count == 30_000
    for r in data:
        assert s.get(r.key) == r.value
    for r in data:
        assert s.delete(r.key) == DELETED
    assert s.stats().record_count == 0


@pytest.mark.parametrize("buckets,bound", [(65536, 10), (1024, 60)])
def test_per_bucket_max_matches_bruteforce_histogram(buckets, bound):
    data = generate_dataset(WorkloadSpec())
    s = Store(bucket_count=buckets)
    for r in data:
        s.put(r.key, r.value)
    hist = collections.Counter(xxhash.xxh64_intdigest(r.key, 0) % buckets for r in data)
    assert s.stats().per_bucket_max == max(hist.values())
    # Poisson tail at these loads puts the chance of exceeding `bound` below 1e-5
    assert s.stats().per_bucket_max <= bound


def test_hash_is_deterministic():
    a, b = Store(), Store()
    assert [a.bucket_of(b"key:%d" % i) for i in range(100)] == [b.bucket_of(b"key:%d" % i) for i in range(100)]


def test_bucket_isolation():
    s = Store(bucket_count=64)
    k1 = b"alpha"
    b1 = s.bucket_of(k1)
    other = next(b"k%d" % i for i in range(1000) if s.bucket_of(b"k%d" % i) != b1)
    same = next(b"k%d" % i for i in range(1000) if s.bucket_of(b"k%d" % i) == b1)
    done = {}

    def put(key):
        s.put(key, b"v")
        done[key] = time.monotonic()

    with s.bucket_lock(b1):
        t_other = threading.Thread(target=put, args=(other,))
        t_same = threading.Thread(target=put, args=(same,))
        t_other.start()
        t_same.start()
        t_other.join(2.0)
        assert other in done
        time.sleep(0.2)
        assert same not in done
    t_same.join(2.0)
    assert same in done


def test_concurrent_disjoint_ranges():
    s = Store()
    mismatches = []

    def worker(tid):
        rng = random.Random(tid)
        mine = {}
        for i in range(2000):
            k = b"t%d-%d" % (tid, rng.randrange(500))
            if rng.random() < 0.5:
                v = rng.randbytes(8)
                s.put(k, v)
                mine[k] = v
            elif s.get(k) != mine.get(k):
                mismatches.append(k)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert mismatches == []


# -- linearizability --------------------------------------------------------

from linearizability import INITIAL, Op as HOp, check_register  # noqa: E402


def test_checker_flags_stale_read():
    h = [HOp("w", "a", 0, 1), HOp("w", "b", 2, 3), HOp("r", "a", 4, 5)]
    assert check_register(h)


def test_checker_flags_read_of_initial_after_write():
    h = [HOp("w", "a", 0, 1), HOp("r", INITIAL, 2, 3)]
    assert check_register(h)


def test_checker_accepts_concurrent_overlap():
    h = [HOp("w", "a", 0, 10), HOp("r", INITIAL, 1, 2), HOp("r", "a", 3, 4), HOp("r", "a", 11, 12)]
    assert check_register(h) == []


def run_linearizability(threads=8, n_keys=64, ops_per_thread=3000, seed=0):
    import sys

    s = Store(bucket_count=16)
    histories = [[] for _ in range(n_keys)]
    lock = threading.Lock()
    barrier = threading.Barrier(threads)
    clock = time.perf_counter_ns

    def worker(tid):
        rng = random.Random(seed * 100 + tid)
        local = []
        barrier.wait()
        for i in range(ops_per_thread):
            k = rng.randrange(n_keys)
            key = b"lk%d" % k
            if rng.random() < 0.5:
                v = b"%d:%d" % (tid, i)
                t0 = clock()
                s.put(key, v)
                local.append((k, HOp("w", v, t0, clock())))
            else:
                t0 = clock()
                got = s.get(key)
                local.append((k, HOp("r", INITIAL if got is None else got, t0, clock())))
        with lock:
            for k, op in local:
                histories[k].append(op)

    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-6)
    try:
        ts = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
    finally:
        sys.setswitchinterval(old)
    violations = []
    for k, h in enumerate(histories):
        violations += [f"key {k}: {p}" for p in check_register(h)]
    return violations


def test_per_key_linearizability():
    assert run_linearizability(ops_per_thread=1000) == []
