import itertools
import threading
import time

import networkx as nx
import pytest

from hotlock import AbortCause, Protocol, RowId, TxnState
from hotlock.core import Snapshot, TxnDescriptor
from hotlock.hotspot import HotspotManager
from hotlock.locks import Acquire, LockManager, LockMode, LockRecord

from conftest import spawn, wait_until

ROWS = [RowId(1, 0, i) for i in range(4)]


def txn(tid):
    return TxnDescriptor(tid, Snapshot(0, tid), Protocol.TWO_PL)


def finish(t):
    t.transition(TxnState.ABORTED)


def test_uncontended_acquire_materializes_nothing():
    lm = LockManager()
    t = txn(1)
    assert lm.acquire(t, ROWS[0]) is Acquire.GRANTED
    assert lm.materialized == 0 and lm.fast_path == 1
    assert lm.holders(ROWS[0]) == [1] and t.held_locks == [ROWS[0]]
    # re-acquiring an owned lock is free
    assert lm.acquire(t, ROWS[0]) is Acquire.GRANTED
    assert lm.acquisitions == 1


def test_shared_locks_coexist():
    lm = LockManager()
    a, b = txn(1), txn(2)
    assert lm.acquire(a, ROWS[0], LockMode.SHARED) is Acquire.GRANTED
    assert lm.acquire(b, ROWS[0], LockMode.SHARED) is Acquire.GRANTED
    assert sorted(lm.holders(ROWS[0])) == [1, 2]


def test_conflict_times_out_and_leaves_no_trace():
    lm = LockManager()
    a, b = txn(1), txn(2)
    lm.acquire(a, ROWS[0])
    t0 = time.monotonic()
    assert lm.acquire(b, ROWS[0], timeout=0.05) is Acquire.TIMED_OUT
    assert time.monotonic() - t0 >= 0.05
    assert lm.waiters(ROWS[0]) == [] and lm.waiter_map(ROWS[0]) == []
    assert lm.materialized == 2  # waiter plus the holder's record


def test_fifo_wake_order():
    lm = LockManager()
    holder = txn(0)
    lm.acquire(holder, ROWS[0])
    order, ws = [], []
    guard = threading.Lock()

    def take(t):
        res = lm.acquire(t, ROWS[0], timeout=5)
        with guard:
            order.append(t.txn_id)
        finish(t)
        lm.release_all(t)
        return res

    for i in (1, 2, 3):
        t = txn(i)
        ws.append(spawn(take, t))
        assert wait_until(lambda i=i: len(lm.waiters(ROWS[0])) == i)
    assert lm.waiter_map(ROWS[0]) == [1, 2, 3]
    finish(holder)
    lm.release_all(holder)
    for w in ws:
        assert w.finish().result is Acquire.GRANTED
    assert order == [1, 2, 3]


def test_abort_request_wakes_waiter():
    lm = LockManager()
    a, b = txn(1), txn(2)
    lm.acquire(a, ROWS[0])
    w = spawn(lm.acquire, b, ROWS[0], LockMode.EXCLUSIVE, 5.0)
    assert wait_until(lambda: lm.waiters(ROWS[0]) == [2])
    b.request_abort(AbortCause.CASCADE)
    assert w.finish().result is Acquire.ABORT_REQUESTED


def test_release_before_commit_is_refused():
    lm = LockManager()
    a = txn(1)
    lm.acquire(a, ROWS[0])
    with pytest.raises(AssertionError):
        lm.release_all(a)


def _build(lm, waits):
    """Each txn i holds ROWS[i]; waits[i] = j queues txn i on ROWS[j]."""
    ts = [txn(i) for i in range(len(waits))]
    for i, t in enumerate(ts):
        lm.acquire(t, ROWS[i])
    for i, j in enumerate(waits):
        if j is not None:
            e = lm._shard(ROWS[j]).rows[ROWS[j]]
            e.waiters.append(LockRecord(ROWS[j], LockMode.EXCLUSIVE, ts[i]))
            ts[i].waiting_on = ROWS[j]
    return ts


def _oracle_graph(waits):
    g = nx.DiGraph()
    g.add_nodes_from(range(len(waits)))
    queues = {}
    for i, j in enumerate(waits):
        if j is not None:
            g.add_edge(i, j)
            for ahead in queues.get(j, []):
                g.add_edge(i, ahead)
            queues.setdefault(j, []).append(i)
    return g


@pytest.mark.parametrize("waits", [w for w in itertools.product([None, 0, 1, 2], repeat=3)
                                   if all(j != i for i, j in enumerate(w))])
def test_detection_matches_cycle_oracle(waits):
    lm = LockManager()
    ts = _build(lm, waits)
    g = _oracle_graph(waits)
    for i, t in enumerate(ts):
        if waits[i] is None:
            continue
        cyclic = any(i in c for c in nx.simple_cycles(g))
        victim = lm.detect_deadlock(t)
        assert (victim is not None) == cyclic
        if cyclic:
            assert any(i in c and victim.txn_id in c for c in nx.simple_cycles(g))


def test_three_cycle_has_one_victim():
    lm = LockManager()
    ts = _build(lm, (1, 2, 0))
    victims = {lm.detect_deadlock(t).txn_id for t in ts}
    assert len(victims) == 1


def test_two_pl_deadlock_is_resolved_live():
    lm = LockManager()
    a, b = txn(1), txn(2)
    lm.acquire(a, ROWS[0])
    lm.acquire(b, ROWS[1])
    w = spawn(lm.acquire, a, ROWS[1], LockMode.EXCLUSIVE, 5.0, True)
    assert wait_until(lambda: lm.waiters(ROWS[1]) == [1])
    # equal undo counts: the younger transaction is the victim, here the requester itself
    assert lm.acquire(b, ROWS[0], LockMode.EXCLUSIVE, 5.0, True) is Acquire.DEADLOCK
    finish(b)
    lm.release_all(b)
    assert w.finish().result is Acquire.GRANTED


def test_detection_cost_is_linear_in_queue():
    lm = LockManager()
    holder = txn(0)
    lm.acquire(holder, ROWS[0])
    ts = [txn(i) for i in range(1, 400)]
    e = lm._shard(ROWS[0]).rows[ROWS[0]]
    for t in ts:
        e.waiters.append(LockRecord(ROWS[0], LockMode.EXCLUSIVE, t))
        t.waiting_on = ROWS[0]
    t0 = time.perf_counter()
    assert lm.detect_deadlock(ts[-1]) is None
    assert time.perf_counter() - t0 < 0.05


def _hot(tid, order, row):
    t = txn(tid)
    t.hot_update_order, t.hot_row = order, row
    return t


def test_rule_fires_for_shared_hot_row():
    a, b = _hot(1, 1, ROWS[0]), _hot(2, 2, ROWS[0])
    assert HotspotManager.hotspot_block_check(a, b)
    assert HotspotManager.hotspot_block_check(b, a)


def test_rule_ignores_distinct_hot_rows_and_cold_txns():
    a, b = _hot(1, 1, ROWS[0]), _hot(2, 2, ROWS[1])
    assert not HotspotManager.hotspot_block_check(a, b)
    assert not HotspotManager.hotspot_block_check(a, txn(3))
    assert not HotspotManager.hotspot_block_check(txn(3), a)


@pytest.mark.parametrize("a_hot,b_hot", list(itertools.product([0, 1], repeat=2)))
@pytest.mark.parametrize("a_first", [True, False])
def test_rule_agrees_with_two_row_enumeration(a_hot, b_hot, a_first):
    """a waits for b's cold lock; abort exactly when the hot-row dependencies close a cycle."""
    oa, ob = (1, 2) if a_first else (2, 1)
    a, b = _hot(1, oa, ROWS[a_hot]), _hot(2, ob, ROWS[b_hot])
    g = nx.DiGraph([(1, 2)])
    if a_hot == b_hot:
        # same group: the later member waits on the earlier to commit, the earlier on the later to roll back
        g.add_edges_from([(1, 2), (2, 1)])
    assert HotspotManager.hotspot_block_check(a, b) == (not nx.is_directed_acyclic_graph(g))
