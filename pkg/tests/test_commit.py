import threading

import pytest

from hotlock import Protocol
from hotlock.commit import CommitPipeline
from hotlock.core import Snapshot, TxnDescriptor
from hotlock.history import EventKind, check_commit_order

from conftest import HOT, make_engine, promote, spawn, wait_until


def txn(tid):
    return TxnDescriptor(tid, Snapshot(0, tid), Protocol.GROUP_LOCK)


class Recorder:
    def __init__(self):
        self.flushed, self.committed = [], []

    def flush(self, members):
        self.flushed.append([t.txn_id for t in members])

    def commit(self, members):
        self.committed.extend(t.txn_id for t in members)


def test_single_txn_runs_all_stages():
    r = Recorder()
    p = CommitPipeline(r.flush, r.commit)
    p.process(p.enqueue(txn(1)))
    assert r.flushed == [[1]] and r.committed == [1] and p.batches == 1


def test_queued_txns_share_one_batch():
    r = Recorder()
    release = threading.Event()

    def slow_flush(members):
        r.flush(members)
        if len(r.flushed) == 1:
            release.wait(5)

    p = CommitPipeline(slow_flush, r.commit)
    first = spawn(p.process, p.enqueue(txn(1)))
    assert wait_until(lambda: r.flushed)
    tickets = [p.enqueue(txn(i)) for i in range(2, 6)]
    ws = [spawn(p.process, t) for t in tickets]
    release.set()
    for w in [first] + ws:
        assert w.finish().error is None
    assert r.flushed == [[1], [2, 3, 4, 5]]
    assert r.committed == [1, 2, 3, 4, 5]


def test_group_commit_off_cuts_singleton_batches():
    r = Recorder()
    p = CommitPipeline(r.flush, r.commit, group_commit=False)
    tickets = [p.enqueue(txn(i)) for i in range(1, 4)]
    ws = [spawn(p.process, t) for t in tickets]
    for w in ws:
        w.finish()
    assert r.flushed == [[1], [2], [3]]


def test_stage_failure_reaches_every_member():
    def boom(members):
        raise OSError("disk gone")

    p = CommitPipeline(boom, lambda m: None)
    with pytest.raises(OSError):
        p.process(p.enqueue(txn(1)))


def test_group_commits_in_hot_update_order():
    e = make_engine()
    promote(e)
    ts = [e.begin() for _ in range(3)]
    e.increment(ts[0], HOT)
    gate = threading.Event()
    ws = []
    for t in ts[1:]:
        ws.append(spawn(lambda t=t: (e.increment(t, HOT), gate.wait(5), e.commit(t))))
        assert wait_until(lambda t=t: t.hot_update_order is not None)
    # the followers try to commit before the leader; the order gate holds them back
    gate.set()
    e.commit(ts[0])
    for w in ws:
        assert w.finish().error is None
    orders = [t.hot_update_order for t in ts]
    seqs = [t.commit_seq for t in ts]
    assert sorted(orders) == orders and sorted(seqs) == seqs
    assert check_commit_order(e.history.events()) == []
    e.close()


def test_commit_stamps_make_versions_visible():
    e = make_engine()
    t = e.begin()
    e.increment(t, HOT)
    seq = e.commit(t)
    assert e.storage.visible_ts == seq
    r = e.begin()
    assert e.read(r, HOT) == 2
    assert [ev.kind for ev in e.history.events()][-2:] == [EventKind.BEGIN, EventKind.READ]
    e.close()


def test_read_only_commit_skips_pipeline():
    e = make_engine()
    t = e.begin()
    e.read(t, HOT)
    assert e.commit(t) == 0 and e.pipeline.batches == 0
    e.close()
