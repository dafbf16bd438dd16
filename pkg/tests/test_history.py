import itertools
import random

import pytest

from hotlock import RowId
from hotlock.history import (
    EventKind,
    HistoryEvent,
    MalformedHistory,
    check_commit_order,
    check_counter_oracle,
    check_rollback_order,
    check_serializable,
    dump,
    load,
)
from hotlock.storage import INITIAL_WRITER

X, Y = RowId(1, 0, 0), RowId(1, 0, 1)


class Builder:
    def __init__(self):
        self.events = []
        self.last_writer = {}

    def add(self, txn, kind, row=None, **kw):
        self.events.append(HistoryEvent(len(self.events) + 1, txn, kind, row, **kw))

    def read(self, txn, row):
        self.add(txn, EventKind.READ, row, source=self.last_writer.get(row, INITIAL_WRITER))

    def write(self, txn, row, value=None, prev=None, **kw):
        self.add(txn, EventKind.WRITE, row, value=value, prev=prev,
                 source=self.last_writer.get(row, INITIAL_WRITER), **kw)
        self.last_writer[row] = txn


def view_serializable(schedule, txns):
    """Brute force: some serial order gives every access the same source and the same final writers."""
    def sources(order_ops):
        last, out = {}, []
        for t, op, row in order_ops:
            out.append((t, op, row, last.get(row, INITIAL_WRITER)))
            if op == "w":
                last[row] = t
        return sorted(out, key=lambda x: (x[0], x[1], x[2].heap_no, x[3])), last

    actual = sources(schedule)
    for perm in itertools.permutations(txns):
        serial = [op for t in perm for op in schedule if op[0] == t]
        if sources(serial) == actual:
            return True
    return False


def random_schedule(rng, n_txns=3, n_ops=2):
    progs = {t: [(t, rng.choice("rw"), rng.choice([X, Y])) for _ in range(n_ops)]
             for t in range(1, n_txns + 1)}
    sched = []
    while any(progs.values()):
        t = rng.choice([t for t, p in progs.items() if p])
        sched.append(progs[t].pop(0))
    return sched


def to_events(schedule, txns):
    b = Builder()
    for t in txns:
        b.add(t, EventKind.BEGIN)
    for t, op, row in schedule:
        (b.read if op == "r" else b.write)(t, row)
    for t in txns:
        b.add(t, EventKind.COMMIT, commit_seq=t)
    return b.events


@pytest.mark.parametrize("seed", range(300))
def test_checker_agrees_with_brute_force(seed):
    rng = random.Random(seed)
    sched = random_schedule(rng, n_txns=rng.choice([2, 3, 4]), n_ops=rng.choice([1, 2, 3]))
    txns = sorted({t for t, _, _ in sched})
    res = check_serializable(to_events(sched, txns))
    assert res.ok == view_serializable(sched, txns)


def test_lost_update_is_a_cycle():
    # both read x = 0, both write
    b = Builder()
    b.add(1, EventKind.BEGIN)
    b.add(2, EventKind.BEGIN)
    b.read(1, X)
    b.read(2, X)
    b.write(1, X)
    b.add(2, EventKind.WRITE, X, source=INITIAL_WRITER)
    b.add(1, EventKind.COMMIT, commit_seq=1)
    b.add(2, EventKind.COMMIT, commit_seq=2)
    res = check_serializable(b.events)
    assert not res.ok and res.cycle


def test_dirty_read_of_aborted_writer():
    b = Builder()
    b.write(1, X)
    b.read(2, X)
    b.add(1, EventKind.ABORT, cause="injected")
    b.add(2, EventKind.COMMIT, commit_seq=1)
    res = check_serializable(b.events)
    assert not res.ok and res.dirty_reads == [(2, 1)]


def test_malformed_histories_are_rejected():
    b = Builder()
    b.write(1, X)
    with pytest.raises(MalformedHistory):
        check_serializable(b.events)  # never finished
    b.add(1, EventKind.COMMIT, commit_seq=1)
    b.add(1, EventKind.READ, X, source=1)
    with pytest.raises(MalformedHistory):
        check_serializable(b.events)  # event after commit
    c = Builder()
    c.add(2, EventKind.READ, X, source=9)
    c.add(2, EventKind.COMMIT, commit_seq=1)
    c.add(9, EventKind.COMMIT, commit_seq=2)
    with pytest.raises(MalformedHistory):
        check_serializable(c.events)  # read of a version nobody wrote


def _counter_history(commits, aborts):
    b = Builder()
    value = 0
    tid = 0
    for i in range(commits + aborts):
        tid += 1
        b.write(tid, X, value=value + 1, prev=value)
        if i < commits:
            value += 1
            b.add(tid, EventKind.COMMIT, commit_seq=tid)
        else:
            b.add(tid, EventKind.ABORT, cause="injected")
            b.last_writer[X] = tid - 1
    return b.events, value


def test_counter_oracle_counts_committed_increments():
    ev, final = _counter_history(1000, 0)
    assert check_counter_oracle(ev, X, 0, final, delta=1).expected == 1000
    ev, final = _counter_history(990, 10)
    res = check_counter_oracle(ev, X, 0, final)
    assert res.ok and res.expected == 990
    assert not check_counter_oracle(ev, X, 0, final + 1).ok


def test_commit_order_violation_found():
    b = Builder()
    b.add(1, EventKind.COMMIT, commit_seq=2, hot_order=1, hot_row=X)
    b.add(2, EventKind.COMMIT, commit_seq=1, hot_order=2, hot_row=X)
    assert check_commit_order(b.events) == [(1, 2)]


def test_rollback_order_violation_found():
    b = Builder()
    b.write(1, X, hot_order=1)
    b.write(2, X, hot_order=2)
    b.add(1, EventKind.ABORT, cause="injected")
    b.add(2, EventKind.ABORT, cause="cascade")
    assert check_rollback_order(b.events) == [(1, 2)]
    ok = Builder()
    ok.write(1, X, hot_order=1)
    ok.write(2, X, hot_order=2)
    ok.add(2, EventKind.ABORT, cause="cascade")
    ok.add(1, EventKind.ABORT, cause="injected")
    assert check_rollback_order(ok.events) == []


def test_ndjson_roundtrip(tmp_path):
    b = Builder()
    b.write(1, X, value=2, prev=1, hot_order=4)
    b.add(1, EventKind.COMMIT, commit_seq=1, hot_order=4, hot_row=X)
    path = tmp_path / "h.ndjson"
    assert dump(b.events, str(path)) == 2
    assert load(str(path)) == b.events
