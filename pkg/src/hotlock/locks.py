"""Row lock manager.

Uncontended acquisitions only note the owner in the row entry; lock records
(``LockRecord``) are materialized when a conflict forces a wait, mirroring the
trx_lock_wait idea. Waiters queue FIFO per row and block on their
transaction's wake event.
"""

from __future__ import annotations

import enum
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Optional

from .core import AbortCause, RowId, TxnDescriptor, TxnState

N_SHARDS = 64


class LockMode(enum.Enum):
    SHARED = "S"
    EXCLUSIVE = "X"


class LockState(enum.Enum):
    GRANTED = "GRANTED"
    WAITING = "WAITING"
    # pulled out of the queue and handed a hot-row group grant instead of the lock
    FOLLOWER = "FOLLOWER"


class Acquire(enum.Enum):
    GRANTED = "granted"
    FOLLOWER = "follower"
    TIMED_OUT = "timed_out"
    ABORTED_BY_RULE = "aborted_by_rule"
    DEADLOCK = "deadlock"
    ABORT_REQUESTED = "abort_requested"


@dataclass(eq=False)
class LockRecord:
    row: RowId
    mode: LockMode
    owner: TxnDescriptor
    state: LockState = LockState.WAITING


class _RowLock:
    __slots__ = ("holders", "waiters")

    def __init__(self):
        # txn_id -> (txn, mode); no lock object for plain ownership
        self.holders: Dict[int, tuple] = {}
        self.waiters: Deque[LockRecord] = deque()


class _Shard:
    __slots__ = ("mutex", "rows", "waiter_map")

    def __init__(self):
        self.mutex = threading.Lock()
        self.rows: Dict[RowId, _RowLock] = {}
        self.waiter_map: Dict[RowId, Deque[int]] = {}


def _compatible(a: LockMode, b: LockMode) -> bool:
    return a is LockMode.SHARED and b is LockMode.SHARED


class LockManager:
    def __init__(self, n_shards: int = N_SHARDS,
                 on_wait: Optional[Callable[[RowId, int], None]] = None,
                 on_release: Optional[Callable[[RowId], None]] = None):
        self._shards = [_Shard() for _ in range(n_shards)]
        self._n = n_shards
        self.on_wait = on_wait
        self.on_release = on_release
        self.acquisitions = 0
        self.row_acquisitions: Dict[RowId, int] = defaultdict(int)
        self.fast_path = 0
        self.materialized = 0
        self.detect_calls = 0
        self.mutex_violations = 0

    def _shard(self, row: RowId) -> _Shard:
        return self._shards[hash(row) % self._n]

    # -- inspection ---------------------------------------------------------

    def holders(self, row: RowId) -> List[int]:
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            return list(e.holders) if e else []

    def waiters(self, row: RowId) -> List[int]:
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            return [r.owner.txn_id for r in e.waiters] if e else []

    def waiter_map(self, row: RowId) -> List[int]:
        sh = self._shard(row)
        with sh.mutex:
            return list(sh.waiter_map.get(row, ()))

    def is_locked(self, row: RowId) -> bool:
        sh = self._shard(row)
        e = sh.rows.get(row)
        return bool(e and (e.holders or e.waiters))

    def has_waiters(self, row: RowId) -> bool:
        e = self._shard(row).rows.get(row)
        return bool(e and e.waiters)

    # -- acquire --------------------------------------------------------------

    def _grant(self, e: _RowLock, txn: TxnDescriptor, mode: LockMode, row: RowId) -> None:
        if mode is LockMode.EXCLUSIVE and any(tid != txn.txn_id for tid in e.holders):
            self.mutex_violations += 1
        first = txn.txn_id not in e.holders
        e.holders[txn.txn_id] = (txn, mode)
        if first:
            txn.held_locks.append(row)
        self.acquisitions += 1
        self.row_acquisitions[row] += 1

    def acquire(self, txn: TxnDescriptor, row: RowId, mode: LockMode = LockMode.EXCLUSIVE,
                timeout: float = 1.0, detect: bool = False,
                rule_check: Optional[Callable[[TxnDescriptor, List[TxnDescriptor]], bool]] = None,
                ) -> Acquire:
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            if e is None:
                e = sh.rows[row] = _RowLock()
                self._grant(e, txn, mode, row)
                self.fast_path += 1
                return Acquire.GRANTED
            held = e.holders.get(txn.txn_id)
            if held is not None and (held[1] is LockMode.EXCLUSIVE or mode is LockMode.SHARED):
                return Acquire.GRANTED
            others = [(t, m) for tid, (t, m) in e.holders.items() if tid != txn.txn_id]
            if not e.waiters and all(_compatible(m, mode) for _, m in others):
                self._grant(e, txn, mode, row)
                return Acquire.GRANTED
            blockers = [t for t, m in others if not _compatible(m, mode)]
            blockers += [r.owner for r in e.waiters if not _compatible(r.mode, mode)]
            if rule_check is not None and rule_check(txn, blockers):
                return Acquire.ABORTED_BY_RULE
            rec = LockRecord(row, mode, txn)
            # the conflict materializes the waiter's record and the holders' records
            self.materialized += 1 + len(others)
            e.waiters.append(rec)
            sh.waiter_map.setdefault(row, deque()).append(txn.txn_id)
            txn.wake_event.clear()
            txn.waiting_on = row
            qlen = len(e.waiters)
        try:
            if self.on_wait is not None:
                self.on_wait(row, qlen)
            if detect:
                victim = self.detect_deadlock(txn)
                if victim is txn:
                    self._cancel(sh, e, rec, row)
                    return Acquire.DEADLOCK
                if victim is not None:
                    victim.request_abort(AbortCause.DEADLOCK)
            return self._wait(sh, e, rec, row, txn, timeout)
        finally:
            txn.waiting_on = None

    def _wait(self, sh, e, rec, row, txn, timeout) -> Acquire:
        t0 = time.monotonic()
        deadline = t0 + timeout
        try:
            while True:
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    txn.wake_event.wait(remaining)
                with sh.mutex:
                    if rec.state is LockState.GRANTED:
                        return Acquire.GRANTED
                    if rec.state is LockState.FOLLOWER:
                        return Acquire.FOLLOWER
                    txn.wake_event.clear()
                    if txn.abort_requested is not None:
                        self._remove_waiter(sh, e, rec, row)
                        return Acquire.ABORT_REQUESTED
                    if remaining <= 0:
                        self._remove_waiter(sh, e, rec, row)
                        return Acquire.TIMED_OUT
        finally:
            txn.lock_wait_s += time.monotonic() - t0

    def _cancel(self, sh, e, rec, row) -> None:
        with sh.mutex:
            self._remove_waiter(sh, e, rec, row)

    def _remove_waiter(self, sh: _Shard, e: _RowLock, rec: LockRecord, row: RowId) -> None:
        try:
            e.waiters.remove(rec)
            q = sh.waiter_map.get(row)
            if q is not None:
                q.remove(rec.owner.txn_id)
                if not q:
                    del sh.waiter_map[row]
        except ValueError:
            pass
        # a removed head may unblock compatible successors
        self._grant_waiters(sh, e, row)
        if not e.holders and not e.waiters and sh.rows.get(row) is e:
            del sh.rows[row]

    # -- release --------------------------------------------------------------

    def _grant_waiters(self, sh: _Shard, e: _RowLock, row: RowId) -> List[int]:
        woken = []
        while e.waiters:
            head = e.waiters[0]
            others = [m for tid, (_, m) in e.holders.items() if tid != head.owner.txn_id]
            if not all(_compatible(m, head.mode) for m in others):
                break
            e.waiters.popleft()
            q = sh.waiter_map.get(row)
            if q is not None:
                q.popleft()
                if not q:
                    del sh.waiter_map[row]
            head.state = LockState.GRANTED
            self._grant(e, head.owner, head.mode, row)
            head.owner.wake_event.set()
            woken.append(head.owner.txn_id)
            if head.mode is LockMode.EXCLUSIVE:
                break
        return woken

    def release(self, txn: TxnDescriptor, row: RowId) -> List[int]:
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            if e is None or e.holders.pop(txn.txn_id, None) is None:
                return []
            woken = self._grant_waiters(sh, e, row)
            if not e.holders and not e.waiters:
                del sh.rows[row]
        try:
            txn.held_locks.remove(row)
        except ValueError:
            pass
        if self.on_release is not None:
            self.on_release(row)
        return woken

    def release_all(self, txn: TxnDescriptor) -> List[int]:
        assert txn.state in (TxnState.PREPARING, TxnState.ABORTED), \
            f"strict 2PL: txn {txn.txn_id} releasing in state {txn.state.value}"
        woken: List[int] = []
        for row in list(txn.held_locks):
            woken += self.release(txn, row)
        return woken

    def pull_waiter(self, row: RowId, accept: Callable[[TxnDescriptor], bool]) -> Optional[TxnDescriptor]:
        """Detach the head waiter of ``row`` if ``accept`` approves it.

        Used to fold legacy lock waiters into a hot-row group as followers.
        """
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            if e is None or not e.waiters:
                return None
            head = e.waiters[0]
            if head.mode is not LockMode.EXCLUSIVE or not accept(head.owner):
                return None
            e.waiters.popleft()
            q = sh.waiter_map.get(row)
            if q is not None:
                q.popleft()
                if not q:
                    del sh.waiter_map[row]
            head.state = LockState.FOLLOWER
            return head.owner

    # -- deadlock detection (2PL baseline) -------------------------------------

    def _queue_snapshot(self, row: RowId) -> tuple:
        """(holders, waiter owners, waiter modes, position by txn id, all exclusive?)."""
        sh = self._shard(row)
        with sh.mutex:
            e = sh.rows.get(row)
            if e is None:
                return (), (), (), {}, True
            holders = tuple(e.holders.values())
            owners = tuple(r.owner for r in e.waiters)
            modes = tuple(r.mode for r in e.waiters)
        pos = {t.txn_id: i for i, t in enumerate(owners)}
        all_x = all(m is LockMode.EXCLUSIVE for m in modes)
        return holders, owners, modes, pos, all_x

    def _edges(self, txn: TxnDescriptor, cache: Dict[RowId, tuple]) -> List[TxnDescriptor]:
        row = txn.waiting_on
        if row is None:
            return []
        snap = cache.get(row)
        if snap is None:
            snap = cache[row] = self._queue_snapshot(row)
        holders, owners, modes, pos, all_x = snap
        i = pos.get(txn.txn_id)
        if i is None:
            return []
        mode = modes[i]
        out = [t for t, m in holders if t is not txn and not _compatible(m, mode)]
        if all_x:
            # exclusive FIFO queue: the request just ahead already reaches every earlier one
            if i:
                out.append(owners[i - 1])
        else:
            out += [t for t, m in zip(owners[:i], modes[:i]) if not _compatible(m, mode)]
        return out

    def detect_deadlock(self, waiter: TxnDescriptor) -> Optional[TxnDescriptor]:
        """Search the wait-for graph for a cycle through ``waiter``.

        Edges run from each waiting transaction to every conflicting holder and
        every conflicting request queued ahead of it. In a queue of exclusive
        requests only the nearest one ahead is kept, which leaves reachability
        unchanged. Each queue is read once per search. Returns the cycle member
        with the fewest undo records, or None.
        """
        self.detect_calls += 1
        cache: Dict[RowId, tuple] = {}
        path = [waiter]
        visited = {waiter.txn_id}
        stack = [iter(self._edges(waiter, cache))]
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                path.pop()
                continue
            if nxt is waiter:
                return min(path, key=lambda t: (len(t.undo), -t.txn_id))
            if nxt.txn_id in visited or nxt.waiting_on is None:
                continue
            visited.add(nxt.txn_id)
            path.append(nxt)
            stack.append(iter(self._edges(nxt, cache)))
        return None
