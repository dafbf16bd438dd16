"""Hotspot detection and group locking.

A row whose lock wait queue grows past ``hot_threshold`` is promoted into the
hotspot table. Under group locking, the first transaction to reach a hot row
takes the row lock and becomes the group leader; later arrivals queue in
``waiting_updates`` and are granted execution one at a time without locking.
Every hot writer is appended to the row's dependency list, which fixes both
the commit order (forward) and the rollback order (reverse).

Under queue locking the hot row keeps plain lock semantics, but arrivals wait
in ``waiting_updates`` instead of the lock table and are woken one by one as
the lock is released.

All state of a ``HotRowState`` is guarded by its ``mutex``; the polling loops
of commit and rollback sleep ``spin_delay`` between checks and never hold it
while sleeping.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import TYPE_CHECKING, Callable, Deque, Dict, List, Optional

from .core import AbortCause, EngineError, HotStatus, Protocol, RowId, TxnDescriptor
from .locks import Acquire, LockMode

if TYPE_CHECKING:
    from .engine import Engine

GROUP = "group"
QUEUE = "queue"

# sentinel returned when the hot path does not apply and the caller must lock plainly
FALLBACK = object()


class AbortSignal(EngineError):
    """Internal: the operation must abort its transaction with ``cause``."""

    def __init__(self, cause: AbortCause, detail: str = ""):
        super().__init__(detail or cause.value)
        self.cause = cause


class HotRowState:
    def __init__(self, row: RowId, mode: str):
        self.row = row
        self.mode = mode
        self.mutex = threading.Lock()
        self.dep_list: List[TxnDescriptor] = []
        self.waiting_updates: Deque[TxnDescriptor] = deque()
        self.granting_new_trx = False
        self.switching_new_leader = False
        self.grants_in_group = 0
        self.legacy_waiters_drained = False
        # bookkeeping beyond the paper's flags
        self.leader: Optional[TxnDescriptor] = None
        self.leader_pending: Optional[TxnDescriptor] = None
        self.updating: Optional[TxnDescriptor] = None
        self.reserved: Optional[TxnDescriptor] = None
        self.parked: Deque[TxnDescriptor] = deque()
        self.rollback_pending = 0
        self.stalled = False
        self.draining = False
        self.evicted = False
        self.idle_marks = 0

    def __repr__(self) -> str:
        return (f"HotRow({self.row}, {self.mode}, deps={[t.txn_id for t in self.dep_list]}, "
                f"waiting={len(self.waiting_updates)})")


class HotspotTable:
    def __init__(self):
        self.entries: Dict[RowId, HotRowState] = {}
        self.mutex = threading.Lock()

    def get(self, row: RowId) -> Optional[HotRowState]:
        return self.entries.get(row)

    def __contains__(self, row: RowId) -> bool:
        return row in self.entries

    def __len__(self) -> int:
        return len(self.entries)


class HotspotManager:
    def __init__(self, engine: "Engine"):
        self.eng = engine
        self.table = HotspotTable()
        self.promotions = 0
        self.evictions = 0
        self.groups = 0
        self.hot_updates = 0
        self.grants = 0
        self.sweep_wakes = 0
        self.background_grants = 0
        self.rule_aborts_checked = 0
        self.waiting_with_lock = 0

    @property
    def cfg(self):
        return self.eng.config

    # -- detection and eviction ---------------------------------------------

    def maybe_promote(self, row: RowId, wait_queue_len: int) -> bool:
        proto = self.cfg.protocol
        if proto is Protocol.TWO_PL or wait_queue_len <= self.cfg.hot_threshold:
            return False
        if row in self.table:
            return False
        with self.table.mutex:
            if row in self.table.entries:
                return False
            mode = GROUP if proto is Protocol.GROUP_LOCK else QUEUE
            self.table.entries[row] = HotRowState(row, mode)
            self.promotions += 1
        return True

    def _idle(self, hs: HotRowState) -> bool:
        return (not hs.dep_list and not hs.waiting_updates and hs.leader is None
                and hs.leader_pending is None and hs.updating is None and hs.reserved is None
                and not hs.parked and not hs.rollback_pending and not hs.granting_new_trx
                and not self.eng.locks.is_locked(hs.row))

    def sweep(self) -> List[RowId]:
        """One pass of the background monitor; returns the evicted rows."""
        evicted = []
        for hs in list(self.table.entries.values()):
            with hs.mutex:
                if self._idle(hs):
                    hs.idle_marks += 1
                    # idle across two consecutive passes, or draining after a protocol switch
                    if hs.idle_marks >= 2 or hs.draining:
                        hs.evicted = True
                        with self.table.mutex:
                            self.table.entries.pop(hs.row, None)
                        self.evictions += 1
                        evicted.append(hs.row)
                    continue
                hs.idle_marks = 0
                background = hs.stalled and bool(hs.waiting_updates)
                if background:
                    self.background_grants += 1
                if self._kick(hs, background=background):
                    self.sweep_wakes += 1
        return evicted

    def drain_all(self, new_protocol: Protocol) -> None:
        """Rows promoted under another protocol stop admitting new group members."""
        want = {Protocol.GROUP_LOCK: GROUP, Protocol.QUEUE_LOCK: QUEUE}.get(new_protocol)
        for hs in list(self.table.entries.values()):
            with hs.mutex:
                if hs.mode == want:
                    continue
                hs.draining = True
                while hs.waiting_updates:
                    t = hs.waiting_updates.popleft()
                    t.hot_update_status = HotStatus.NONE
                    t.wake_event.set()

    # -- the hot-row abort rule ----------------------------------------------

    @staticmethod
    def hotspot_block_check(waiter: TxnDescriptor, blocker: TxnDescriptor) -> bool:
        """True (abort the waiter) iff both sit in the same hot row's dependency list."""
        return (waiter.hot_update_order is not None and blocker.hot_update_order is not None
                and waiter.hot_row is not None and waiter.hot_row == blocker.hot_row
                and not blocker.finished)

    def rule_check(self, waiter: TxnDescriptor, blockers: List[TxnDescriptor]) -> bool:
        self.rule_aborts_checked += 1
        return any(self.hotspot_block_check(waiter, b) for b in blockers)

    # -- state machine --------------------------------------------------------

    def _busy(self, hs: HotRowState) -> bool:
        """Whether a new arrival must queue instead of taking the row lock."""
        if (hs.leader is not None or hs.leader_pending is not None or hs.parked
                or hs.rollback_pending or hs.updating is not None or hs.reserved is not None
                or hs.granting_new_trx or self.eng.locks.is_locked(hs.row)):
            return True
        if hs.mode == GROUP and not self.cfg.dynamic_batch:
            return hs.stalled or bool(hs.dep_list)
        return False

    def _kick(self, hs: HotRowState, background: bool = False) -> bool:
        """Advance the row: grant the next follower or hand over leadership.

        Caller holds ``hs.mutex``. Returns True if a transaction was woken.
        """
        locks = self.eng.locks
        if hs.mode == QUEUE:
            if (hs.leader_pending is None and hs.waiting_updates and not hs.draining
                    and not locks.is_locked(hs.row)):
                nxt = hs.waiting_updates.popleft()
                nxt.hot_update_status = HotStatus.RUNNING
                hs.leader_pending = nxt
                nxt.wake_event.set()
                return True
            return False
        if hs.rollback_pending or hs.updating is not None or hs.granting_new_trx or hs.reserved is not None:
            return False
        if hs.parked:
            nxt = hs.parked.popleft()
            if nxt.is_leader:
                hs.switching_new_leader = True
            else:
                hs.granting_new_trx = True
            nxt.wake_event.set()
            return True
        if hs.draining:
            return False
        if hs.leader is not None:
            if hs.switching_new_leader or hs.grants_in_group >= self.cfg.group_batch_size:
                return False
            if locks.has_waiters(hs.row):
                # older lock-table waiters are served before waiting_updates
                row = hs.row
                legacy = locks.pull_waiter(
                    row, lambda t: t.hot_row in (None, row) and t.abort_requested is None)
                if legacy is None:
                    return False
                self._grant(hs, legacy)
                return True
            hs.legacy_waiters_drained = True
            if hs.waiting_updates:
                self._grant(hs, hs.waiting_updates.popleft())
                return True
            return False
        if hs.leader_pending is not None or locks.is_locked(hs.row) or not hs.waiting_updates:
            return False
        if hs.stalled and not background:
            return False
        hs.stalled = False
        nxt = hs.waiting_updates.popleft()
        nxt.hot_update_status = HotStatus.RUNNING
        nxt.is_leader = True
        hs.leader_pending = nxt
        nxt.wake_event.set()
        return True

    def _grant(self, hs: HotRowState, nxt: TxnDescriptor) -> None:
        hs.granting_new_trx = True
        hs.grants_in_group += 1
        self.grants += 1
        nxt.hot_update_status = HotStatus.GRANTED
        nxt.wake_event.set()

    def kick(self, row: RowId) -> None:
        hs = self.table.get(row)
        if hs is not None:
            with hs.mutex:
                self._kick(hs)

    # -- Algorithm 1: execution -----------------------------------------------

    def update(self, txn: TxnDescriptor, hs: HotRowState, fn: Optional[Callable], sfu: bool = False):
        """Hot-row write (or SELECT FOR UPDATE when ``sfu``).

        Returns the version written/read, or FALLBACK when the caller must take
        the plain locking path.
        """
        row = hs.row
        with hs.mutex:
            if hs.evicted:
                return FALLBACK
            if row in txn.held_locks and txn.hot_row != row:
                # already owns the lock outside the group (legacy, secondary or queue holder)
                role = "owner"
            elif txn.hot_row == row and txn.hot_update_order is not None:
                return self._revisit(txn, hs, fn, sfu)
            elif hs.mode == QUEUE or hs.draining:
                role = "queue" if hs.mode == QUEUE and not hs.draining else "secondary"
            elif txn.hot_row is not None:
                if self.cfg.multi_hot_policy == "reject":
                    raise AbortSignal(AbortCause.HOT_LIMIT,
                                      f"txn {txn.txn_id} already updates hot row {txn.hot_row}")
                role = "secondary"
            elif self._busy(hs):
                assert row not in txn.held_locks
                if txn.held_locks:
                    self.waiting_with_lock += 1
                txn.hot_update_status = HotStatus.WAITING
                txn.wake_event.clear()
                hs.waiting_updates.append(txn)
                self._kick(hs)
                role = "wait"
            else:
                role = "lock"
        if role == "owner":
            return self.eng._write(txn, row, fn, None, sfu)
        if role == "secondary":
            return FALLBACK
        if role == "queue":
            return self._queue_update(txn, hs, fn, sfu)
        if role == "wait":
            role = self._wait_for_grant(txn, hs)
            if role == "retry":
                return FALLBACK
        if role == "follower":
            return self._run(txn, hs, fn, sfu, leader=False)
        # leader: take the row lock, then found a group
        res = self.eng.locks.acquire(txn, row, LockMode.EXCLUSIVE, self.cfg.lock_wait_timeout,
                                     rule_check=self.rule_check)
        if res is Acquire.FOLLOWER:
            self._abandon_pending(txn, hs)
            return self._run(txn, hs, fn, sfu, leader=False)
        if res is not Acquire.GRANTED:
            self._abandon_pending(txn, hs)
            raise AbortSignal(_acquire_cause(res, txn))
        return self.after_lock_grant(txn, hs, fn, sfu)

    def _abandon_pending(self, txn: TxnDescriptor, hs: HotRowState) -> None:
        with hs.mutex:
            if hs.leader_pending is txn:
                hs.leader_pending = None
                txn.is_leader = False
                hs.switching_new_leader = False
                self._kick(hs)

    def after_lock_grant(self, txn: TxnDescriptor, hs: HotRowState, fn, sfu: bool):
        """The transaction now owns the row lock of a (possibly) hot row."""
        row = hs.row
        with hs.mutex:
            if hs.leader_pending is txn:
                hs.leader_pending = None
            if hs.evicted or hs.mode == QUEUE:
                mode = "plain"
            elif hs.draining or (txn.hot_row not in (None, row)):
                if not hs.draining and self.cfg.multi_hot_policy == "reject":
                    raise AbortSignal(AbortCause.HOT_LIMIT,
                                      f"txn {txn.txn_id} already updates hot row {txn.hot_row}")
                # the handover to a leader did not happen
                hs.switching_new_leader = False
                txn.is_leader = False
                mode = "secondary"
            else:
                mode = "leader"
        if mode == "plain":
            return self.eng._write(txn, row, fn, None, sfu)
        if mode == "secondary":
            self._drain_wait(txn, hs)
            return self.eng._write(txn, row, fn, None, sfu)
        txn.is_leader = True
        return self._run(txn, hs, fn, sfu, leader=True)

    def _wait_for_grant(self, txn: TxnDescriptor, hs: HotRowState) -> str:
        t0 = time.monotonic()
        deadline = t0 + self.cfg.lock_wait_timeout
        try:
            while True:
                remaining = deadline - time.monotonic()
                if remaining > 0:
                    txn.wake_event.wait(remaining)
                with hs.mutex:
                    st = txn.hot_update_status
                    if st is HotStatus.GRANTED:
                        return "follower"
                    if st is HotStatus.RUNNING:
                        return "leader"
                    if st is HotStatus.NONE:
                        return "retry"
                    txn.wake_event.clear()
                    if txn.abort_requested is not None or remaining <= 0:
                        try:
                            hs.waiting_updates.remove(txn)
                        except ValueError:
                            pass
                        txn.hot_update_status = HotStatus.NONE
                        raise AbortSignal(txn.abort_requested or AbortCause.TIMEOUT)
        finally:
            txn.lock_wait_s += time.monotonic() - t0

    def _run(self, txn: TxnDescriptor, hs: HotRowState, fn, sfu: bool, leader: bool):
        """Join the dependency list and execute the write (Alg. 1 lines 7-20)."""
        self._join(txn, hs, leader)
        try:
            version = self.eng._write(txn, hs.row, fn, txn.hot_update_order, sfu)
        finally:
            self._after_update(txn, hs, sfu, leader)
        return version

    def _join(self, txn: TxnDescriptor, hs: HotRowState, leader: bool) -> None:
        t0 = time.monotonic()
        deadline = t0 + self.cfg.lock_wait_timeout
        parked = False
        while True:
            with hs.mutex:
                if parked and txn in hs.parked:
                    # still parked: either woken spuriously or giving up
                    if txn.abort_requested is not None or time.monotonic() >= deadline:
                        hs.parked.remove(txn)
                        txn.hot_update_status = HotStatus.NONE
                        txn.is_leader = False
                        self._kick(hs)
                        raise AbortSignal(txn.abort_requested or AbortCause.TIMEOUT)
                elif hs.rollback_pending:
                    # a rollback is unwinding this row: hold the grant without writing
                    if leader:
                        hs.switching_new_leader = False
                    else:
                        hs.granting_new_trx = False
                    txn.is_leader = leader
                    hs.parked.append(txn)
                    txn.wake_event.clear()
                    parked = True
                else:
                    if leader:
                        hs.leader = txn
                        hs.grants_in_group = 0
                        txn.is_leader = True
                        txn.hot_update_status = HotStatus.RUNNING
                        self.groups += 1
                    txn.hot_update_order = self.eng.counters.global_hot_update_order.next()
                    txn.hot_row = hs.row
                    assert not hs.dep_list or hs.dep_list[-1].hot_update_order < txn.hot_update_order
                    hs.dep_list.append(txn)
                    hs.updating = txn
                    break
            txn.wake_event.wait(max(0.0, min(self.cfg.spin_delay * 100, deadline - time.monotonic())))
        txn.lock_wait_s += time.monotonic() - t0

    def _after_update(self, txn: TxnDescriptor, hs: HotRowState, sfu: bool, leader: bool) -> None:
        self.hot_updates += 1
        with hs.mutex:
            hs.updating = None
            if txn.hot_update_status is HotStatus.GRANTED and not leader:
                hs.granting_new_trx = False
            if txn.hot_update_status is HotStatus.RUNNING and txn.is_leader:
                hs.switching_new_leader = False
            if sfu:
                hs.reserved = txn
                txn.queued_for_update = True
                return
            self._kick(hs)

    def _revisit(self, txn: TxnDescriptor, hs: HotRowState, fn, sfu: bool):
        """Second access to the row by a member of its dependency list. Caller holds mutex."""
        if hs.reserved is txn:
            hs.updating = txn
            hs.reserved = None
        elif (hs.dep_list and hs.dep_list[-1] is txn and not hs.granting_new_trx
              and hs.updating is None and hs.leader_pending is None and not hs.parked
              and not hs.rollback_pending):
            hs.updating = txn
        else:
            raise AbortSignal(AbortCause.HOT_LIMIT,
                              f"txn {txn.txn_id} revisits hot row {hs.row} after later updates")
        hs.mutex.release()
        try:
            version = self.eng._write(txn, hs.row, fn, txn.hot_update_order, sfu)
        finally:
            hs.mutex.acquire()
            hs.updating = None
            if sfu:
                hs.reserved = txn
                txn.queued_for_update = True
            else:
                self._kick(hs)
        return version

    def _queue_update(self, txn: TxnDescriptor, hs: HotRowState, fn, sfu: bool):
        with hs.mutex:
            if self._busy(hs):
                txn.hot_update_status = HotStatus.WAITING
                txn.wake_event.clear()
                hs.waiting_updates.append(txn)
                waiting = True
            else:
                waiting = False
        if waiting:
            role = self._wait_for_grant(txn, hs)
            if role == "retry":
                return FALLBACK
        res = self.eng.locks.acquire(txn, hs.row, LockMode.EXCLUSIVE, self.cfg.lock_wait_timeout)
        with hs.mutex:
            if hs.leader_pending is txn:
                hs.leader_pending = None
            txn.hot_update_status = HotStatus.NONE
            if res is not Acquire.GRANTED:
                self._kick(hs)
        if res is not Acquire.GRANTED:
            raise AbortSignal(_acquire_cause(res, txn))
        return self.eng._write(txn, hs.row, fn, None, sfu)

    def _drain_wait(self, txn: TxnDescriptor, hs: HotRowState) -> None:
        """Plain lock holder of a hot row waits until no group write is outstanding."""
        t0 = time.monotonic()
        deadline = t0 + self.cfg.lock_wait_timeout
        try:
            while True:
                with hs.mutex:
                    if (not hs.dep_list and not hs.parked and not hs.granting_new_trx
                            and hs.updating is None and hs.reserved is None):
                        return
                if txn.abort_requested is not None:
                    raise AbortSignal(txn.abort_requested)
                if time.monotonic() >= deadline:
                    raise AbortSignal(AbortCause.TIMEOUT, "hot row did not drain")
                time.sleep(self.cfg.spin_delay)
        finally:
            txn.lock_wait_s += time.monotonic() - t0

    # -- Algorithm 2: commit-time release ------------------------------------

    def release_reservation(self, txn: TxnDescriptor, hs: HotRowState) -> None:
        with hs.mutex:
            if hs.reserved is txn:
                hs.reserved = None
                self._kick(hs)

    def hot_commit_release(self, txn: TxnDescriptor, row: RowId) -> None:
        """Leader commit: stop granting, wait for granted followers, release, hand over."""
        hs = self.table.get(row)
        if hs is None or hs.leader is not txn:
            return
        with hs.mutex:
            hs.switching_new_leader = True
        while True:
            with hs.mutex:
                if not hs.granting_new_trx and hs.updating is None:
                    break
            time.sleep(self.cfg.spin_delay)
        self._release_leader(txn, hs)

    def _release_leader(self, txn: TxnDescriptor, hs: HotRowState) -> None:
        with hs.mutex:
            hs.leader = None
        # the lock table may hand the lock straight to an older waiter
        self.eng.locks.release(txn, hs.row)
        with hs.mutex:
            self._kick(hs)
            if hs.leader_pending is None and hs.leader is None and not self.eng.locks.is_locked(hs.row):
                # no successor leader: dynamic batching simply lets the lock go
                hs.switching_new_leader = False
                if not self.cfg.dynamic_batch and not hs.waiting_updates:
                    hs.stalled = True
            elif hs.leader_pending is None and not hs.parked and hs.rollback_pending:
                hs.switching_new_leader = False

    def erase(self, txn: TxnDescriptor) -> None:
        """Commit bookkeeping: drop a committed member from its dependency list."""
        hs = self.table.get(txn.hot_row) if txn.hot_row is not None else None
        if hs is None:
            return
        with hs.mutex:
            try:
                hs.dep_list.remove(txn)
            except ValueError:
                pass
            self._kick(hs)

    # -- Algorithm 3: ordered rollback ---------------------------------------

    def cascade_abort(self, row: RowId, from_txn: TxnDescriptor) -> List[int]:
        hs = self.table.get(row)
        if hs is None:
            return []
        with hs.mutex:
            return self._cascade(hs, from_txn)

    def _cascade(self, hs: HotRowState, from_txn: TxnDescriptor) -> List[int]:
        try:
            idx = hs.dep_list.index(from_txn)
        except ValueError:
            return []
        out = []
        for t in hs.dep_list[idx + 1:]:
            t.request_abort(AbortCause.CASCADE)
            out.append(t.txn_id)
        return out

    def hot_rollback(self, txn: TxnDescriptor, undo: Callable[[], None]) -> None:
        hs = self.table.get(txn.hot_row)
        if hs is None:
            undo()
            return
        with hs.mutex:
            hs.rollback_pending += 1
            if hs.reserved is txn:
                hs.reserved = None
            if hs.updating is txn:
                hs.updating = None
            if hs.leader is txn and txn.hot_update_status is HotStatus.RUNNING:
                hs.switching_new_leader = False
            self._cascade(hs, txn)
        try:
            while True:
                with hs.mutex:
                    if (hs.dep_list and hs.dep_list[-1] is txn and not hs.granting_new_trx
                            and not hs.switching_new_leader and hs.updating is None):
                        break
                time.sleep(self.cfg.spin_delay)
            undo()
        finally:
            with hs.mutex:
                try:
                    hs.dep_list.remove(txn)
                except ValueError:
                    pass
                hs.rollback_pending -= 1
                if hs.leader is txn:
                    # the lock itself goes with the engine's release of all locks
                    hs.leader = None
                if not hs.rollback_pending:
                    self._kick(hs)

    # -- SELECT FOR UPDATE -----------------------------------------------------

    def select_for_update_hot(self, txn: TxnDescriptor, hs: HotRowState):
        return self.update(txn, hs, None, sfu=True)


def _acquire_cause(res: Acquire, txn: TxnDescriptor) -> AbortCause:
    if res is Acquire.TIMED_OUT:
        return AbortCause.TIMEOUT
    if res is Acquire.ABORTED_BY_RULE:
        return AbortCause.RULE
    if res is Acquire.DEADLOCK:
        return AbortCause.DEADLOCK
    return txn.abort_requested or AbortCause.TIMEOUT
