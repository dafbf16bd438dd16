"""Engine facade: transaction lifecycle and the read/update/commit entry points."""

from __future__ import annotations

import logging
import threading
import time
from collections import defaultdict
from typing import Any, Callable, Dict, Iterable, Optional, Tuple

from .commit import CommitPipeline
from .core import (
    AbortCause,
    EngineClosed,
    EngineConfig,
    EngineError,
    GlobalCounters,
    Protocol,
    RowId,
    RowNotFound,
    Snapshot,
    TxnAborted,
    TxnDescriptor,
    TxnState,
)
from .history import EventKind, HistoryRecorder
from .hotspot import FALLBACK, AbortSignal, HotspotManager, _acquire_cause
from .locks import Acquire, LockManager, LockMode
from .recovery import HeaderKind, UndoLog
from .storage import Storage

log = logging.getLogger(__name__)


class Engine:
    def __init__(self, config: Optional[EngineConfig] = None,
                 rows: Optional[Dict[RowId, Any]] = None,
                 log_path: Optional[str] = None, record_history: bool = True,
                 background: bool = True, fsync: bool = False):
        self.config = (config or EngineConfig()).validate()
        self.counters = GlobalCounters()
        self.storage = Storage()
        self.locks = LockManager(on_wait=self._on_wait, on_release=self._on_release)
        self.hot = HotspotManager(self)
        self.history = HistoryRecorder(enabled=record_history)
        self.log: Optional[UndoLog] = UndoLog(log_path, fsync=fsync) if log_path else None
        self.pipeline = CommitPipeline(
            self._flush_stage, self._commit_stage,
            sync_latency=self.config.commit_latency_injection,
            group_commit=self.config.group_commit,
            sync=self._sync_stage)
        self.committed = 0
        self.started = 0
        self.abort_counts: Dict[str, int] = defaultdict(int)
        self.lock_wait_total = 0.0
        self._stats_mutex = threading.Lock()
        self._closed = False
        self._halted: Optional[BaseException] = None
        if rows:
            self.load(rows)
        self._stop = threading.Event()
        self._sweeper: Optional[threading.Thread] = None
        if background:
            self._sweeper = threading.Thread(target=self._sweep_loop, name="hotspot-sweep", daemon=True)
            self._sweeper.start()

    # -- setup ------------------------------------------------------------------

    def load(self, rows: Dict[RowId, Any]) -> None:
        for row, value in rows.items():
            self.storage.insert_initial(row, value)
            if self.log is not None:
                self.log.append_init(row, value)
        if self.log is not None:
            self.log.flush()

    def set_protocol(self, config: EngineConfig) -> bool:
        """Switch configuration; rows hot under the old protocol drain first."""
        config.validate()
        if config == self.config:
            return True
        old = self.config
        self.config = config
        self.pipeline.sync_latency = config.commit_latency_injection
        self.pipeline.set_group_commit(config.group_commit)
        if config.protocol is not old.protocol:
            self.hot.drain_all(config.protocol)
        return True

    def set_group_commit(self, enabled: bool) -> None:
        self.set_protocol(self.config.with_(group_commit=enabled))

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.config.sweep_interval):
            try:
                self.hot.sweep()
            except Exception:  # keep the monitor alive; failures show up in tests
                log.exception("hotspot sweep failed")

    def close(self) -> None:
        self._closed = True
        self._stop.set()
        if self._sweeper is not None:
            self._sweeper.join()
        if self.log is not None:
            self.log.close()

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- hooks from the lock manager -------------------------------------------

    def _on_wait(self, row: RowId, qlen: int) -> None:
        self.hot.maybe_promote(row, qlen)

    def _on_release(self, row: RowId) -> None:
        if row in self.hot.table:
            self.hot.kick(row)

    # -- lifecycle ----------------------------------------------------------------

    def begin(self) -> TxnDescriptor:
        if self._closed:
            raise EngineClosed("engine is shut down")
        tid = self.counters.next_txn_id.next()
        txn = TxnDescriptor(tid, Snapshot(self.storage.visible_ts, tid), self.config.protocol)
        with self._stats_mutex:
            self.started += 1
        self.history.record(tid, EventKind.BEGIN)
        return txn

    def _check(self, txn: TxnDescriptor) -> None:
        if txn.state is not TxnState.ACTIVE:
            raise EngineError(f"txn {txn.txn_id} is {txn.state.value}")
        if txn.abort_requested is not None:
            self._fail(txn, txn.abort_requested)

    def _fail(self, txn: TxnDescriptor, cause: AbortCause, detail: str = "") -> None:
        self.rollback(txn, cause)
        raise TxnAborted(txn.txn_id, cause, detail)

    def read(self, txn: TxnDescriptor, row: RowId) -> Any:
        """Snapshot read; takes no locks."""
        self._check(txn)
        v = self.storage.read(txn, row)
        self.history.record(txn.txn_id, EventKind.READ, row, value=v.value, source=v.writer_txn)
        return v.value

    def update(self, txn: TxnDescriptor, row: RowId, fn: Callable[[Any], Any]) -> Any:
        """Apply ``fn`` to the row's current value; returns the new value."""
        return self._op(txn, row, fn, False)

    def increment(self, txn: TxnDescriptor, row: RowId, delta: int = 1) -> Any:
        return self._op(txn, row, lambda v: v + delta, False)

    def write(self, txn: TxnDescriptor, row: RowId, value: Any) -> Any:
        return self._op(txn, row, lambda _: value, False)

    def select_for_update(self, txn: TxnDescriptor, row: RowId) -> Any:
        """Locking read of the newest version; reserves the row for a later update."""
        return self._op(txn, row, None, True)

    def _op(self, txn, row, fn, sfu):
        self._check(txn)
        if row not in self.storage:
            raise RowNotFound(row)
        try:
            hs = self.hot.table.get(row)
            if hs is not None:
                res = self.hot.update(txn, hs, fn, sfu)
                if res is not FALLBACK:
                    return res
            return self._plain(txn, row, fn, sfu)
        except AbortSignal as sig:
            self._fail(txn, sig.cause, str(sig))

    def _plain(self, txn: TxnDescriptor, row: RowId, fn, sfu: bool):
        proto = txn.protocol
        res = self.locks.acquire(
            txn, row, LockMode.EXCLUSIVE, self.config.lock_wait_timeout,
            detect=proto is Protocol.TWO_PL,
            rule_check=self.hot.rule_check if proto is Protocol.GROUP_LOCK else None)
        if res is Acquire.FOLLOWER:
            # folded into the hot row's group while queued in the lock table
            return self.hot._run(txn, self.hot.table.get(row), fn, sfu, leader=False)
        if res is not Acquire.GRANTED:
            raise AbortSignal(_acquire_cause(res, txn))
        hs = self.hot.table.get(row)
        if hs is not None:
            return self.hot.after_lock_grant(txn, hs, fn, sfu)
        return self._write(txn, row, fn, None, sfu)

    def _write(self, txn: TxnDescriptor, row: RowId, fn, hot_order: Optional[int], sfu: bool):
        """Storage access for a caller that holds the lock or the group grant."""
        txn.ops += 1
        if sfu:
            v = self.storage.current_read(row)
            self.history.record(txn.txn_id, EventKind.SFU, row, value=v.value, source=v.writer_txn,
                                hot_order=hot_order)
            return v.value
        if self.log is not None and hot_order is not None and not txn.header_logged:
            self.log.append_header(txn.txn_id, HeaderKind.HOT_ORDER, hot_order)
            txn.header_logged = True
        rec = self.storage.write(txn, row, fn, hot_order)
        if self.log is not None:
            self.log.append_undo(txn.txn_id, row, rec.write_seq, rec.before_image, rec.after_image)
        self.history.record(txn.txn_id, EventKind.WRITE, row, value=rec.after_image,
                            prev=rec.before_image, source=rec.prev_writer, hot_order=hot_order)
        return rec.after_image

    # -- commit -----------------------------------------------------------------

    def commit(self, txn: TxnDescriptor) -> int:
        """Commit; returns the commit sequence number (0 for read-only txns)."""
        self._check(txn)
        if self._halted is not None:
            self._fail(txn, AbortCause.USER, "commits halted after log failure")
        if not txn.undo and not txn.held_locks and txn.hot_update_order is None:
            txn.transition(TxnState.PREPARING)
            txn.transition(TxnState.COMMITTED)
            self.history.record(txn.txn_id, EventKind.COMMIT, commit_seq=0)
            with self._stats_mutex:
                self.committed += 1
            return 0
        try:
            if txn.hot_update_order is not None:
                ticket = self._admit_hot(txn)
            else:
                txn.transition(TxnState.PREPARING)
                txn.admitted = True
                ticket = self.pipeline.enqueue(txn)
        except AbortSignal as sig:
            self._fail(txn, sig.cause, str(sig))
        try:
            self.pipeline.process(ticket)
        except BaseException as exc:
            self._halted = exc
            raise
        return txn.commit_seq

    def _admit_hot(self, txn: TxnDescriptor):
        """Enter the flush queue only after the dependency-list predecessor did.

        A transaction entering the queue also admits the successors already
        waiting behind it, so a group that reaches commit together shares a batch.
        """
        hs = self.hot.table.get(txn.hot_row)
        t0 = time.monotonic()
        deadline = t0 + 10 * self.config.lock_wait_timeout
        try:
            while True:
                with hs.mutex:
                    if txn.admitted:
                        return txn.ticket
                    if txn.abort_requested is not None:
                        txn.at_gate = False
                        raise AbortSignal(txn.abort_requested)
                    i = hs.dep_list.index(txn)
                    if i == 0 or hs.dep_list[i - 1].admitted:
                        self._admit_locked(hs, txn)
                        for nxt in hs.dep_list[i + 1:]:
                            if not nxt.at_gate or nxt.abort_requested is not None:
                                break
                            self._admit_locked(hs, nxt)
                            nxt.wake_event.set()
                        return txn.ticket
                    txn.at_gate = True
                    txn.wake_event.clear()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    with hs.mutex:
                        if not txn.admitted:
                            txn.at_gate = False
                            raise AbortSignal(AbortCause.TIMEOUT, "predecessor never reached commit")
                    continue
                txn.wake_event.wait(remaining)
        finally:
            txn.lock_wait_s += time.monotonic() - t0

    def _admit_locked(self, hs, txn: TxnDescriptor) -> None:
        if hs.reserved is txn:
            hs.reserved = None
            self.hot._kick(hs)
        txn.at_gate = False
        txn.transition(TxnState.PREPARING)
        txn.admitted = True
        txn.ticket = self.pipeline.enqueue(txn)
        i = hs.dep_list.index(txn)
        if i + 1 < len(hs.dep_list):
            hs.dep_list[i + 1].wake_event.set()

    def _flush_stage(self, members) -> None:
        for t in members:
            t.commit_seq = self.counters.next_commit_seq.next()
            if self.log is not None:
                self.log.append_header(t.txn_id, HeaderKind.TRX_NO, t.commit_seq)
                self.log.append_commit_marker(t.txn_id, t.commit_seq)

    def _sync_stage(self) -> None:
        if self.log is not None:
            self.log.flush()

    def _commit_stage(self, members) -> None:
        for t in members:
            self.storage.commit_versions(t, t.commit_seq)
            self.storage.visible_ts = t.commit_seq
            self.history.record(t.txn_id, EventKind.COMMIT, commit_seq=t.commit_seq,
                                hot_order=t.hot_update_order, hot_row=t.hot_row)
            if t.hot_row is not None and t.is_leader:
                self.hot.hot_commit_release(t, t.hot_row)
            self.locks.release_all(t)
            if t.hot_update_order is not None:
                self.hot.erase(t)
            t.transition(TxnState.COMMITTED)
        with self._stats_mutex:
            self.committed += len(members)
            self.lock_wait_total += sum(t.lock_wait_s for t in members)

    # -- rollback -----------------------------------------------------------------

    def rollback(self, txn: TxnDescriptor, cause: AbortCause = AbortCause.USER) -> None:
        """Undo every write of ``txn`` and release its locks. Idempotent."""
        if txn.finished:
            return
        if txn.hot_update_order is not None:
            self.hot.hot_rollback(txn, lambda: self._undo(txn, cause))
        else:
            self._undo(txn, cause)
        txn.transition(TxnState.ABORTED)
        self.locks.release_all(txn)
        with self._stats_mutex:
            self.abort_counts[cause.value] += 1
            self.lock_wait_total += txn.lock_wait_s

    def _undo(self, txn: TxnDescriptor, cause: AbortCause) -> None:
        for rec in reversed(txn.undo):
            self.storage.undo_apply(rec)
        if self.log is not None and txn.undo:
            self.log.append_rollback_done(txn.txn_id)
        self.history.record(txn.txn_id, EventKind.ABORT, cause=cause.value,
                            hot_order=txn.hot_update_order, hot_row=txn.hot_row)

    # -- reporting ----------------------------------------------------------------

    def stats(self) -> Dict[str, Any]:
        h = self.hot
        p = self.pipeline
        return {
            "committed": self.committed,
            "started": self.started,
            "aborts": dict(self.abort_counts),
            "lock_acquisitions": self.locks.acquisitions,
            "lock_wait_time": self.lock_wait_total,
            "fast_path": self.locks.fast_path,
            "materialized_locks": self.locks.materialized,
            "deadlock_checks": self.locks.detect_calls,
            "mutex_violations": self.locks.mutex_violations,
            "hotspot_promotions": h.promotions,
            "hotspot_evictions": h.evictions,
            "group_count": h.groups,
            "hot_updates": h.hot_updates,
            "follower_grants": h.grants,
            "sweep_wakes": h.sweep_wakes,
            "background_grants": h.background_grants,
            "overlaps": self.storage.overlaps,
            "chain_order_violations": self.storage.chain_order_violations,
            "active_list_scans": self.storage.active_list_scans,
            "commit_batches": p.batches,
            "sync_sleeps": p.sync_sleeps,
            "sync_sleep_total": p.sync_sleep_total,
        }

    def row_lock_acquisitions(self, row: RowId) -> int:
        return self.locks.row_acquisitions.get(row, 0)


def make_rows(n: int, value: Any = 0, space_id: int = 1, per_page: int = 100) -> Dict[RowId, Any]:
    """``n`` rows laid out ``per_page`` to a page."""
    return {RowId(space_id, i // per_page, i % per_page): value for i in range(n)}


def row_of(i: int, space_id: int = 1, per_page: int = 100) -> RowId:
    return RowId(space_id, i // per_page, i % per_page)
