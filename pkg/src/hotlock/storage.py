"""Versioned in-memory row store.

Every row is a newest-first chain of versions. A version carries the commit
timestamp of its writer in ``del_ts`` (``OPEN`` while uncommitted), so a
snapshot read is a walk down the chain comparing ``del_ts`` against the
snapshot's high-water mark. No list of live transactions is ever consulted.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Optional

from .core import OrderingViolation, RowId, RowNotFound, TxnDescriptor

OPEN = math.inf
INITIAL_WRITER = 0


class VersionRecord:
    __slots__ = ("row", "value", "writer_txn", "del_ts", "prev", "hot_order")

    def __init__(self, row, value, writer_txn, del_ts, prev, hot_order=None):
        self.row = row
        self.value = value
        self.writer_txn = writer_txn
        self.del_ts = del_ts
        self.prev = prev
        self.hot_order = hot_order

    def __repr__(self) -> str:
        ts = "OPEN" if self.del_ts is OPEN else self.del_ts
        return f"Version({self.row}, {self.value!r}, by={self.writer_txn}, del_ts={ts})"


@dataclass
class UndoRecord:
    txn_id: int
    row: RowId
    before_image: Any
    after_image: Any
    version: VersionRecord
    write_seq: int
    prev_writer: int


class _Chain:
    __slots__ = ("head", "inside")

    def __init__(self, head: VersionRecord):
        self.head = head
        self.inside: Optional[int] = None


class Storage:
    def __init__(self, rows: Optional[Dict[RowId, Any]] = None):
        self._chains: Dict[RowId, _Chain] = {}
        self._create_lock = threading.Lock()
        self.visible_ts = 0
        # instrumentation
        self.active_list_scans = 0
        self.overlaps = 0
        self.chain_order_violations = 0
        for row, value in (rows or {}).items():
            self.insert_initial(row, value)

    def insert_initial(self, row: RowId, value: Any) -> None:
        with self._create_lock:
            self._chains[row] = _Chain(VersionRecord(row, value, INITIAL_WRITER, 0, None))

    def __contains__(self, row: RowId) -> bool:
        return row in self._chains

    def rows(self) -> Iterable[RowId]:
        return self._chains.keys()

    def _chain(self, row: RowId) -> _Chain:
        try:
            return self._chains[row]
        except KeyError:
            raise RowNotFound(row) from None

    def head(self, row: RowId) -> VersionRecord:
        return self._chain(row).head

    def read(self, txn: TxnDescriptor, row: RowId) -> VersionRecord:
        """Snapshot read; returns the visible version (own write wins)."""
        hw = txn.start_snapshot.high_water
        me = txn.txn_id
        v = self._chain(row).head
        while v is not None:
            if v.writer_txn == me or v.del_ts <= hw:
                return v
            v = v.prev
        raise RowNotFound(row)

    def current_read(self, row: RowId) -> VersionRecord:
        return self._chain(row).head

    def write(self, txn: TxnDescriptor, row: RowId, fn: Callable[[Any], Any],
              hot_order: Optional[int] = None) -> UndoRecord:
        """Read the newest version, compute ``fn(value)`` and push the result.

        Callers hold the row lock or the hot-row execution grant; the
        ``inside`` marker only detects violations of that contract.
        """
        chain = self._chain(row)
        if chain.inside is not None and chain.inside != txn.txn_id:
            self.overlaps += 1
        chain.inside = txn.txn_id
        try:
            prev = chain.head
            return self.apply_update(txn, row, fn(prev.value), hot_order)
        finally:
            chain.inside = None

    def apply_update(self, txn: TxnDescriptor, row: RowId, new_value: Any,
                     hot_order: Optional[int] = None) -> UndoRecord:
        chain = self._chain(row)
        prev = chain.head
        if (hot_order is not None and prev.del_ts is OPEN and prev.hot_order is not None
                and prev.writer_txn != txn.txn_id and prev.hot_order >= hot_order):
            self.chain_order_violations += 1
        v = VersionRecord(row, new_value, txn.txn_id, OPEN, prev, hot_order)
        chain.head = v
        txn.write_seq += 1
        rec = UndoRecord(txn.txn_id, row, prev.value, new_value, v, txn.write_seq, prev.writer_txn)
        txn.undo.append(rec)
        return rec

    def undo_apply(self, record: UndoRecord) -> None:
        chain = self._chain(record.row)
        if chain.head is not record.version:
            raise OrderingViolation(
                f"undo of txn {record.txn_id} on {record.row}: head written by "
                f"txn {chain.head.writer_txn}")
        chain.head = record.version.prev

    def commit_versions(self, txn: TxnDescriptor, commit_ts: int) -> None:
        for rec in txn.undo:
            rec.version.del_ts = commit_ts

    def committed_value(self, row: RowId) -> Any:
        v = self._chain(row).head
        while v.del_ts is OPEN:
            v = v.prev
        return v.value

    def chain_values(self, row: RowId) -> list:
        out = []
        v = self._chain(row).head
        while v is not None:
            out.append(v)
            v = v.prev
        return out

    def snapshot_values(self) -> Dict[RowId, Any]:
        return {row: self.committed_value(row) for row in list(self._chains)}
