"""Undo log and restart recovery.

Log layout: a 5-byte preamble (``HLOG`` plus a format version) followed by
records of the form ``u32 body_length | body | u32 crc32(body)``. The first
body byte is the record type.

The per-transaction header field reuses one 64-bit slot for two meanings:
with the top bit set the low 63 bits are a hot update order, with it clear
they are the commit sequence number. A transaction writes the hot form at its
first hot-row update and appends the commit form when it commits.
"""

from __future__ import annotations

import enum
import json
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, Iterator, List, Optional, Tuple

from .core import EngineError, RowId

MAGIC = b"HLOG"
FORMAT_VERSION = 1
PREAMBLE = MAGIC + bytes([FORMAT_VERSION])

HOT_BIT = 1 << 63
LOW_MASK = HOT_BIT - 1

_LEN = struct.Struct("<I")
_CRC = struct.Struct("<I")
_TXN = struct.Struct("<Q")
_TXN_FIELD = struct.Struct("<QQ")
_ROW = struct.Struct("<III")
_UNDO_HEAD = struct.Struct("<QIIII")  # txn, row(3), write_seq
_INT = struct.Struct("<q")


class RecordType(enum.IntEnum):
    INIT = 1
    HEADER = 2
    UNDO = 3
    COMMIT = 4
    ROLLBACK_DONE = 5


class HeaderKind(enum.Enum):
    HOT_ORDER = "hot_update_order"
    TRX_NO = "trx_no"


class LogFailure(EngineError):
    pass


class CorruptLog(EngineError):
    pass


class SimulatedCrash(Exception):
    """Raised by the recovery crash hook to model a restart interrupted midway."""


def encode_header(kind: HeaderKind, value: int) -> int:
    if not 0 <= value <= LOW_MASK:
        raise ValueError(f"header value {value} out of range")
    return (HOT_BIT | value) if kind is HeaderKind.HOT_ORDER else value


def decode_header(raw: int) -> Tuple[HeaderKind, int]:
    if not 0 <= raw < (1 << 64):
        raise ValueError(f"header field {raw} is not a 64-bit unsigned value")
    if raw & HOT_BIT:
        return HeaderKind.HOT_ORDER, raw & LOW_MASK
    return HeaderKind.TRX_NO, raw


# -- value encoding -----------------------------------------------------------

def _enc_value(v: Any) -> bytes:
    if isinstance(v, int) and not isinstance(v, bool) and -(1 << 63) <= v < (1 << 63):
        return b"i" + _INT.pack(v)
    if isinstance(v, (bytes, bytearray)):
        return b"b" + _LEN.pack(len(v)) + bytes(v)
    raw = json.dumps(v).encode()
    return b"j" + _LEN.pack(len(raw)) + raw


def _dec_value(buf: bytes, off: int) -> Tuple[Any, int]:
    tag = buf[off:off + 1]
    off += 1
    if tag == b"i":
        return _INT.unpack_from(buf, off)[0], off + _INT.size
    (n,) = _LEN.unpack_from(buf, off)
    off += _LEN.size
    raw = buf[off:off + n]
    if len(raw) != n:
        raise CorruptLog("truncated value")
    if tag == b"b":
        return bytes(raw), off + n
    if tag == b"j":
        return json.loads(raw), off + n
    raise CorruptLog(f"unknown value tag {tag!r}")


@dataclass
class LogRecord:
    type: RecordType
    txn_id: int = 0
    row: Optional[RowId] = None
    write_seq: int = 0
    before: Any = None
    after: Any = None
    value: int = 0  # header field or commit sequence


def _encode(rec: LogRecord) -> bytes:
    t = bytes([rec.type])
    if rec.type is RecordType.INIT:
        body = t + _ROW.pack(*rec.row) + _enc_value(rec.after)
    elif rec.type is RecordType.UNDO:
        body = (t + _UNDO_HEAD.pack(rec.txn_id, *rec.row, rec.write_seq)
                + _enc_value(rec.before) + _enc_value(rec.after))
    elif rec.type in (RecordType.HEADER, RecordType.COMMIT):
        body = t + _TXN_FIELD.pack(rec.txn_id, rec.value)
    else:
        body = t + _TXN.pack(rec.txn_id)
    return _LEN.pack(len(body)) + body + _CRC.pack(zlib.crc32(body))


def _decode(body: bytes) -> LogRecord:
    try:
        rt = RecordType(body[0])
    except (ValueError, IndexError):
        raise CorruptLog("unknown record type") from None
    try:
        if rt is RecordType.INIT:
            row = RowId(*_ROW.unpack_from(body, 1))
            value, _ = _dec_value(body, 1 + _ROW.size)
            return LogRecord(rt, row=row, after=value)
        if rt is RecordType.UNDO:
            txn, s, p, h, seq = _UNDO_HEAD.unpack_from(body, 1)
            before, off = _dec_value(body, 1 + _UNDO_HEAD.size)
            after, _ = _dec_value(body, off)
            return LogRecord(rt, txn, RowId(s, p, h), seq, before, after)
        if rt in (RecordType.HEADER, RecordType.COMMIT):
            txn, value = _TXN_FIELD.unpack_from(body, 1)
            return LogRecord(rt, txn, value=value)
        (txn,) = _TXN.unpack_from(body, 1)
        return LogRecord(rt, txn)
    except struct.error as exc:
        raise CorruptLog(str(exc)) from None


def iter_records(f: BinaryIO) -> Iterator[Tuple[LogRecord, int]]:
    """Yield (record, end_offset) for each valid record; stops at the first bad one."""
    pre = f.read(len(PREAMBLE))
    if pre != PREAMBLE:
        if not pre:
            return
        raise CorruptLog("bad log preamble")
    pos = len(PREAMBLE)
    while True:
        head = f.read(_LEN.size)
        if len(head) < _LEN.size:
            return
        (n,) = _LEN.unpack(head)
        body = f.read(n)
        crc = f.read(_CRC.size)
        if len(body) < n or len(crc) < _CRC.size or _CRC.unpack(crc)[0] != zlib.crc32(body):
            return
        try:
            rec = _decode(body)
        except CorruptLog:
            return
        pos += _LEN.size + n + _CRC.size
        yield rec, pos


class UndoLog:
    """Append-only log shared by all engine threads."""

    def __init__(self, path: str, fsync: bool = False):
        self.path = path
        self.fsync = fsync
        self._mutex = threading.Lock()
        self.failed: Optional[BaseException] = None
        self.records_written = 0
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self._f = open(path, "ab")
        if fresh:
            self._f.write(PREAMBLE)
            self._f.flush()

    def _append(self, rec: LogRecord) -> None:
        data = _encode(rec)
        with self._mutex:
            if self.failed is not None:
                raise LogFailure("log writer halted") from self.failed
            try:
                self._f.write(data)
            except (OSError, ValueError) as exc:
                self.failed = exc
                raise LogFailure(str(exc)) from exc
            self.records_written += 1

    def append_init(self, row: RowId, value: Any) -> None:
        self._append(LogRecord(RecordType.INIT, row=row, after=value))

    def append_header(self, txn_id: int, kind: HeaderKind, value: int) -> None:
        self._append(LogRecord(RecordType.HEADER, txn_id, value=encode_header(kind, value)))

    def append_undo(self, txn_id: int, row: RowId, write_seq: int, before: Any, after: Any) -> None:
        self._append(LogRecord(RecordType.UNDO, txn_id, row, write_seq, before, after))

    def append_commit_marker(self, txn_id: int, commit_seq: int) -> None:
        self._append(LogRecord(RecordType.COMMIT, txn_id, value=commit_seq))

    def append_rollback_done(self, txn_id: int) -> None:
        self._append(LogRecord(RecordType.ROLLBACK_DONE, txn_id))

    def flush(self) -> None:
        with self._mutex:
            if self.failed is not None:
                raise LogFailure("log writer halted") from self.failed
            try:
                self._f.flush()
                if self.fsync:
                    os.fsync(self._f.fileno())
            except OSError as exc:
                self.failed = exc
                raise LogFailure(str(exc)) from exc

    def close(self) -> None:
        with self._mutex:
            if not self._f.closed:
                try:
                    self._f.flush()
                finally:
                    self._f.close()


# -- restart --------------------------------------------------------------------

@dataclass
class _TxnLog:
    txn_id: int
    writes: List[LogRecord] = field(default_factory=list)
    hot_order: Optional[int] = None
    trx_no: Optional[int] = None
    committed: bool = False
    rolled_back: bool = False


@dataclass
class RecoveryResult:
    state: Dict[RowId, Any]
    committed: Dict[int, int]  # txn_id -> commit_seq
    rolled_back: List[int]  # txn ids rolled back by this run, in order
    rollback_orders: List[Optional[int]]  # their hot update orders
    already_rolled_back: List[int]
    truncated_bytes: int
    ordering_violations: int = 0

    def summary(self) -> dict:
        return {
            "rows": len(self.state),
            "committed": len(self.committed),
            "rolled_back": self.rolled_back,
            "rollback_orders": self.rollback_orders,
            "already_rolled_back": len(self.already_rolled_back),
            "truncated_bytes": self.truncated_bytes,
            "ordering_violations": self.ordering_violations,
        }


def truncate_corrupt_tail(log_path: str) -> Tuple[List[LogRecord], int]:
    """Read every valid record; cut the file after the last one. Returns (records, bytes cut)."""
    size = os.path.getsize(log_path)
    recs: List[LogRecord] = []
    end = len(PREAMBLE) if size >= len(PREAMBLE) else 0
    with open(log_path, "rb") as f:
        for rec, pos in iter_records(f):
            recs.append(rec)
            end = pos
    if end < size:
        with open(log_path, "r+b") as f:
            f.truncate(end)
    return recs, size - end


def recover(log_path: str, crash_after: Optional[int] = None) -> RecoveryResult:
    """Rebuild committed state from the log and roll back every active transaction.

    Active transactions that carry a hot update order are rolled back first,
    newest order first; the rest follow by descending txn id. Each rollback
    is made durable with a marker, so repeating recovery is a no-op for it.
    ``crash_after`` raises SimulatedCrash once that many rollbacks are logged.
    """
    recs, cut = truncate_corrupt_tail(log_path)
    values: Dict[RowId, Any] = {}
    # per row: stack of (txn_id, before, after) for writes not yet undone
    chains: Dict[RowId, List[Tuple[int, Any, Any]]] = {}
    txns: Dict[int, _TxnLog] = {}
    violations = 0

    def undo_txn(t: _TxnLog) -> int:
        bad = 0
        for w in reversed(t.writes):
            stack = chains[w.row]
            if not stack or stack[-1][0] != t.txn_id:
                bad += 1
                # restore as best we can: drop the newest entry of this txn
                for i in range(len(stack) - 1, -1, -1):
                    if stack[i][0] == t.txn_id:
                        del stack[i]
                        break
            else:
                stack.pop()
            values[w.row] = w.before
        return bad

    for rec in recs:
        if rec.type is RecordType.INIT:
            values[rec.row] = rec.after
            chains[rec.row] = []
            continue
        t = txns.get(rec.txn_id)
        if t is None:
            t = txns[rec.txn_id] = _TxnLog(rec.txn_id)
        if rec.type is RecordType.UNDO:
            t.writes.append(rec)
            values[rec.row] = rec.after
            chains.setdefault(rec.row, []).append((rec.txn_id, rec.before, rec.after))
        elif rec.type is RecordType.HEADER:
            kind, v = decode_header(rec.value)
            if kind is HeaderKind.HOT_ORDER:
                t.hot_order = v
            else:
                t.trx_no = v
        elif rec.type is RecordType.COMMIT:
            t.committed = True
            t.trx_no = rec.value
        elif rec.type is RecordType.ROLLBACK_DONE:
            if not t.rolled_back and not t.committed:
                violations += undo_txn(t)
            t.rolled_back = True

    actives = [t for t in txns.values() if t.writes and not t.committed and not t.rolled_back]
    hot = sorted((t for t in actives if t.hot_order is not None), key=lambda t: t.hot_order, reverse=True)
    cold = sorted((t for t in actives if t.hot_order is None), key=lambda t: t.txn_id, reverse=True)

    done: List[int] = []
    orders: List[Optional[int]] = []
    log = UndoLog(log_path)
    try:
        for t in hot + cold:
            if crash_after is not None and len(done) >= crash_after:
                raise SimulatedCrash(f"crash after {len(done)} rollbacks")
            violations += undo_txn(t)
            log.append_rollback_done(t.txn_id)
            log.flush()
            t.rolled_back = True
            done.append(t.txn_id)
            orders.append(t.hot_order)
    finally:
        log.close()

    return RecoveryResult(
        state=values,
        committed={t.txn_id: t.trx_no for t in txns.values() if t.committed},
        rolled_back=done,
        rollback_orders=orders,
        already_rolled_back=[t.txn_id for t in txns.values() if t.rolled_back and t.txn_id not in done],
        truncated_bytes=cut,
        ordering_violations=violations,
    )
