"""Execution history recording and offline checks.

Engine threads append events to thread-local buffers; every event takes its
sequence number from one shared counter, so merging the buffers by ``seq``
restores the global order. Checks run single-threaded after the run.
"""

from __future__ import annotations

import enum
import itertools
import json
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import networkx as nx

from .core import RowId
from .storage import INITIAL_WRITER


class EventKind(enum.Enum):
    BEGIN = "BEGIN"
    READ = "READ"
    WRITE = "WRITE"
    SFU = "SFU"
    COMMIT = "COMMIT"
    ABORT = "ABORT"


TERMINAL = (EventKind.COMMIT, EventKind.ABORT)


@dataclass
class HistoryEvent:
    seq: int
    txn_id: int
    kind: EventKind
    row: Optional[RowId] = None
    value: Any = None  # observed (READ/SFU) or written (WRITE)
    prev: Any = None  # value overwritten by a WRITE
    source: Optional[int] = None  # writer of the version read or overwritten
    hot_order: Optional[int] = None
    hot_row: Optional[RowId] = None
    commit_seq: Optional[int] = None
    cause: Optional[str] = None

    def to_json(self) -> str:
        d = {"seq": self.seq, "txn": self.txn_id, "kind": self.kind.value}
        for k in ("row", "hot_row"):
            v = getattr(self, k)
            if v is not None:
                d[k] = list(v)
        for k in ("value", "prev", "source", "hot_order", "commit_seq", "cause"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "HistoryEvent":
        d = json.loads(line)
        return cls(
            seq=d["seq"], txn_id=d["txn"], kind=EventKind(d["kind"]),
            row=RowId(*d["row"]) if "row" in d else None,
            value=d.get("value"), prev=d.get("prev"), source=d.get("source"),
            hot_order=d.get("hot_order"),
            hot_row=RowId(*d["hot_row"]) if "hot_row" in d else None,
            commit_seq=d.get("commit_seq"), cause=d.get("cause"),
        )


class HistoryRecorder:
    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._seq = itertools.count(1)
        self._local = threading.local()
        self._buffers: List[list] = []
        self._reg = threading.Lock()

    def _buf(self) -> list:
        b = getattr(self._local, "buf", None)
        if b is None:
            b = self._local.buf = []
            with self._reg:
                self._buffers.append(b)
        return b

    def record(self, txn_id: int, kind: EventKind, row: Optional[RowId] = None, **kw) -> None:
        if self.enabled:
            self._buf().append(HistoryEvent(next(self._seq), txn_id, kind, row, **kw))

    def events(self) -> List[HistoryEvent]:
        with self._reg:
            out = [e for b in self._buffers for e in b]
        out.sort(key=lambda e: e.seq)
        return out

    def clear(self) -> None:
        with self._reg:
            for b in self._buffers:
                b.clear()


def dump(events: Iterable[HistoryEvent], path: str) -> int:
    n = 0
    with open(path, "w") as f:
        for e in events:
            f.write(e.to_json())
            f.write("\n")
            n += 1
    return n


def load(path: str) -> List[HistoryEvent]:
    with open(path) as f:
        return [HistoryEvent.from_json(line) for line in f if line.strip()]


class MalformedHistory(ValueError):
    pass


@dataclass
class CheckResult:
    ok: bool
    cycle: List[Tuple[int, int, str]] = field(default_factory=list)
    dirty_reads: List[Tuple[int, int]] = field(default_factory=list)  # (reader, aborted writer)
    committed: int = 0
    aborted: int = 0
    edges: int = 0

    def to_dict(self) -> dict:
        return {"ok": self.ok, "cycle": self.cycle, "dirty_reads": self.dirty_reads[:20],
                "committed": self.committed, "aborted": self.aborted, "edges": self.edges}


def _outcomes(events: List[HistoryEvent]) -> Dict[int, EventKind]:
    out: Dict[int, EventKind] = {}
    last = 0
    for e in events:
        if e.seq <= last:
            raise MalformedHistory(f"event seq {e.seq} not increasing")
        last = e.seq
        if e.txn_id in out:
            raise MalformedHistory(f"txn {e.txn_id} has events after its {out[e.txn_id].value}")
        if e.kind in TERMINAL:
            out[e.txn_id] = e.kind
    return out


def conflict_graph(events: List[HistoryEvent]) -> Tuple[nx.DiGraph, List[Tuple[int, int]], Dict[int, EventKind]]:
    """Serialization graph over committed transactions.

    Versions of a row are installed in the order of their WRITE events. A read
    (or the current read implicit in a write) of writer S's version yields
    S -> reader, and reader -> W for the committed writer W installed right
    after S. Consecutive committed writers yield write-write edges.
    """
    outcome = _outcomes(events)
    committed = {t for t, k in outcome.items() if k is EventKind.COMMIT}
    txns = {e.txn_id for e in events}
    if txns - set(outcome):
        raise MalformedHistory(f"{len(txns - set(outcome))} transactions never finished")

    g = nx.DiGraph()
    g.add_nodes_from(committed)
    order: Dict[RowId, List[int]] = defaultdict(list)  # committed install order per row
    reads: List[Tuple[int, RowId, int]] = []
    dirty: List[Tuple[int, int]] = []
    for e in events:
        if e.txn_id not in committed or e.row is None:
            continue
        if e.kind is EventKind.WRITE:
            lst = order[e.row]
            if not lst or lst[-1] != e.txn_id:
                lst.append(e.txn_id)
        if e.kind in (EventKind.READ, EventKind.SFU, EventKind.WRITE) and e.source is not None:
            src = e.source
            if src != e.txn_id:
                if src != INITIAL_WRITER and src not in committed:
                    dirty.append((e.txn_id, src))
                reads.append((e.txn_id, e.row, src))

    pos: Dict[RowId, Dict[int, int]] = {}
    for row, lst in order.items():
        pos[row] = {t: i for i, t in enumerate(lst)}
        for a, b in zip(lst, lst[1:]):
            if a != b:
                g.add_edge(a, b, kind="ww")
    for reader, row, src in reads:
        lst = order.get(row, [])
        if src == INITIAL_WRITER:
            nxt_i = 0
        else:
            if src not in committed:
                continue
            g.add_edge(src, reader, kind="wr")
            i = pos.get(row, {}).get(src)
            if i is None:
                raise MalformedHistory(f"txn {reader} read a version of {row} that txn {src} never wrote")
            nxt_i = i + 1
        # the next committed version after the one read (skipping the reader itself)
        while nxt_i < len(lst) and lst[nxt_i] == reader:
            nxt_i += 1
        if nxt_i < len(lst):
            g.add_edge(reader, lst[nxt_i], kind="rw")
    return g, dirty, outcome


def check_serializable(events: List[HistoryEvent]) -> CheckResult:
    g, dirty, outcome = conflict_graph(events)
    n_commit = sum(1 for k in outcome.values() if k is EventKind.COMMIT)
    res = CheckResult(ok=not dirty, dirty_reads=dirty, committed=n_commit,
                      aborted=len(outcome) - n_commit, edges=g.number_of_edges())
    try:
        cyc = nx.find_cycle(g)
    except nx.NetworkXNoCycle:
        return res
    res.ok = False
    res.cycle = [(a, b, g.edges[a, b]["kind"]) for a, b in cyc]
    return res


@dataclass
class OracleResult:
    ok: bool
    expected: Any
    actual: Any


def check_counter_oracle(events: List[HistoryEvent], row: RowId, initial: int, final: int,
                         delta: Optional[int] = None) -> OracleResult:
    """final must equal initial plus the committed increments of ``row``.

    With ``delta`` every committed write counts as +delta; otherwise each
    write contributes the difference it recorded.
    """
    outcome = _outcomes(events)
    total = 0
    for e in events:
        if e.kind is EventKind.WRITE and e.row == row and outcome.get(e.txn_id) is EventKind.COMMIT:
            total += delta if delta is not None else e.value - e.prev
    expected = initial + total
    return OracleResult(expected == final, expected, final)


def check_commit_order(events: List[HistoryEvent]) -> List[Tuple[int, int]]:
    """Pairs of committed txns on one hot row whose commit order contradicts their hot order."""
    per_row: Dict[RowId, List[Tuple[int, int, int]]] = defaultdict(list)
    for e in events:
        if e.kind is EventKind.COMMIT and e.hot_order is not None:
            per_row[e.hot_row].append((e.hot_order, e.commit_seq, e.txn_id))
    bad = []
    for lst in per_row.values():
        lst.sort()
        for (o1, c1, t1), (o2, c2, t2) in zip(lst, lst[1:]):
            if c1 >= c2:
                bad.append((t1, t2))
    return bad


def check_rollback_order(events: List[HistoryEvent]) -> List[Tuple[int, int]]:
    """Pairs (a, b) violating reverse-order rollback on a hot row.

    If b joined a's row after a (larger hot order) while a was still live,
    b must have aborted, and finished aborting before a did.
    """
    joined: Dict[int, int] = {}  # txn -> seq of first hot write
    end: Dict[int, Tuple[int, EventKind]] = {}
    members: Dict[RowId, List[Tuple[int, int]]] = defaultdict(list)
    for e in events:
        if e.kind in (EventKind.WRITE, EventKind.SFU) and e.hot_order is not None and e.txn_id not in joined:
            joined[e.txn_id] = e.seq
            members[e.row].append((e.hot_order, e.txn_id))
        elif e.kind in TERMINAL:
            end[e.txn_id] = (e.seq, e.kind)
    bad = []
    for lst in members.values():
        lst.sort()
        for i, (oa, a) in enumerate(lst):
            if end.get(a, (0, None))[1] is not EventKind.ABORT:
                continue
            a_end = end[a][0]
            for ob, b in lst[i + 1:]:
                if joined[b] > a_end:
                    # hot writes on one row are serialized, so later members joined later still
                    break
                b_end, b_kind = end.get(b, (None, None))
                if b_kind is not EventKind.ABORT or b_end > a_end:
                    bad.append((a, b))
    return bad


def cascade_stats(events: List[HistoryEvent]) -> Dict[str, int]:
    causes: Dict[str, int] = defaultdict(int)
    for e in events:
        if e.kind is EventKind.ABORT:
            causes[e.cause or "unknown"] += 1
    return dict(causes)
