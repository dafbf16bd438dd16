"""Shared domain types: row identity, transaction descriptors, engine config."""

from __future__ import annotations

import enum
import itertools
import threading
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple, Optional


class RowId(NamedTuple):
    """Logical row address: (space_id, page_no, heap_no).

    Ordering, equality and hashing come from the tuple.
    """

    space_id: int
    page_no: int
    heap_no: int

    def __str__(self) -> str:
        return f"{self.space_id}:{self.page_no}:{self.heap_no}"


class Protocol(enum.Enum):
    TWO_PL = "2pl"
    QUEUE_LOCK = "queue"
    GROUP_LOCK = "group"


class TxnState(enum.Enum):
    ACTIVE = "ACTIVE"
    PREPARING = "PREPARING"
    COMMITTED = "COMMITTED"
    ABORTED = "ABORTED"


class HotStatus(enum.Enum):
    NONE = "NONE"
    WAITING = "WAITING"
    GRANTED = "GRANTED"
    RUNNING = "RUNNING"


class AbortCause(enum.Enum):
    TIMEOUT = "timeout"
    RULE = "rule_abort"
    CASCADE = "cascade"
    INJECTED = "injected"
    DEADLOCK = "deadlock"
    HOT_LIMIT = "hot_limit"
    USER = "user"


_TRANSITIONS = {
    TxnState.ACTIVE: {TxnState.PREPARING, TxnState.ABORTED},
    TxnState.PREPARING: {TxnState.COMMITTED, TxnState.ABORTED},
    TxnState.COMMITTED: set(),
    TxnState.ABORTED: set(),
}


class EngineError(Exception):
    pass


class ConfigError(EngineError, ValueError):
    pass


class EngineClosed(EngineError):
    pass


class RowNotFound(EngineError, KeyError):
    pass


class OrderingViolation(EngineError):
    """Undo attempted on a version that is not the chain head."""


class TxnAborted(EngineError):
    """Raised to the client after the engine has rolled the transaction back."""

    def __init__(self, txn_id: int, cause: AbortCause, detail: str = ""):
        self.txn_id = txn_id
        self.cause = cause
        msg = f"txn {txn_id} aborted ({cause.value})"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class EngineConfig:
    protocol: Protocol = Protocol.GROUP_LOCK
    hot_threshold: int = 32
    group_batch_size: int = 10
    lock_wait_timeout: float = 1.0
    spin_delay: float = 10e-6
    sweep_interval: float = 0.010
    commit_latency_injection: float = 0.0
    dynamic_batch: bool = True
    group_commit: bool = True
    # a second hot row in one transaction: "reject" aborts, "plain" locks it conventionally
    multi_hot_policy: str = "reject"

    def validate(self) -> "EngineConfig":
        if not isinstance(self.protocol, Protocol):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.hot_threshold < 1:
            raise ConfigError("hot_threshold must be >= 1")
        if self.group_batch_size < 1:
            raise ConfigError("group_batch_size must be >= 1")
        if self.spin_delay < 0 or self.sweep_interval <= 0:
            raise ConfigError("spin_delay must be >= 0 and sweep_interval > 0")
        if self.lock_wait_timeout <= self.spin_delay:
            raise ConfigError("lock_wait_timeout must exceed spin_delay")
        if self.commit_latency_injection < 0:
            raise ConfigError("commit_latency_injection must be >= 0")
        if self.multi_hot_policy not in ("reject", "plain"):
            raise ConfigError("multi_hot_policy must be 'reject' or 'plain'")
        return self

    def with_(self, **changes) -> "EngineConfig":
        return replace(self, **changes).validate()


class Counter:
    """Monotonic increment-and-get; next() on itertools.count is atomic in CPython."""

    def __init__(self, start: int = 1):
        self._it = itertools.count(start)
        self._last = start - 1

    def next(self) -> int:
        v = next(self._it)
        self._last = v
        return v

    @property
    def last(self) -> int:
        return self._last


@dataclass
class GlobalCounters:
    next_txn_id: Counter = field(default_factory=Counter)
    global_hot_update_order: Counter = field(default_factory=Counter)
    next_commit_seq: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class Snapshot:
    high_water: int
    own_txn: int


@dataclass(eq=False)
class TxnDescriptor:
    txn_id: int
    start_snapshot: Snapshot
    protocol: Protocol
    state: TxnState = TxnState.ACTIVE
    hot_update_status: HotStatus = HotStatus.NONE
    is_leader: bool = False
    hot_update_order: Optional[int] = None
    hot_row: Optional[RowId] = None
    held_locks: list = field(default_factory=list)
    undo: list = field(default_factory=list)
    wake_event: threading.Event = field(default_factory=threading.Event)
    queued_for_update: bool = False
    commit_seq: Optional[int] = None
    abort_requested: Optional[AbortCause] = None
    admitted: bool = False  # entered the commit pipeline's flush queue
    at_gate: bool = False  # blocked in commit behind its dependency-list predecessor
    ticket: Any = None
    waiting_on: Optional[RowId] = None
    ops: int = 0
    lock_wait_s: float = 0.0
    write_seq: int = 0
    header_logged: bool = False

    @property
    def undo_head(self):
        return self.undo[-1] if self.undo else None

    def transition(self, new: TxnState) -> None:
        assert new in _TRANSITIONS[self.state], f"txn {self.txn_id}: {self.state.value} -> {new.value}"
        self.state = new

    @property
    def finished(self) -> bool:
        return self.state in (TxnState.COMMITTED, TxnState.ABORTED)

    def request_abort(self, cause: AbortCause) -> None:
        if self.abort_requested is None:
            self.abort_requested = cause
        self.wake_event.set()

    def __repr__(self) -> str:
        return f"Txn({self.txn_id}, {self.state.value}, order={self.hot_update_order})"
