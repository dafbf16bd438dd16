"""Three-stage commit pipeline with group commit.

Admitted transactions queue in arrival order. The transaction at the front of
the queue, once no batch is running, becomes the batch leader: it takes every
queued transaction (or only itself when group commit is off) and runs the
Flush, Sync and Commit stages for all of them. Members block on a private
event until the leader is done.
"""

from __future__ import annotations

import enum
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, List, Optional

from .core import TxnDescriptor


class Stage(enum.Enum):
    FLUSH = "FLUSH"
    SYNC = "SYNC"
    COMMIT = "COMMIT"


@dataclass(eq=False)
class _Ticket:
    txn: TxnDescriptor
    event: threading.Event = field(default_factory=threading.Event)
    leader: bool = False
    done: bool = False
    error: Optional[BaseException] = None


@dataclass
class CommitBatch:
    leader: int
    members: List[TxnDescriptor]
    stage: Stage = Stage.FLUSH


class CommitPipeline:
    """``flush`` and ``commit`` run the stage work for a batch's member list."""

    def __init__(self, flush: Callable[[List[TxnDescriptor]], None],
                 commit: Callable[[List[TxnDescriptor]], None],
                 sync_latency: float = 0.0, group_commit: bool = True,
                 sync: Optional[Callable[[], None]] = None):
        self._flush = flush
        self._commit = commit
        self._sync = sync
        self.sync_latency = sync_latency
        self.group_commit = group_commit
        self._mutex = threading.Lock()
        self._queue: Deque[_Ticket] = deque()
        self._running = False
        # instrumentation
        self.admission_trace: List[TxnDescriptor] = []
        self.trace_admissions = False
        self.batches = 0
        self.batch_sizes: List[int] = []
        self.sync_sleeps = 0
        self.sync_sleep_total = 0.0
        self.current: Optional[CommitBatch] = None

    def set_group_commit(self, enabled: bool) -> None:
        # read when the next batch is cut; a running batch is unaffected
        self.group_commit = bool(enabled)

    def enqueue(self, txn: TxnDescriptor) -> _Ticket:
        """Admit ``txn`` to the flush queue. Admission order is commit order."""
        t = _Ticket(txn)
        with self._mutex:
            self._queue.append(t)
            if self.trace_admissions:
                self.admission_trace.append(txn)
            if not self._running and self._queue[0] is t:
                self._running = True
                t.leader = True
                t.event.set()
        return t

    def process(self, ticket: _Ticket) -> None:
        """Block until ``ticket``'s transaction has gone through all stages."""
        ticket.event.wait()
        if ticket.done:
            if ticket.error is not None:
                raise ticket.error
            return
        with self._mutex:
            if self.group_commit:
                batch = list(self._queue)
                self._queue.clear()
            else:
                batch = [self._queue.popleft()]
        assert batch[0] is ticket
        members = [b.txn for b in batch]
        self.current = CommitBatch(ticket.txn.txn_id, members)
        err: Optional[BaseException] = None
        try:
            self._flush(members)
            self.current.stage = Stage.SYNC
            if self._sync is not None:
                self._sync()
            if self.sync_latency > 0:
                t0 = time.monotonic()
                time.sleep(self.sync_latency)
                self.sync_sleep_total += time.monotonic() - t0
            self.sync_sleeps += 1
            self.current.stage = Stage.COMMIT
            self._commit(members)
        except BaseException as exc:  # the leader reports the same failure to every member
            err = exc
        finally:
            self.batches += 1
            self.batch_sizes.append(len(batch))
            self.current = None
            with self._mutex:
                for b in batch:
                    b.done = True
                    b.error = err
                    if b is not ticket:
                        b.event.set()
                if self._queue:
                    nxt = self._queue[0]
                    nxt.leader = True
                    nxt.event.set()
                else:
                    self._running = False
        if err is not None:
            raise err
