"""Workload driver and metrics.

Client threads run transactions against one in-process engine until a shared
transaction budget or a wall-clock deadline runs out. Aborted transactions are
counted, not retried, so ``committed + aborted == started`` at the end.
"""

from __future__ import annotations

import enum
import itertools
import json
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .core import AbortCause, ConfigError, EngineConfig, RowId, TxnAborted
from .engine import Engine
from .history import (
    check_commit_order,
    check_counter_oracle,
    check_rollback_order,
    check_serializable,
)

HOT_SPACE = 1
COLD_SPACE = 2
PER_PAGE = 100


class Workload(enum.Enum):
    HOTSPOT_UPDATE = "hotspot_update"
    UNIFORM_UPDATE = "uniform_update"
    RW_MIX = "rw_mix"
    HOTSPOT_SCAN = "hotspot_scan"
    TRANSFER = "transfer"


_DEFAULT_TL = {
    Workload.HOTSPOT_UPDATE: 1,
    Workload.UNIFORM_UPDATE: 4,
    Workload.RW_MIX: 14,
    Workload.HOTSPOT_SCAN: 10,
    Workload.TRANSFER: 2,
}


@dataclass
class WorkloadSpec:
    kind: Workload = Workload.HOTSPOT_UPDATE
    threads: int = 8
    duration: Optional[float] = None
    txn_count: Optional[int] = None
    tl: Optional[int] = None
    write_ratio: float = 0.5
    skew: float = 0.7
    table_rows: int = 10_000
    hot_rows: int = 1
    fixed_tps: Optional[float] = None
    burst: int = 1  # arrivals per burst under fixed_tps
    inject_abort: float = 0.0
    seed: int = 0
    # rw_mix only: the first of the TL operations increments a hot key
    hot_op: bool = False
    # client-side pause after each rw_mix operation, standing in for a statement round trip
    op_delay: float = 0.0

    def __post_init__(self):
        if isinstance(self.kind, str):
            self.kind = Workload(self.kind)
        if self.tl is None:
            self.tl = _DEFAULT_TL[self.kind]

    def validate(self) -> "WorkloadSpec":
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if (self.duration is None) == (self.txn_count is None):
            raise ConfigError("give exactly one of duration or txn_count")
        if self.tl < 1:
            raise ConfigError("tl must be >= 1")
        if not 0 <= self.write_ratio <= 1:
            raise ConfigError("write_ratio must be in [0, 1]")
        if self.skew < 0:
            raise ConfigError("skew must be >= 0")
        if not 0 <= self.inject_abort < 1:
            raise ConfigError("inject_abort must be in [0, 1)")
        if self.table_rows < 1:
            raise ConfigError("table_rows must be >= 1")
        if self.hot_op and self.kind is not Workload.RW_MIX:
            raise ConfigError("hot_op applies to rw_mix only")
        needs_hot = self.kind in (Workload.HOTSPOT_UPDATE, Workload.HOTSPOT_SCAN, Workload.TRANSFER) or self.hot_op
        if needs_hot and self.hot_rows < 1:
            raise ConfigError(f"{self.kind.value} needs hot_rows >= 1")
        if self.kind is Workload.HOTSPOT_SCAN and self.tl > self.hot_rows:
            raise ConfigError("hotspot_scan updates distinct hot keys: tl must be <= hot_rows")
        if self.kind in (Workload.UNIFORM_UPDATE, Workload.RW_MIX) and self.tl > self.table_rows:
            raise ConfigError("tl exceeds table_rows")
        if self.fixed_tps is not None and self.fixed_tps <= 0:
            raise ConfigError("fixed_tps must be > 0")
        if self.op_delay < 0:
            raise ConfigError("op_delay must be >= 0")
        if self.burst < 1:
            raise ConfigError("burst must be >= 1")
        return self


def hot_row(i: int = 0) -> RowId:
    return RowId(HOT_SPACE, i // PER_PAGE, i % PER_PAGE)


def table_row(i: int) -> RowId:
    return RowId(COLD_SPACE, i // PER_PAGE, i % PER_PAGE)


def zipf_cdf(n_keys: int, skew: float) -> np.ndarray:
    if n_keys < 1 or skew < 0:
        raise ValueError("need n_keys >= 1 and skew >= 0")
    w = np.arange(1, n_keys + 1, dtype=np.float64) ** -skew
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


def zipf_sample(n_keys: int, skew: float, rng: Optional[np.random.Generator] = None,
                size: Optional[int] = None, cdf: Optional[np.ndarray] = None):
    """Key index in [0, n_keys) with P(k) proportional to (k+1)**-skew."""
    rng = rng or np.random.default_rng()
    c = zipf_cdf(n_keys, skew) if cdf is None else cdf
    u = rng.random(size)
    idx = np.searchsorted(c, u, side="right")
    return np.minimum(idx, n_keys - 1) if size is not None else int(min(idx, n_keys - 1))


class _KeyStream:
    """Batched per-thread sampling to keep numpy overhead off the hot loop."""

    def __init__(self, rng: np.random.Generator, n: int, cdf: Optional[np.ndarray], batch: int = 4096):
        self.rng, self.n, self.cdf, self.batch = rng, n, cdf, batch
        self._buf: List[int] = []

    def next(self) -> int:
        if not self._buf:
            if self.cdf is None:
                arr = self.rng.integers(0, self.n, self.batch)
            else:
                arr = zipf_sample(self.n, 0, self.rng, self.batch, self.cdf)
            self._buf = arr.tolist()
            self._buf.reverse()
        return self._buf.pop()

    def distinct(self, k: int) -> List[int]:
        seen: Dict[int, None] = {}
        while len(seen) < k:
            seen.setdefault(self.next(), None)
        return list(seen)


@dataclass
class MetricsReport:
    tps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    abort_count: Dict[str, int]
    lock_acquisitions: int
    locks_per_query: float
    lock_wait_time: float
    hotspot_promotions: int
    hotspot_evictions: int
    group_count: int
    avg_group_size: float
    committed: int = 0
    aborted: int = 0
    started: int = 0
    queries: int = 0
    duration_s: float = 0.0
    injected_abort_ratio: float = 0.0
    cascade_abort_ratio: float = 0.0
    sync_sleep_total: float = 0.0
    commit_batches: int = 0
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        d = self.to_dict()
        flat = {k: v for k, v in d.items() if not isinstance(v, dict)}
        for cause, n in sorted(d["abort_count"].items()):
            flat[f"abort_{cause}"] = n
        for k, v in sorted(d["extra"].items()):
            flat[k] = v
        return ",".join(flat) + "\n" + ",".join(str(v) for v in flat.values()) + "\n"


class _Pacer:
    """Shared arrival schedule for fixed-TPS runs; bursts of ``burst`` arrivals."""

    def __init__(self, tps: float, burst: int, t0: float):
        self.gap = burst / tps
        self.burst = burst
        self.t0 = t0
        self._n = itertools.count()

    def next_arrival(self) -> float:
        i = next(self._n)
        return self.t0 + (i // self.burst) * self.gap


@dataclass
class _Acc:
    latencies: List[float] = field(default_factory=list)
    committed: int = 0
    aborted: int = 0
    queries: int = 0


@dataclass
class RunResult:
    report: MetricsReport
    engine: Engine
    spec: WorkloadSpec
    hot_keys: List[RowId]

    def check(self) -> dict:
        """Serializability, ordering and counter checks over the recorded history."""
        events = self.engine.history.events()
        ser = check_serializable(events)
        oracle = {}
        for row in self.hot_keys:
            final = self.engine.storage.committed_value(row)
            res = check_counter_oracle(events, row, 0, final, delta=1)
            oracle[str(row)] = {"ok": res.ok, "expected": res.expected, "actual": res.actual}
        co = check_commit_order(events)
        ro = check_rollback_order(events)
        st = self.engine.stats()
        ok = (ser.ok and all(v["ok"] for v in oracle.values()) and not co and not ro
              and st["overlaps"] == 0 and st["mutex_violations"] == 0 and st["chain_order_violations"] == 0)
        return {"ok": ok, "serializable": ser.to_dict(), "counter_oracle": oracle,
                "commit_order_violations": co[:20], "rollback_order_violations": ro[:20],
                "overlaps": st["overlaps"], "mutex_violations": st["mutex_violations"],
                "chain_order_violations": st["chain_order_violations"]}


def _build_rows(spec: WorkloadSpec) -> Dict[RowId, int]:
    rows = {hot_row(i): 0 for i in range(max(spec.hot_rows, 0))}
    if spec.kind is not Workload.HOTSPOT_UPDATE and spec.kind is not Workload.HOTSPOT_SCAN:
        rows.update({table_row(i): 0 for i in range(spec.table_rows)})
    return rows


def run(spec: WorkloadSpec, config: Optional[EngineConfig] = None, *,
        log_path: Optional[str] = None, record_history: bool = True,
        engine: Optional[Engine] = None) -> RunResult:
    spec.validate()
    config = (config or EngineConfig()).validate()
    if engine is None:
        engine = Engine(config, rows=_build_rows(spec), log_path=log_path, record_history=record_history)
    kind = spec.kind
    uses_hot = kind not in (Workload.RW_MIX, Workload.UNIFORM_UPDATE) or (kind is Workload.RW_MIX and spec.hot_op)
    hot_keys = [hot_row(i) for i in range(spec.hot_rows)] if uses_hot else []
    cdf = zipf_cdf(spec.table_rows, spec.skew) if kind is Workload.RW_MIX and spec.skew > 0 else None

    op_delay = spec.op_delay
    budget = itertools.count()
    limit = spec.txn_count
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.threads)
    accs = [_Acc() for _ in range(spec.threads)]
    start_gate = threading.Barrier(spec.threads + 1)
    t_box: Dict[str, float] = {}
    pacer_box: Dict[str, _Pacer] = {}

    def client(idx: int) -> None:
        acc = accs[idx]
        rng = np.random.default_rng(seeds[idx])
        keys = _KeyStream(rng, spec.table_rows, cdf)
        hot_pick = _KeyStream(rng, max(spec.hot_rows, 1), None)
        coins = _KeyStream(rng, 1 << 30, None)
        denom = float(1 << 30)
        start_gate.wait()
        deadline = t_box["t0"] + spec.duration if spec.duration is not None else None
        pacer = pacer_box.get("p")
        while True:
            if limit is not None and next(budget) >= limit:
                return
            if pacer is not None:
                arrival = pacer.next_arrival()
                delay = arrival - time.monotonic()
                if deadline is not None and arrival >= deadline:
                    return
                if delay > 0:
                    time.sleep(delay)
                t_start = arrival
            else:
                t_start = time.monotonic()
                if deadline is not None and t_start >= deadline:
                    return
            txn = engine.begin()
            try:
                if kind is Workload.HOTSPOT_UPDATE:
                    row = hot_keys[hot_pick.next()] if spec.hot_rows > 1 else hot_keys[0]
                    for _ in range(spec.tl):
                        engine.increment(txn, row)
                    acc.queries += spec.tl
                elif kind is Workload.UNIFORM_UPDATE:
                    for k in sorted(keys.distinct(spec.tl), reverse=True):
                        engine.increment(txn, table_row(k))
                    acc.queries += spec.tl
                elif kind is Workload.RW_MIX:
                    n_cold = spec.tl
                    if spec.hot_op:
                        # hot first, so a transaction queued on the hot row holds no other lock
                        engine.increment(txn, hot_keys[hot_pick.next()] if spec.hot_rows > 1 else hot_keys[0])
                        n_cold -= 1
                    for k in sorted(keys.distinct(n_cold), reverse=True):
                        if op_delay:
                            time.sleep(op_delay)
                        if coins.next() / denom < spec.write_ratio:
                            engine.increment(txn, table_row(k))
                        else:
                            engine.select_for_update(txn, table_row(k))
                    acc.queries += spec.tl
                elif kind is Workload.HOTSPOT_SCAN:
                    for k in sorted(hot_pick.distinct(spec.tl)):
                        engine.increment(txn, hot_keys[k])
                        acc.queries += 1
                else:
                    engine.increment(txn, hot_keys[hot_pick.next()] if spec.hot_rows > 1 else hot_keys[0])
                    for _ in range(spec.tl - 1):
                        engine.increment(txn, table_row(keys.next()))
                    acc.queries += spec.tl
                if spec.inject_abort and coins.next() / denom < spec.inject_abort:
                    engine.rollback(txn, AbortCause.INJECTED)
                    acc.aborted += 1
                    continue
                engine.commit(txn)
                acc.committed += 1
                acc.latencies.append(time.monotonic() - t_start)
            except TxnAborted:
                acc.aborted += 1

    threads = [threading.Thread(target=client, args=(i,), name=f"client-{i}") for i in range(spec.threads)]
    for t in threads:
        t.start()
    t_box["t0"] = time.monotonic()
    if spec.fixed_tps is not None:
        pacer_box["p"] = _Pacer(spec.fixed_tps, spec.burst, t_box["t0"])
    start_gate.wait()
    for t in threads:
        t.join()
    elapsed = time.monotonic() - t_box["t0"]
    return RunResult(_report(engine, accs, elapsed), engine, spec, hot_keys)


def _report(engine: Engine, accs: List[_Acc], elapsed: float) -> MetricsReport:
    lat = np.array([x for a in accs for x in a.latencies]) * 1000.0
    p50, p95, p99 = (np.percentile(lat, [50, 95, 99]).tolist() if lat.size else (0.0, 0.0, 0.0))
    st = engine.stats()
    committed = sum(a.committed for a in accs)
    aborted = sum(a.aborted for a in accs)
    queries = sum(a.queries for a in accs)
    causes = {c.value: 0 for c in AbortCause if c is not AbortCause.USER}
    causes.update(st["aborts"])
    started = committed + aborted
    groups = st["group_count"]
    return MetricsReport(
        tps=committed / elapsed if elapsed > 0 else 0.0,
        p50_ms=p50, p95_ms=p95, p99_ms=p99,
        abort_count=causes,
        lock_acquisitions=st["lock_acquisitions"],
        locks_per_query=st["lock_acquisitions"] / queries if queries else 0.0,
        lock_wait_time=st["lock_wait_time"],
        hotspot_promotions=st["hotspot_promotions"],
        hotspot_evictions=st["hotspot_evictions"],
        group_count=groups,
        avg_group_size=st["hot_updates"] / groups if groups else 0.0,
        committed=committed, aborted=aborted, started=started, queries=queries,
        duration_s=elapsed,
        injected_abort_ratio=causes.get("injected", 0) / started if started else 0.0,
        cascade_abort_ratio=causes.get("cascade", 0) / started if started else 0.0,
        sync_sleep_total=st["sync_sleep_total"],
        commit_batches=st["commit_batches"],
        extra={k: st[k] for k in ("deadlock_checks", "follower_grants", "sweep_wakes",
                                  "background_grants", "materialized_locks", "fast_path")},
    )
