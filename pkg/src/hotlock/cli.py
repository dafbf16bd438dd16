"""``bench`` command line: run workloads, recover a log, check a history dump."""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from .core import ConfigError, EngineConfig, Protocol
from .history import (
    check_commit_order,
    check_rollback_order,
    check_serializable,
    dump,
    load,
)
from .recovery import recover

_PROTOCOLS = {"2pl": Protocol.TWO_PL, "queue": Protocol.QUEUE_LOCK, "group": Protocol.GROUP_LOCK}


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="drive a workload against a fresh engine")
    r.add_argument("--protocol", choices=sorted(_PROTOCOLS), default="group")
    r.add_argument("--workload", default="hotspot_update",
                   choices=["hotspot_update", "uniform_update", "rw_mix", "transfer", "hotspot_scan"])
    r.add_argument("--threads", type=int, default=8)
    g = r.add_mutually_exclusive_group()
    g.add_argument("--duration", type=float, help="seconds")
    g.add_argument("--txns", type=int, help="total transactions to start")
    r.add_argument("--tl", type=int, help="operations per transaction")
    r.add_argument("--rw", type=float, default=0.5, help="write ratio")
    r.add_argument("--skew", type=float, default=0.7, help="Zipf skew factor")
    r.add_argument("--table-rows", type=int, default=10_000)
    r.add_argument("--hot-rows", type=int, default=1)
    r.add_argument("--hot-threshold", type=int, default=32)
    r.add_argument("--batch-size", type=int, default=10)
    r.add_argument("--dynamic-batch", type=_on_off, default=True, metavar="{on,off}")
    r.add_argument("--group-commit", type=_on_off, default=True, metavar="{on,off}")
    r.add_argument("--sync-latency", type=float, default=0.0, help="milliseconds slept in the Sync stage")
    r.add_argument("--lock-timeout", type=float, default=1.0, help="seconds")
    r.add_argument("--sweep-interval", type=float, default=10.0, help="milliseconds")
    r.add_argument("--multi-hot", choices=["reject", "plain"], default="reject")
    r.add_argument("--inject-abort", type=float, default=0.0)
    r.add_argument("--hot-op", action="store_true", help="rw_mix: first operation increments a hot key")
    r.add_argument("--op-delay", type=float, default=0.0, help="rw_mix: milliseconds paused after each operation")
    r.add_argument("--fixed-tps", type=float)
    r.add_argument("--burst", type=int, default=1, help="arrivals per burst under --fixed-tps")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--report", choices=["json", "csv"], default="json")
    r.add_argument("--dump-history", metavar="PATH")
    r.add_argument("--log-path", metavar="PATH")
    r.add_argument("--check", action="store_true", help="verify the history after the run")

    rc = sub.add_parser("recover", help="roll back unfinished transactions in an undo log")
    rc.add_argument("--log-path", required=True)

    ck = sub.add_parser("check", help="check a dumped history for serializability")
    ck.add_argument("--history", required=True)
    return p


def _cmd_run(a: argparse.Namespace) -> int:
    from .bench import WorkloadSpec, run

    if a.duration is None and a.txns is None:
        a.txns = 1000
    cfg = EngineConfig(
        protocol=_PROTOCOLS[a.protocol], hot_threshold=a.hot_threshold, group_batch_size=a.batch_size,
        lock_wait_timeout=a.lock_timeout, sweep_interval=a.sweep_interval / 1000.0,
        commit_latency_injection=a.sync_latency / 1000.0, dynamic_batch=a.dynamic_batch,
        group_commit=a.group_commit, multi_hot_policy=a.multi_hot)
    spec = WorkloadSpec(
        kind=a.workload, threads=a.threads, duration=a.duration, txn_count=a.txns, tl=a.tl,
        write_ratio=a.rw, skew=a.skew, table_rows=a.table_rows, hot_rows=a.hot_rows,
        fixed_tps=a.fixed_tps, burst=a.burst, inject_abort=a.inject_abort, seed=a.seed,
        hot_op=a.hot_op, op_delay=a.op_delay / 1000.0)
    want_history = bool(a.dump_history or a.check)
    res = run(spec, cfg, log_path=a.log_path, record_history=want_history)
    try:
        out = res.report.to_json() if a.report == "json" else res.report.to_csv()
        sys.stdout.write(out if out.endswith("\n") else out + "\n")
        if a.dump_history:
            dump(res.engine.history.events(), a.dump_history)
        if a.check:
            verdict = res.check()
            print(json.dumps(verdict), file=sys.stderr)
            return 0 if verdict["ok"] else 1
    finally:
        res.engine.close()
    return 0


def _cmd_recover(a: argparse.Namespace) -> int:
    res = recover(a.log_path)
    print(json.dumps(res.summary(), indent=2))
    return 0 if res.ordering_violations == 0 else 1


def _cmd_check(a: argparse.Namespace) -> int:
    events = load(a.history)
    ser = check_serializable(events)
    co = check_commit_order(events)
    ro = check_rollback_order(events)
    ok = ser.ok and not co and not ro
    print(json.dumps({"ok": ok, "serializable": ser.to_dict(),
                      "commit_order_violations": co[:20], "rollback_order_violations": ro[:20]},
                     indent=2))
    return 0 if ok else 1


def main(argv: Optional[List[str]] = None) -> int:
    a = build_parser().parse_args(argv)
    try:
        if a.cmd == "run":
            return _cmd_run(a)
        if a.cmd == "recover":
            return _cmd_recover(a)
        return _cmd_check(a)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
