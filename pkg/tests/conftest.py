import threading

import pytest

from hotlock import Engine, EngineConfig, Protocol, RowId

HOT = RowId(1, 0, 1)
COLD = RowId(1, 0, 2)


def make_engine(protocol=Protocol.GROUP_LOCK, rows=None, background=False, **cfg):
    cfg.setdefault("lock_wait_timeout", 2.0)
    config = EngineConfig(protocol=protocol, **cfg)
    return Engine(config, rows=rows if rows is not None else {HOT: 1, COLD: 100}, background=background)


def promote(engine, row=HOT):
    assert engine.hot.maybe_promote(row, engine.config.hot_threshold + 1)
    return engine.hot.table.get(row)


@pytest.fixture
def engine():
    e = make_engine()
    yield e
    e.close()


@pytest.fixture
def hot_engine():
    e = make_engine()
    promote(e)
    yield e
    e.close()


class Worker(threading.Thread):
    """Runs ``fn`` on its own thread, keeping the result or exception."""

    def __init__(self, fn, *args):
        super().__init__(daemon=True)
        self.fn, self.args = fn, args
        self.result = self.error = None

    def run(self):
        try:
            self.result = self.fn(*self.args)
        except BaseException as exc:  # surfaced by the test
            self.error = exc

    def finish(self, timeout=5.0):
        self.join(timeout)
        assert not self.is_alive(), "worker hung"
        return self


def spawn(fn, *args):
    w = Worker(fn, *args)
    w.start()
    return w


def wait_until(pred, timeout=5.0, step=0.001):
    import time

    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if pred():
            return True
        time.sleep(step)
    return pred()


def run_crash_points(tmp_path, points, seed, runs=2):
    """Recover from ``points`` random crash images of logged workloads.

    The log is append-only, so any byte prefix of it is what a crash could
    leave on disk (torn final record included). Each image is recovered,
    checked, then recovered again from a copy that crashes part-way through
    recovery. Returns failure descriptions; empty when every point passes.
    """
    import os
    import random

    from hotlock.bench import WorkloadSpec, hot_row, run
    from hotlock.recovery import SimulatedCrash, recover

    rng = random.Random(seed)
    failures = []
    stats = {"hot_rollbacks": 0, "points": 0}
    for r in range(runs):
        log_path = str(tmp_path / f"run{r}.log")
        spec = WorkloadSpec(kind="transfer", threads=16, txn_count=1500, table_rows=200,
                            inject_abort=0.05, seed=seed + r)
        res = run(spec, EngineConfig(hot_threshold=4), log_path=log_path, record_history=False)
        res.engine.close()
        with open(log_path, "rb") as f:
            data = f.read()
        n = points // runs + (1 if r < points % runs else 0)
        for k in range(n):
            cut = rng.randint(0, len(data))
            img = str(tmp_path / f"run{r}-crash{k}.log")
            twin = img + ".twin"
            for p in (img, twin):
                with open(p, "wb") as f:
                    f.write(data[:cut])
            if cut == 0:
                os.remove(img)
                os.remove(twin)
                continue
            stats["points"] += 1
            try:
                out = recover(img)
            except Exception as exc:  # noqa: BLE001 - any failure is a finding
                failures.append(f"cut {cut}: {exc!r}")
                continue
            hot = [o for o in out.rollback_orders if o is not None]
            stats["hot_rollbacks"] += len(hot)
            if hot != sorted(hot, reverse=True) or len(set(hot)) != len(hot):
                failures.append(f"cut {cut}: rollback orders {hot}")
            if out.ordering_violations:
                failures.append(f"cut {cut}: {out.ordering_violations} ordering violations")
            # transfer adds one to the hot account per committed transaction
            if out.state.get(hot_row(0), 0) != len(out.committed):
                failures.append(f"cut {cut}: hot counter {out.state.get(hot_row(0))} != {len(out.committed)}")
            stop = rng.randint(0, max(0, len(out.rolled_back) - 1))
            try:
                recover(twin, crash_after=stop)
            except SimulatedCrash:
                pass
            if recover(twin).state != out.state:
                failures.append(f"cut {cut}: double crash diverged")
    run_crash_points.last_stats = stats
    return failures
