import json
import math

import numpy as np
import pytest

from hotlock import ConfigError, EngineConfig, Protocol
from hotlock.bench import MetricsReport, Workload, WorkloadSpec, hot_row, run, zipf_cdf, zipf_sample
from hotlock.cli import main


def test_zipf_top_key_matches_harmonic_mass():
    n, s = 100_000, 0.99
    expected = 1.0 / math.fsum(k ** -s for k in range(1, n + 1))
    draws = zipf_sample(n, s, np.random.default_rng(1), size=1_000_000)
    observed = np.count_nonzero(draws == 0) / draws.size
    assert abs(observed - expected) / expected < 0.05
    assert draws.min() >= 0 and draws.max() < n


def test_zero_skew_is_uniform():
    cdf = zipf_cdf(4, 0.0)
    assert np.allclose(np.diff(np.concatenate([[0], cdf])), 0.25)


@pytest.mark.parametrize("bad", [
    dict(threads=0, txn_count=1), dict(), dict(txn_count=1, duration=1.0),
    dict(txn_count=1, write_ratio=1.5), dict(txn_count=1, inject_abort=1.0),
    dict(txn_count=1, kind="hotspot_scan", hot_rows=3),
    dict(txn_count=1, kind="transfer", hot_rows=0),
    dict(txn_count=1, kind="uniform_update", hot_op=True),
])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        WorkloadSpec(**bad).validate()


def test_default_txn_lengths():
    assert WorkloadSpec(kind="hotspot_update").tl == 1
    assert WorkloadSpec(kind="transfer").tl == 2
    assert WorkloadSpec(kind="hotspot_scan").tl == 10


@pytest.mark.parametrize("kind", [k.value for k in Workload])
@pytest.mark.parametrize("proto", list(Protocol))
def test_every_workload_runs_clean(kind, proto):
    kw = dict(hot_rows=12) if kind == "hotspot_scan" else {}
    spec = WorkloadSpec(kind=kind, threads=8, txn_count=300, table_rows=500, seed=5, **kw)
    cfg = EngineConfig(protocol=proto, hot_threshold=3, multi_hot_policy="plain")
    res = run(spec, cfg)
    rep = res.report
    assert rep.committed + rep.aborted == rep.started == 300
    assert res.check()["ok"]
    res.engine.close()


def test_report_accounting():
    res = run(WorkloadSpec(kind="hotspot_update", threads=4, txn_count=200, inject_abort=0.1, seed=2))
    rep = res.report
    assert rep.abort_count["injected"] == rep.aborted
    assert res.engine.storage.committed_value(hot_row(0)) == rep.committed
    assert rep.injected_abort_ratio == pytest.approx(rep.aborted / 200)
    assert rep.p50_ms <= rep.p95_ms <= rep.p99_ms
    assert rep.locks_per_query == pytest.approx(rep.lock_acquisitions / rep.queries)
    res.engine.close()


def test_report_serializations():
    res = run(WorkloadSpec(kind="transfer", threads=2, txn_count=20, table_rows=10), record_history=False)
    d = json.loads(res.report.to_json())
    assert set(d) == set(MetricsReport.__dataclass_fields__)
    head, row = res.report.to_csv().splitlines()
    assert len(head.split(",")) == len(row.split(",")) and "abort_timeout" in head
    res.engine.close()


def test_duration_mode_stops():
    res = run(WorkloadSpec(kind="hotspot_update", threads=4, duration=0.3), record_history=False)
    assert 0.3 <= res.report.duration_s < 2.0
    res.engine.close()


def test_fixed_tps_paces_arrivals():
    res = run(WorkloadSpec(kind="hotspot_update", threads=4, txn_count=50, fixed_tps=200),
              record_history=False)
    assert res.report.duration_s >= 49 / 200
    res.engine.close()


def test_cli_run_check_and_recover(tmp_path, capsys):
    hist, log = tmp_path / "h.ndjson", tmp_path / "u.log"
    rc = main(["run", "--protocol", "group", "--workload", "transfer", "--threads", "4", "--txns", "200",
               "--table-rows", "50", "--hot-threshold", "2", "--sync-latency", "0.1",
               "--dump-history", str(hist), "--log-path", str(log), "--check"])
    out = capsys.readouterr()
    assert rc == 0
    rep = json.loads(out.out)
    assert rep["committed"] + rep["aborted"] == 200
    assert json.loads(out.err)["ok"] is True
    assert main(["check", "--history", str(hist)]) == 0
    assert json.loads(capsys.readouterr().out)["ok"] is True
    assert main(["recover", "--log-path", str(log)]) == 0
    assert json.loads(capsys.readouterr().out)["committed"] == rep["committed"]


def test_cli_csv_and_errors(capsys):
    assert main(["run", "--workload", "hotspot_update", "--txns", "10", "--report", "csv"]) == 0
    assert capsys.readouterr().out.startswith("tps,")
    assert main(["run", "--workload", "rw_mix", "--txns", "10", "--inject-abort", "2"]) == 2
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["run", "--dynamic-batch", "maybe"])
