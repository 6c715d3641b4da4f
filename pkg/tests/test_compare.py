import pytest

from nitplab.compare import DisjointRunsError, compare_records, compare_runs, format_report
from nitplab.data_management.metrics_log import MetricsLogger, MetricsRecord


def record(step, ntp_loss=2.0, erank=None, avg_cos=None):
    return MetricsRecord(step=step, lr=1e-3, ntp_loss=ntp_loss, nitp_loss=None, total_loss=ntp_loss,
                         grad_norm=1.0, effective_rank=erank, avg_cosine=avg_cos)


def write_log(path, records):
    log = MetricsLogger(path)
    for r in records:
        log.append(r)
    return path


def test_self_compare_is_zero():
    """Test that a run compared with itself has zero deltas."""
    records = [record(0, 3.0, 4.0, 0.5), record(1, 2.5), record(2, 2.0, 5.0, 0.3)]
    report = compare_records(records, records)
    assert [r.step for r in report.rows] == [0, 2]
    assert all(r.d_effective_rank == 0.0 and r.d_avg_cosine == 0.0 and r.d_ntp_loss == 0.0 for r in report.rows)
    assert report.skipped == 0
    assert report.final["d_ntp_loss"] == 0.0
    assert report.mean_d_effective_rank == 0.0


def test_deltas_are_b_minus_a():
    """Test the sign convention of the differences."""
    a = [record(0, 3.0, 4.0, 0.5)]
    b = [record(0, 2.5, 6.0, 0.2)]
    row = compare_records(a, b).rows[0]
    assert row.d_effective_rank == pytest.approx(2.0)
    assert row.d_avg_cosine == pytest.approx(-0.3)
    assert row.d_ntp_loss == pytest.approx(-0.5)


def test_unmatched_snapshots_are_skipped(caplog):
    """Test that a snapshot present in only one log is counted and warned about."""
    a = [record(0, erank=4.0, avg_cos=0.5), record(5, erank=4.0, avg_cos=0.5), record(7)]
    b = [record(0, erank=3.0, avg_cos=0.4), record(5), record(9)]
    with caplog.at_level("WARNING"):
        report = compare_records(a, b)
    assert report.skipped == 1
    assert len(report.rows) == 1
    assert report.final["step"] == 5
    assert "Skipped 1" in caplog.text


def test_disjoint_logs_raise():
    """Test that logs without a common step cannot be compared."""
    with pytest.raises(DisjointRunsError):
        compare_records([record(0)], [record(1)])


def test_compare_runs_from_files(tmp_path):
    """Test comparison of two metrics files and the printed report."""
    a = write_log(tmp_path / "a.jsonl", [record(0, 3.0, 4.0, 0.5), record(10, 2.0, 4.5, 0.4)])
    b = write_log(tmp_path / "b.jsonl", [record(0, 3.0, 4.0, 0.5), record(10, 1.9, 5.5, 0.3)])
    report = compare_runs(a, b)
    assert report.mean_d_effective_rank == pytest.approx(0.5)
    text = format_report(report)
    assert "final step 10" in text
    assert "mean Δeff_rank" in text
