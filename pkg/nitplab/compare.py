"""Side-by-side comparison of two metrics logs on their shared snapshot steps."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .data_management.metrics_log import MetricsRecord, read_metrics

logger = logging.getLogger(__name__)


class DisjointRunsError(ValueError):
    """Raised when two metrics logs share no step."""
    pass


@dataclass
class CompareRow:
    """Differences b − a at one snapshot step."""
    step: int
    d_effective_rank: float
    d_avg_cosine: float
    d_ntp_loss: float


@dataclass
class CompareReport:
    """
    Aligned comparison of run b against run a.

    Attributes:
        rows: One row per step where both runs carry a snapshot
        skipped: Shared steps dropped because one side has no snapshot
        final: End-of-run summary of both runs and their difference
    """
    rows: List[CompareRow] = field(default_factory=list)
    skipped: int = 0
    final: Dict[str, Any] = field(default_factory=dict)

    @property
    def mean_d_effective_rank(self) -> Optional[float]:
        if not self.rows:
            return None
        return sum(r.d_effective_rank for r in self.rows) / len(self.rows)


def _by_step(records: List[MetricsRecord]) -> Dict[int, MetricsRecord]:
    return {r.step: r for r in records}


def compare_records(a: List[MetricsRecord], b: List[MetricsRecord]) -> CompareReport:
    """
    Align two record lists by step and difference their geometry and NTP loss.

    Raises:
        DisjointRunsError: If the step ranges do not overlap
    """
    ra, rb = _by_step(a), _by_step(b)
    shared = sorted(set(ra) & set(rb))
    if not shared:
        raise DisjointRunsError("Metrics logs have no step in common")

    report = CompareReport()
    for step in shared:
        x, y = ra[step], rb[step]
        if not (x.has_snapshot and y.has_snapshot):
            if x.has_snapshot or y.has_snapshot:
                report.skipped += 1
            continue
        report.rows.append(CompareRow(
            step=step,
            d_effective_rank=y.effective_rank - x.effective_rank,
            d_avg_cosine=y.avg_cosine - x.avg_cosine,
            d_ntp_loss=y.ntp_loss - x.ntp_loss,
        ))
    if report.skipped:
        logger.warning(f"Skipped {report.skipped} steps with a snapshot in only one run")

    last = shared[-1]
    report.final = {
        "step": last,
        "ntp_loss_a": ra[last].ntp_loss,
        "ntp_loss_b": rb[last].ntp_loss,
        "d_ntp_loss": rb[last].ntp_loss - ra[last].ntp_loss,
        "mean_d_effective_rank": report.mean_d_effective_rank,
    }
    return report


def compare_runs(log_a: Union[str, Path], log_b: Union[str, Path]) -> CompareReport:
    """Compare two ``metrics.jsonl`` files; deltas are b minus a."""
    _, a = read_metrics(log_a)
    _, b = read_metrics(log_b)
    report = compare_records(a, b)
    logger.info(f"Compared {log_a} and {log_b}: {len(report.rows)} aligned snapshots")
    return report


def format_report(report: CompareReport) -> str:
    lines = [f"{'step':>8}{'Δeff_rank':>12}{'Δavg_cos':>12}{'Δntp_loss':>12}"]
    for r in report.rows:
        lines.append(f"{r.step:>8}{r.d_effective_rank:>12.4f}{r.d_avg_cosine:>12.5f}{r.d_ntp_loss:>12.5f}")
    if report.skipped:
        lines.append(f"({report.skipped} unmatched snapshot rows skipped)")
    f = report.final
    lines.append(
        f"final step {f['step']}: ntp_loss a={f['ntp_loss_a']:.4f} b={f['ntp_loss_b']:.4f} "
        f"(Δ {f['d_ntp_loss']:+.4f})"
    )
    if f["mean_d_effective_rank"] is not None:
        lines.append(f"mean Δeff_rank over snapshots: {f['mean_d_effective_rank']:+.4f}")
    return "\n".join(lines)
