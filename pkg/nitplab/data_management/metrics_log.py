"""Line-delimited metrics log with a versioned schema header."""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

SCHEMA_NAME = "nitplab.metrics"
SCHEMA_VERSION = 1


@dataclass
class MetricsRecord:
    """
    Quantities logged for one training step.

    ``nitp_loss`` and ``cosine_alignment`` are None for NTP-only runs; the
    geometry fields are filled on snapshot steps only.
    """
    step: int
    lr: float
    ntp_loss: float
    nitp_loss: Optional[float]
    total_loss: float
    grad_norm: float
    cosine_alignment: Optional[float] = None
    router_entropy: Optional[List[float]] = None
    effective_rank: Optional[float] = None
    avg_cosine: Optional[float] = None
    num_tokens: Optional[int] = None
    num_pairs: Optional[int] = None

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @property
    def has_snapshot(self) -> bool:
        return self.effective_rank is not None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def schema_header() -> Dict[str, Any]:
    return {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, "fields": MetricsRecord.field_names()}


class MetricsLogger:
    """
    Appends MetricsRecords to ``metrics.jsonl``, one JSON object per line.

    Parameters
    ----------
    path : str or Path
        Log file. A new file starts with the schema header line.
    resume_step : int, optional
        When resuming, records with a step above this value are dropped first.
    """

    def __init__(self, path: Union[str, Path], resume_step: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.last_step: Optional[int] = None
        if resume_step is not None and self.path.exists():
            header, records = read_metrics(self.path)
            kept = [r for r in records if r.step <= resume_step]
            self._rewrite(kept)
            self.last_step = kept[-1].step if kept else None
            logger.info(f"Resumed metrics log {self.path} at step {resume_step}, kept {len(kept)} records")
        else:
            self._rewrite([])

    def _rewrite(self, records: List[MetricsRecord]) -> None:
        with open(self.path, "w") as f:
            f.write(json.dumps(schema_header()) + "\n")
            for r in records:
                f.write(json.dumps(r.to_dict()) + "\n")

    def append(self, record: MetricsRecord) -> None:
        """Write one record; steps must increase."""
        if self.last_step is not None and record.step <= self.last_step:
            raise ValueError(f"Metrics step {record.step} does not follow {self.last_step}")
        with open(self.path, "a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")
        self.last_step = record.step


def read_metrics(path: Union[str, Path]) -> Tuple[Dict[str, Any], List[MetricsRecord]]:
    """
    Load a metrics log.

    Returns
    -------
    tuple
        (schema header, records in file order)

    Raises
    ------
    ValueError
        If the header is missing or names another schema or version.
    """
    path = Path(path)
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise ValueError(f"Metrics log {path} is empty")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA_NAME or header.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path} is not a {SCHEMA_NAME} v{SCHEMA_VERSION} log: header {header}")
    records = [MetricsRecord(**json.loads(line)) for line in lines[1:]]
    return header, records
