"""
Desk-scale training loop for matched NTP / NITP runs.

Each step draws a deterministic batch, evaluates the per-sequence objective,
averages the total loss over the batch, back-propagates, clips the global
gradient norm and applies AdamW at the WSD learning rate. Metrics go to
``metrics.jsonl``, geometry snapshots are attached every ``snapshot_every``
steps, and checkpoints are written every ``checkpoint_every`` steps.

Run directory layout::

    <output_dir>/config.yaml
    <output_dir>/metrics.jsonl
    <output_dir>/checkpoints/step_000500/
    <output_dir>/summary.yaml
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import yaml

from .configs.config_manager import ConfigManager, RunConfig
from .configs.objective_config import LossFamily
from .configs.probe_config import ProbeConfig
from .data_management.checkpoint import load_checkpoint, save_checkpoint
from .data_management.corpus import ChunkBatcher, CorpusError, load_corpus
from .data_management.metrics_log import MetricsLogger, MetricsRecord, read_metrics
from .geometry import GeometrySnapshot, snapshot
from .model import build_model, forward
from .objectives import ProjectionHead, evaluate_objective
from .optim import AdamW, clip_grad_norm, wsd_lr
from .tensor import add_n, backward, no_grad, scale

logger = logging.getLogger(__name__)

ALIGNMENT_TOL = 1e-9


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a NaN or infinite loss."""
    pass


def needs_projector(run: RunConfig) -> bool:
    obj = run.objective
    return obj.enabled and obj.use_projector and obj.loss_family != LossFamily.GENERIC_COSINE_REG


class Trainer:
    """
    Owns the model, projector, optimizer and run artifacts of one training run.

    Args:
        run: Validated run configuration
        tokens: Token stream to train on; loaded from ``run.corpus_path`` when None
        resume_from: Checkpoint directory with a resume group
    """

    def __init__(
        self,
        run: RunConfig,
        tokens: Optional[np.ndarray] = None,
        resume_from: Optional[Union[str, Path]] = None,
    ):
        self.run = run
        self.objective = run.objective.update({"target_layer": run.target_layer})
        if tokens is None:
            if run.corpus_path is None:
                raise CorpusError("Run configuration has no corpus_path")
            tokens = load_corpus(run.corpus_path)
        self.batcher = ChunkBatcher(tokens, run.train.batch_size, run.train.seq_len, run.train.seed)

        self.model = build_model(run.model)
        self.head = (
            ProjectionHead.build(run.model.hidden_dim, run.objective.projector_hidden_mult, run.model.seed)
            if needs_projector(run)
            else None
        )
        self.params = dict(self.model.params)
        if self.head is not None:
            self.params.update(self.head.params)
        self.optimizer = AdamW(self.params, run.train)
        self.start_step = 0

        self.output_dir = Path(run.output_dir)
        self.checkpoint_dir = self.output_dir / "checkpoints"
        ConfigManager().write_run_config(run)

        resume_step = None
        if resume_from is not None:
            self._restore(resume_from)
            resume_step = self.start_step - 1
        self.metrics = MetricsLogger(self.output_dir / "metrics.jsonl", resume_step=resume_step)
        logger.info(
            f"Run {self.output_dir}: {run.model}, {self.objective}, "
            f"{self.model.num_parameters()} model parameters"
        )

    def _restore(self, directory: Union[str, Path]) -> None:
        ckpt = load_checkpoint(directory, resume=True)
        state = ckpt.resume
        if set(state.params) != set(self.params):
            raise ValueError(
                f"Checkpoint {directory} parameters do not match this run configuration"
            )
        for name, p in self.params.items():
            p.values = state.params[name].copy()
            self.optimizer.state.m[name] = state.adam_m[name].copy()
            self.optimizer.state.v[name] = state.adam_v[name].copy()
        self.optimizer.state.step = state.adam_step
        self.start_step = ckpt.step
        logger.info(f"Resuming from {directory} at step {self.start_step}")

    def save(self, name: str) -> Path:
        return save_checkpoint(
            self.checkpoint_dir / name,
            step=self.optimizer.state.step,
            model_config=self.run.model,
            params=self.model.params,
            projector=self.head.params if self.head else None,
            optimizer_state=self.optimizer.state,
            run_config=self.run.to_dict(),
        )

    def train_step(self, step: int) -> MetricsRecord:
        """Run optimizer step ``step`` (0-based) and return its metrics."""
        cfg = self.run.train
        self.optimizer.zero_grad()
        batch = self.batcher.batch(step)
        terms = [
            evaluate_objective(self.model, self.head, seq, self.objective, step, cfg.seed, i)
            for i, seq in enumerate(batch)
        ]
        total = scale(add_n([t.total for t in terms]), 1.0 / len(terms))
        total_value = total.item()
        if not math.isfinite(total_value):
            path = self.save(f"diagnostic_step_{step}")
            logger.error(f"Non-finite loss {total_value} at step {step}; diagnostic checkpoint at {path}")
            raise NonFiniteLossError(f"Loss became {total_value} at step {step}")

        backward(total)
        grad_norm = clip_grad_norm(self.params, cfg.grad_clip)
        lr = wsd_lr(step, cfg)
        self.optimizer.step(lr)

        nitp_values = [t.nitp.item() for t in terms if t.nitp is not None]
        alignments = [t.alignment for t in terms if t.alignment is not None]
        if self.objective.loss_family == LossFamily.COSINE and nitp_values and len(alignments) == len(nitp_values):
            drift = max(abs(s - (1.0 - n)) for s, n in zip(alignments, nitp_values))
            if drift > ALIGNMENT_TOL:
                logger.warning(f"Alignment s differs from 1 - nitp_loss by {drift:.3e} at step {step}")
        entropies = [t.trace.router_entropy for t in terms if t.trace.router_entropy]
        record = MetricsRecord(
            step=step,
            lr=lr,
            ntp_loss=float(np.mean([t.ntp.item() for t in terms])),
            nitp_loss=float(np.mean(nitp_values)) if nitp_values else None,
            total_loss=total_value,
            grad_norm=grad_norm,
            cosine_alignment=float(np.mean(alignments)) if alignments else None,
            router_entropy=np.mean(entropies, axis=0).tolist() if entropies else None,
        )
        if step % cfg.snapshot_every == 0 or step == cfg.total_steps - 1:
            snap = snapshot([t.trace for t in terms], step, self.run.probe)
            record.effective_rank = snap.effective_rank
            record.avg_cosine = snap.avg_cosine
            record.num_tokens = snap.num_tokens
            record.num_pairs = snap.num_pairs
        return record

    def fit(self) -> MetricsRecord:
        """Train from ``start_step`` to ``total_steps``; returns the last record."""
        cfg = self.run.train
        record = None
        for step in range(self.start_step, cfg.total_steps):
            record = self.train_step(step)
            last = step == cfg.total_steps - 1
            if step % cfg.log_every == 0 or record.has_snapshot or last:
                self.metrics.append(record)
                nitp = "null" if record.nitp_loss is None else f"{record.nitp_loss:.4f}"
                logger.info(
                    f"step {step}: ntp={record.ntp_loss:.4f} nitp={nitp} total={record.total_loss:.4f} "
                    f"|g|={record.grad_norm:.3f} lr={record.lr:.2e}"
                )
            if (step + 1) % cfg.checkpoint_every == 0 or last:
                self.save(f"step_{step + 1:06d}")
        if record is None:
            raise ValueError(f"Nothing to train: start step {self.start_step} >= total_steps {cfg.total_steps}")
        write_summary(self.output_dir, self.metrics.path)
        logger.info(f"Finished run {self.output_dir} at step {cfg.total_steps}")
        return record


def train(
    run: RunConfig,
    tokens: Optional[np.ndarray] = None,
    resume_from: Optional[Union[str, Path]] = None,
) -> MetricsRecord:
    """Train a run end to end and return its final metrics record."""
    return Trainer(run, tokens=tokens, resume_from=resume_from).fit()


def final_third(records: List[MetricsRecord]) -> List[MetricsRecord]:
    if not records:
        return []
    return records[len(records) - math.ceil(len(records) / 3):]


def summarize(records: List[MetricsRecord]) -> Dict[str, Any]:
    """Final metrics plus final-third snapshot means of a run."""
    if not records:
        raise ValueError("Cannot summarize an empty metrics log")
    last = records[-1]
    snaps = final_third([r for r in records if r.has_snapshot])
    tail = final_third(records)
    alignments = [r.cosine_alignment for r in tail if r.cosine_alignment is not None]
    summary: Dict[str, Any] = {
        "final_step": last.step,
        "final": last.to_dict(),
        "final_ntp_loss": last.ntp_loss,
        "final_third_effective_rank": float(np.mean([r.effective_rank for r in snaps])) if snaps else None,
        "final_third_avg_cosine": float(np.mean([r.avg_cosine for r in snaps])) if snaps else None,
        "final_third_min_alignment": float(min(alignments)) if alignments else None,
        "final_one_minus_s": (1.0 - last.cosine_alignment) if last.cosine_alignment is not None else None,
    }
    return summary


def write_summary(output_dir: Path, metrics_path: Path) -> Path:
    _, records = read_metrics(metrics_path)
    path = Path(output_dir) / "summary.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(summarize(records), f, default_flow_style=False, sort_keys=False)
    logger.info(f"Wrote run summary to {path}")
    return path


def probe(
    checkpoint: Union[str, Path],
    corpus: Union[str, Path],
    probe_cfg: Optional[ProbeConfig] = None,
    batch_size: int = 8,
    seq_len: Optional[int] = None,
) -> GeometrySnapshot:
    """One-off geometry snapshot of a checkpoint on the first batch of a corpus."""
    ckpt = load_checkpoint(checkpoint)
    model = build_model(ckpt.model_config)
    model.load_arrays(ckpt.params)
    seq_len = seq_len or min(64, ckpt.model_config.max_seq_len)
    batcher = ChunkBatcher(load_corpus(corpus), batch_size, seq_len, seed=0)
    with no_grad():
        traces = [forward(model, seq)[1] for seq in batcher.batch(0)]
    return snapshot(traces, ckpt.step, probe_cfg or ProbeConfig())
