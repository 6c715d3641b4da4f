"""
Paired ablation runs.

An axis expands a base run configuration into named arms. Every axis has an
``ntp`` arm with NITP disabled, so each arm can be compared against plain
next-token training on the same data, seed and schedule. Arms write into
``<output_dir>/<axis>/<arm>/`` and the axis table goes to
``<output_dir>/<axis>/ablation.yaml``.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .configs.config_manager import RunConfig
from .configs.objective_config import LossFamily, TemporalShift
from .data_management.corpus import load_corpus
from .data_management.metrics_log import read_metrics
from .trainer import summarize, train

logger = logging.getLogger(__name__)

AXES = ("target_layer", "shift", "loss", "lambda", "start_step", "projector", "sg", "regularizer")
LAMBDA_SWEEP = (0.0, 0.5, 0.8, 1.0, 2.0)
START_FRACTIONS = (0.0, 0.1, 0.2, 0.3)
DEPTH_FRACTIONS = (0.2, 0.5, 0.8)

Arm = Tuple[str, Dict[str, Any]]


def target_layers(num_layers: int) -> List[int]:
    """Shallow, middle and deep target layers, clamped to [1, L] and de-duplicated."""
    layers = []
    for frac in DEPTH_FRACTIONS:
        layer = min(num_layers, max(1, round(frac * num_layers)))
        if layer not in layers:
            layers.append(layer)
    return layers


def axis_arms(run: RunConfig, axis: str) -> List[Arm]:
    """
    Objective overrides for every arm of ``axis``.

    Args:
        run: Base run configuration
        axis: One of ``AXES``

    Returns:
        (arm name, objective updates) pairs; the first arm is the NTP baseline

    Raises:
        ValueError: If the axis is unknown
    """
    arms: List[Arm] = [("ntp", {"enabled": False})]
    on = {"enabled": True}
    if axis == "target_layer":
        arms += [(f"layer_{k}", {**on, "target_layer": k}) for k in target_layers(run.model.num_layers)]
    elif axis == "shift":
        arms += [(s.value, {**on, "temporal_shift": s.value}) for s in TemporalShift]
    elif axis == "loss":
        families = (LossFamily.MSE, LossFamily.SMOOTH_L1, LossFamily.KL, LossFamily.COSINE)
        arms += [(f.value, {**on, "loss_family": f.value}) for f in families]
    elif axis == "lambda":
        arms += [(f"lambda_{lam:g}", {**on, "nitp_lambda": lam}) for lam in LAMBDA_SWEEP]
    elif axis == "start_step":
        total = run.train.total_steps
        arms += [
            (f"start_{int(frac * 100)}pct", {**on, "nitp_start_step": int(round(frac * total))})
            for frac in START_FRACTIONS
        ]
    elif axis == "projector":
        arms += [("projector", {**on, "use_projector": True}), ("no_projector", {**on, "use_projector": False})]
    elif axis == "sg":
        arms += [("sg", {**on, "stop_gradient_targets": True}), ("no_sg", {**on, "stop_gradient_targets": False})]
    elif axis == "regularizer":
        arms += [
            ("nitp_cosine", {**on, "loss_family": LossFamily.COSINE.value}),
            ("generic_cosine_reg", {**on, "loss_family": LossFamily.GENERIC_COSINE_REG.value}),
        ]
    else:
        raise ValueError(f"Unknown ablation axis '{axis}', expected one of {', '.join(AXES)}")
    return arms


def arm_config(run: RunConfig, axis: str, name: str, objective: Dict[str, Any]) -> RunConfig:
    out_dir = Path(run.output_dir) / axis / name
    return run.update({"objective": objective, "output_dir": str(out_dir)})


def _delta(a: Optional[float], b: Optional[float]) -> Optional[float]:
    if a is None or b is None:
        return None
    return float(b - a)


def compare_to_baseline(baseline: Dict[str, Any], arm: Dict[str, Any]) -> Dict[str, Optional[float]]:
    """Arm minus NTP baseline for the headline summary quantities."""
    keys = ("final_ntp_loss", "final_third_effective_rank", "final_third_avg_cosine")
    return {f"delta_{k}": _delta(baseline.get(k), arm.get(k)) for k in keys}


def run_ablation(run: RunConfig, axis: str, tokens: Optional[np.ndarray] = None) -> Dict[str, Any]:
    """
    Train every arm of ``axis`` and write the ``ablation.yaml`` table.

    Args:
        run: Base run configuration; its objective section is overridden per arm
        axis: Ablation axis name
        tokens: Token stream shared by all arms; loaded from ``run.corpus_path`` when None

    Returns:
        The table written to disk: per-arm summaries and deltas against the NTP arm
    """
    arms = axis_arms(run, axis)
    if tokens is None:
        tokens = load_corpus(run.corpus_path) if run.corpus_path else None
    summaries: Dict[str, Dict[str, Any]] = {}
    for name, objective in arms:
        cfg = arm_config(run, axis, name, objective)
        logger.info(f"Ablation {axis}: starting arm '{name}' -> {cfg.output_dir}")
        train(cfg, tokens=tokens)
        _, records = read_metrics(Path(cfg.output_dir) / "metrics.jsonl")
        summaries[name] = {"objective": objective, **summarize(records)}
        logger.info(f"Ablation {axis}: finished arm '{name}', final ntp_loss {summaries[name]['final_ntp_loss']:.4f}")

    baseline = summaries["ntp"]
    table = {
        "axis": axis,
        "baseline": "ntp",
        "arms": {
            name: {**s, "vs_ntp": compare_to_baseline(baseline, s)} for name, s in summaries.items()
        },
    }
    path = Path(run.output_dir) / axis / "ablation.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(table, f, default_flow_style=False, sort_keys=False)
    logger.info(f"Wrote ablation table to {path}")
    return table


def format_table(table: Dict[str, Any]) -> str:
    lines = [
        f"Ablation axis: {table['axis']}",
        f"{'arm':<22}{'ntp_loss':>12}{'erank':>10}{'avg_cos':>10}{'Δntp':>10}{'Δerank':>10}",
    ]

    def fmt(x: Optional[float], width: int, prec: int = 4) -> str:
        return f"{'-':>{width}}" if x is None else f"{x:>{width}.{prec}f}"

    for name, arm in table["arms"].items():
        vs = arm["vs_ntp"]
        lines.append(
            f"{name:<22}{fmt(arm['final_ntp_loss'], 12)}{fmt(arm['final_third_effective_rank'], 10, 2)}"
            f"{fmt(arm['final_third_avg_cosine'], 10)}{fmt(vs['delta_final_ntp_loss'], 10)}"
            f"{fmt(vs['delta_final_third_effective_rank'], 10, 2)}"
        )
    return "\n".join(lines)
