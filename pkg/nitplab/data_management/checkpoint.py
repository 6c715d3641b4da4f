"""
Checkpoints: a YAML manifest plus a flat little-endian tensor blob.

Layout of a checkpoint directory::

    manifest.yaml   format, step, model config, run config, metadata, tensor table
    tensors.bin     row-major tensors back to back

Each tensor table entry holds {name, group, shape, dtype, byte_offset,
byte_len}. The ``model`` group stores model and projector parameters as
``f32``; the optional ``resume`` group stores ``f64`` parameters and AdamW
moments so that a resumed run continues bit-exactly.
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import numpy as np
import yaml

from ..configs.model_config import ModelConfig
from ..tensor import Tensor

logger = logging.getLogger(__name__)

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)

FORMAT_NAME = "nitplab-tensors"
FORMAT_VERSION = 1
MANIFEST = "manifest.yaml"
BLOB = "tensors.bin"
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class CheckpointError(RuntimeError):
    """Raised for missing, malformed or mismatching checkpoints."""
    pass


@dataclass
class ResumeState:
    """Exact training state: binary64 parameters and AdamW moments."""
    adam_step: int
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]


@dataclass
class Checkpoint:
    """Contents of a loaded checkpoint directory."""
    step: int
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    projector: Dict[str, np.ndarray] = field(default_factory=dict)
    run_config: Optional[Dict[str, Any]] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    resume: Optional[ResumeState] = None


def write_tensor_file(directory: Path, entries: List[tuple], header: Dict[str, Any]) -> Path:
    """
    Write (name, group, dtype, array) entries and a manifest into ``directory``.

    Parameters
    ----------
    directory : Path
        Target directory, created if needed.
    entries : list of tuple
        (name, group, dtype tag, array) in blob order.
    header : dict
        Extra manifest keys.

    Returns
    -------
    Path
        The manifest path.
    """
    directory.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    with open(directory / BLOB, "wb") as blob:
        for name, group, tag, array in entries:
            data = np.ascontiguousarray(array, dtype=DTYPES[tag]).tobytes()
            blob.write(data)
            table.append({
                "name": name,
                "group": group,
                "shape": list(np.shape(array)),
                "dtype": tag,
                "byte_offset": offset,
                "byte_len": len(data),
            })
            offset += len(data)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, **header, "blob": BLOB, "tensors": table}
    path = directory / MANIFEST
    with open(path, "w") as f:
        yaml.safe_dump(manifest, f, default_flow_style=None, sort_keys=False)
    return path


def read_tensor_file(directory: Path, groups: Optional[set] = None) -> tuple:
    """Return (manifest, {group: {name: float64 array}}) for the requested groups."""
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise CheckpointError(f"No checkpoint manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = yaml.safe_load(f)
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointError(f"{manifest_path} is not a {FORMAT_NAME} manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {manifest.get('version')} in {manifest_path}")
    raw = (directory / manifest["blob"]).read_bytes()
    out: Dict[str, Dict[str, np.ndarray]] = {}
    for entry in manifest["tensors"]:
        if groups is not None and entry["group"] not in groups:
            continue
        dtype = DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"Unknown dtype {entry['dtype']} for tensor {entry['name']}")
        start, length = entry["byte_offset"], entry["byte_len"]
        if start + length > len(raw):
            raise CheckpointError(f"Tensor {entry['name']} runs past the end of {manifest['blob']}")
        array = np.frombuffer(raw[start:start + length], dtype=dtype).reshape(entry["shape"])
        out.setdefault(entry["group"], {})[entry["name"]] = array.astype(np.float64)
    return manifest, out


def save_checkpoint(
    directory: Union[str, Path],
    step: int,
    model_config: ModelConfig,
    params: Mapping[str, Tensor],
    projector: Optional[Mapping[str, Tensor]] = None,
    optimizer_state=None,
    run_config: Optional[Dict[str, Any]] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Save model (and optionally projector and optimizer) state.

    Parameters
    ----------
    directory : str or Path
        Checkpoint directory.
    step : int
        Number of completed optimizer steps.
    model_config : ModelConfig
        Echoed into the manifest.
    params, projector : mapping of name to Tensor
        Stored as f32 in the ``model`` group.
    optimizer_state : AdamWState, optional
        When given, a ``resume`` group of f64 parameters and moments is added.
    run_config, metadata : dict, optional
        Echoed into the manifest.

    Returns
    -------
    Path
        The checkpoint directory.
    """
    directory = Path(directory)
    projector = dict(projector or {})
    trained = {**params, **projector}
    entries = [(name, "model", "f32", t.values) for name, t in trained.items()]
    header: Dict[str, Any] = {
        "step": int(step),
        "model_config": model_config.to_dict(),
        "run_config": run_config,
        "metadata": {**(metadata or {}), "saved_utc": datetime.now(UTC).isoformat()},
        "projector_params": list(projector),
    }
    if optimizer_state is not None:
        header["adam_step"] = int(optimizer_state.step)
        for name, t in trained.items():
            entries.append((f"params/{name}", "resume", "f64", t.values))
            entries.append((f"adam_m/{name}", "resume", "f64", optimizer_state.m[name]))
            entries.append((f"adam_v/{name}", "resume", "f64", optimizer_state.v[name]))
    write_tensor_file(directory, entries, header)
    logger.info(f"Saved checkpoint for step {step} to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path], resume: bool = False) -> Checkpoint:
    """
    Load a checkpoint directory.

    Parameters
    ----------
    directory : str or Path
        Checkpoint directory.
    resume : bool
        Also load the f64 ``resume`` group.

    Raises
    ------
    CheckpointError
        If the manifest is missing or malformed, or ``resume`` is requested
        from a checkpoint that has no resume group.
    """
    directory = Path(directory)
    groups = {"model", "resume"} if resume else {"model"}
    manifest, tensors = read_tensor_file(directory, groups)
    try:
        model_config = ModelConfig.model_validate(manifest["model_config"])
    except Exception as e:
        raise CheckpointError(f"Checkpoint {directory} has an invalid model config: {e}") from e

    projector_names = set(manifest.get("projector_params") or [])
    model_group = tensors.get("model", {})
    ckpt = Checkpoint(
        step=int(manifest["step"]),
        model_config=model_config,
        params={k: v for k, v in model_group.items() if k not in projector_names},
        projector={k: v for k, v in model_group.items() if k in projector_names},
        run_config=manifest.get("run_config"),
        metadata=manifest.get("metadata") or {},
    )
    if resume:
        group = tensors.get("resume")
        if not group:
            raise CheckpointError(f"Checkpoint {directory} carries no resume state")

        def section(prefix: str) -> Dict[str, np.ndarray]:
            return {k[len(prefix):]: v for k, v in group.items() if k.startswith(prefix)}

        ckpt.resume = ResumeState(
            adam_step=int(manifest["adam_step"]),
            params=section("params/"),
            adam_m=section("adam_m/"),
            adam_v=section("adam_v/"),
        )
    logger.info(f"Loaded checkpoint {directory} (step {ckpt.step})")
    return ckpt
