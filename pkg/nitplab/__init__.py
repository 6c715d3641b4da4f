from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from .configs import ConfigManager, RunConfig
from .flops import ntp_train_flops
from .theory import run_verification
from .trainer import probe, train

try:
    __version__ = version("nitplab")
except PackageNotFoundError:
    __version__ = "0.0.0"

# Package docs are the repository README when running from a checkout
_readme = Path(__file__).resolve().parent.parent / "README.md"
__doc__ = _readme.read_text(encoding="utf-8") if _readme.exists() else "Next implicit token prediction lab."

__all__ = [
    "ConfigManager",
    "RunConfig",
    "ntp_train_flops",
    "probe",
    "run_verification",
    "train",
    "__version__",
]
