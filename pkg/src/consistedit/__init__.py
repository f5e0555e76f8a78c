"""Vision-only attention control for editing with a toy MM-DiT."""
from .control import ControlMode, Mode
from .masks import EditMask
from .mmdit import ModelConfig, QkvTriple, ToyMMDiT
from .sampler import GuidanceConfig, Schedule, invert, sample
from .session import EditRequest, SourceCache, edit_real, multi_round, run_edit, run_source

__version__ = "0.1.0"

__all__ = [
    "ControlMode",
    "EditMask",
    "EditRequest",
    "GuidanceConfig",
    "Mode",
    "ModelConfig",
    "QkvTriple",
    "Schedule",
    "SourceCache",
    "ToyMMDiT",
    "edit_real",
    "invert",
    "multi_round",
    "run_edit",
    "run_source",
    "sample",
]
