"""Experiment harness: presets, checkpoints, trace export, reports and the CLI."""

from .checkpoint import load_checkpoint, save_checkpoint
from .presets import PRESETS, Preset, get_preset
from .report import Comparison, compare_report
from .trace import TRACE_HEADER, export_affine_trace

__all__ = [
    "PRESETS",
    "TRACE_HEADER",
    "Comparison",
    "Preset",
    "compare_report",
    "export_affine_trace",
    "get_preset",
    "load_checkpoint",
    "save_checkpoint",
]
