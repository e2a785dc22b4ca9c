"""Named experiment presets and JSON config files.

A config file is a JSON object whose keys are :class:`TrainConfig` fields. It
may be complete (as written by ``metal config``) or partial, in which case it
overrides the chosen preset field by field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from ..errors import FormatError, SpecError
from ..innerloop import Variant
from ..metatrain import TrainConfig


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    config: TrainConfig
    variants: tuple[str, ...]
    eval_tasks: int


SINUSOID = TrainConfig(
    variant="M6",
    task_kind="sinusoid",
    shots=10,
    query_train=15,
    query_eval=100,
    hidden_widths=(80, 80),
    inner_lr=0.1,
    outer_lr=0.001,
    inner_steps=1,
    meta_batch_size=4,
    epochs=20,
    iterations_per_epoch=200,
    val_tasks=100,
)

# 5-way 5-shot Gaussian-cluster classification, five inner steps, meta-batch 2
CLUSTER = TrainConfig(
    variant="M6",
    task_kind="cluster",
    ways=5,
    shots=5,
    query_train=15,
    query_eval=15,
    hidden_widths=(40, 40),
    inner_lr=0.1,
    outer_lr=0.001,
    inner_steps=5,
    meta_batch_size=2,
    epochs=10,
    iterations_per_epoch=200,
    val_tasks=100,
)

PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("sinusoid-maml", "sinusoid regression, MAML", replace(SINUSOID, variant="M1"), ("M1",), 1000),
        Preset("sinusoid-metal", "sinusoid regression, full method", SINUSOID, ("M6",), 1000),
        Preset("sinusoid", "sinusoid regression, MAML vs full method", SINUSOID, ("M1", "M6"), 1000),
        Preset("cluster", "5-way 5-shot cluster classification, full method", CLUSTER, ("M6",), 600),
        Preset("table4", "learned loss ablation: task loss, learned loss, both", CLUSTER, ("M1", "M2", "M3"), 600),
        Preset("table5", "adaptation and semi-supervision ablation", CLUSTER, ("M2", "M4", "M5", "M6"), 600),
        Preset("table6", "task-state content ablation", CLUSTER, ("M7", "M8", "M9", "M6"), 600),
    )
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def config_to_json(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def read_config_overrides(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise FormatError(f"config {path} must be a JSON object")
    return doc


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise SpecError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    merged = {**base.to_dict(), **overrides}
    if "hidden_widths" in merged:
        merged["hidden_widths"] = tuple(merged["hidden_widths"])
    cfg = TrainConfig.from_dict(merged)
    Variant(cfg.variant)
    return cfg
