"""Per-task, per-step export of the adapter's scale and shift values."""

from __future__ import annotations

import csv
from pathlib import Path

from ..errors import ContractError
from ..innerloop import Variant
from ..metatrain import MetaModel, TrainConfig, adapt
from ..nets import LOSS_TENSORS, ROLES
from ..taskgen import Task

TRACE_HEADER = ("task_id", "step", "set", "param", "gamma", "beta")


def trace_rows(model: MetaModel, tasks: list[Task], cfg: TrainConfig):
    """Yield ``(task_id, step, set, param, gamma, beta)`` in task, step, set, tensor order."""
    if not Variant(cfg.variant).uses_adapter:
        raise ContractError(f"variant {cfg.variant} has no adapter to trace")
    for i, task in enumerate(tasks):
        _, trace = adapt(model, task, cfg)
        for entry in trace:
            for role in ROLES:
                values = entry.affine.get(role)
                if values is None:
                    continue
                for k, name in enumerate(LOSS_TENSORS):
                    yield i, entry.step, role, name, float(values[2 * k]), float(values[2 * k + 1])


def export_affine_trace(model: MetaModel, tasks: list[Task], cfg: TrainConfig, path) -> int:
    """Write the trace CSV and return the number of data rows."""
    rows = list(trace_rows(model, tasks, cfg))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for task_id, step, role, name, gamma, beta in rows:
            writer.writerow([task_id, step, role, name, repr(gamma), repr(beta)])
    return len(rows)
