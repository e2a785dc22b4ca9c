"""Differentiable inner-loop adaptation for MAML and the learned-loss variants.

Variants follow the ablation models::

    M1  task loss only (MAML)
    M2  learned loss on support rows
    M3  task loss + learned loss
    M4  M2 with the adapter transforming the loss learner per task and step
    M5  M2 plus learned loss on unlabeled rows
    M6  M4 plus learned loss on unlabeled rows (full method)
    M7  M6 with only the loss slot in the task state
    M8  M6 with loss slot and weight means
    M9  M6 with loss slot and predictions
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError
from .nets import (
    MetaParamBank,
    ModelSpec,
    ParamSet,
    adapt_loss_params,
    forward_adapter,
    forward_base,
    forward_loss_learner,
)
from .taskgen import Task
from .taskstate import build_state_supervised, build_state_unlabeled, column_mask


@dataclass(frozen=True)
class VariantConfig:
    learned_loss: bool
    task_loss: bool
    adaptive: bool
    semi: bool
    use_weights: bool = True
    use_predictions: bool = True


class Variant(str, Enum):
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    M4 = "M4"
    M5 = "M5"
    M6 = "M6"
    M7 = "M7"
    M8 = "M8"
    M9 = "M9"

    @property
    def config(self) -> VariantConfig:
        return _VARIANTS[self]

    @property
    def uses_bank(self) -> bool:
        return self.config.learned_loss

    @property
    def uses_adapter(self) -> bool:
        return self.config.adaptive

    @property
    def label(self) -> str:
        return _LABELS[self]


_VARIANTS = {
    Variant.M1: VariantConfig(learned_loss=False, task_loss=True, adaptive=False, semi=False),
    Variant.M2: VariantConfig(learned_loss=True, task_loss=False, adaptive=False, semi=False),
    Variant.M3: VariantConfig(learned_loss=True, task_loss=True, adaptive=False, semi=False),
    Variant.M4: VariantConfig(learned_loss=True, task_loss=False, adaptive=True, semi=False),
    Variant.M5: VariantConfig(learned_loss=True, task_loss=False, adaptive=False, semi=True),
    Variant.M6: VariantConfig(learned_loss=True, task_loss=False, adaptive=True, semi=True),
    Variant.M7: VariantConfig(True, False, True, True, use_weights=False, use_predictions=False),
    Variant.M8: VariantConfig(True, False, True, True, use_weights=True, use_predictions=False),
    Variant.M9: VariantConfig(True, False, True, True, use_weights=False, use_predictions=True),
}

_LABELS = {
    Variant.M1: "task loss (MAML)",
    Variant.M2: "learned loss",
    Variant.M3: "task loss + learned loss",
    Variant.M4: "task-adaptive learned loss",
    Variant.M5: "semi-supervised learned loss",
    Variant.M6: "task-adaptive + semi-supervised",
    Variant.M7: "state: loss only",
    Variant.M8: "state: loss + weights",
    Variant.M9: "state: loss + predictions",
}


@dataclass
class TraceEntry:
    step: int
    inner_loss: float
    affine: dict[str, np.ndarray] = field(default_factory=dict)  # role -> 8 values
    task_id: int | str | None = None


@dataclass
class TaskArrays:
    """Task inputs wrapped once as constant tensors."""

    support_x: Tensor
    support_y: Tensor | np.ndarray
    unlabeled_x: Tensor | None

    @classmethod
    def of(cls, task: Task, spec: ModelSpec) -> TaskArrays:
        if spec.task_kind == "classification":
            ys = np.asarray(task.support_y, dtype=np.int64)
        else:
            ys = Tensor(np.asarray(task.support_y, dtype=np.float64).reshape(-1, spec.output_dim))
        u = task.unlabeled_x
        return cls(Tensor(task.support_x), ys, None if u is None else Tensor(u))


def _step(theta: ParamSet, objective: Tensor, alpha: float, j: int, create_graph: bool) -> ParamSet:
    if not np.isfinite(objective.data).all():
        raise NumericError(f"inner objective is not finite at step {j}: {objective.data}")
    names = list(theta)
    grads = ad.grad(objective, [theta[n] for n in names], create_graph=create_graph)
    if create_graph:
        return {n: ad.sub(theta[n], ad.scale(g, alpha)) for n, g in zip(names, grads)}
    return {n: Tensor(theta[n].data - alpha * g.data, requires_grad=True) for n, g in zip(names, grads)}


def inner_step_maml(
    theta: ParamSet,
    task: Task | TaskArrays,
    alpha: float,
    spec: ModelSpec,
    create_graph: bool = True,
    step: int = 0,
) -> tuple[ParamSet, float]:
    """One plain gradient step on the support loss. Returns ``(theta', loss)``."""
    arrays = task if isinstance(task, TaskArrays) else TaskArrays.of(task, spec)
    out = forward_base(theta, arrays.support_x, spec)
    if spec.task_kind == "classification":
        loss = ad.softmax_ce(out, arrays.support_y)
    else:
        loss = ad.mse(out, arrays.support_y)
    return _step(theta, loss, alpha, step, create_graph), loss.item()


def _learned_term(loss_params: ParamSet, adapter_params: ParamSet, rows: Tensor, adaptive: bool):
    if adaptive:
        affine = forward_adapter(adapter_params, rows)
        phi = adapt_loss_params(loss_params, affine)
    else:
        affine, phi = None, loss_params
    return forward_loss_learner(phi, rows), affine


def inner_step_metal(
    theta: ParamSet,
    task: Task | TaskArrays,
    bank: MetaParamBank,
    j: int,
    alpha: float,
    spec: ModelSpec,
    variant: Variant = Variant.M6,
    create_graph: bool = True,
    probs: bool = True,
) -> tuple[ParamSet, TraceEntry]:
    """One learned-loss inner step using bank slot ``j``."""
    cfg = variant.config
    if not cfg.learned_loss:
        raise ContractError(f"{variant.value} has no learned loss; use inner_step_maml")
    arrays = task if isinstance(task, TaskArrays) else TaskArrays.of(task, spec)
    if cfg.semi and arrays.unlabeled_x is None:
        raise ContractError(f"{variant.value} needs an unlabeled pool; attach one with make_semi_split or transductive()")
    mask = column_mask(spec, cfg.use_weights, cfg.use_predictions)

    rows_s, task_loss = build_state_supervised(theta, arrays.support_x, arrays.support_y, spec, probs, mask)
    loss_s, adapter_s = bank.slot(j, "support")
    objective, affine_s = _learned_term(loss_s, adapter_s, rows_s, cfg.adaptive)
    entry = TraceEntry(step=j, inner_loss=0.0)
    if affine_s is not None:
        entry.affine["support"] = affine_s.values()

    if cfg.semi and arrays.unlabeled_x.shape[0] > 0:
        rows_q = build_state_unlabeled(theta, arrays.unlabeled_x, spec, probs, mask)
        loss_q, adapter_q = bank.slot(j, "query")
        term_q, affine_q = _learned_term(loss_q, adapter_q, rows_q, cfg.adaptive)
        objective = ad.add(objective, term_q)
        if affine_q is not None:
            entry.affine["query"] = affine_q.values()
    if cfg.task_loss:
        objective = ad.add(objective, task_loss)

    entry.inner_loss = float(objective.item()) if np.isfinite(objective.data).all() else float("nan")
    return _step(theta, objective, alpha, j, create_graph), entry


def run_inner_loop(
    variant: Variant,
    task: Task,
    theta: ParamSet,
    bank: MetaParamBank | None,
    alpha: float,
    steps: int,
    spec: ModelSpec,
    create_graph: bool = True,
    probs: bool = True,
    task_id=None,
) -> tuple[ParamSet, list[TraceEntry]]:
    """Run ``steps`` inner updates from ``theta``; step ``j`` uses bank slot ``j``."""
    if steps < 1:
        raise ContractError("need at least one inner step")
    variant = Variant(variant)
    arrays = TaskArrays.of(task, spec)
    trace: list[TraceEntry] = []
    for j in range(steps):
        if variant.uses_bank:
            if bank is None:
                raise ContractError(f"{variant.value} needs a meta-parameter bank")
            theta, entry = inner_step_metal(theta, arrays, bank, j, alpha, spec, variant, create_graph, probs)
        else:
            theta, loss = inner_step_maml(theta, arrays, alpha, spec, create_graph, step=j)
            entry = TraceEntry(step=j, inner_loss=loss)
        entry.task_id = task_id
        trace.append(entry)
    return theta, trace
