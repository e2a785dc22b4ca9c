"""Task-state rows fed to the loss learner and adapter.

Each row is ``[loss slot, layer means of theta (L columns), outputs (N columns)]``.
The loss slot holds the per-example task loss for labeled rows and an
unsupervised surrogate for unlabeled rows, so both kinds of row share the same
width ``1 + L + N``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .nets import ModelSpec, ParamSet, forward_base


def layerwise_weight_means(theta: ParamSet, n_layers: int | None = None) -> Tensor:
    """Mean over ``W_l`` and ``b_l`` pooled together, for each layer; shape ``(1, L)``."""
    if n_layers is None:
        n_layers = sum(1 for k in theta if k.startswith("W"))
    means = []
    for i in range(1, n_layers + 1):
        w, b = theta[f"W{i}"], theta[f"b{i}"]
        total = ad.add(ad.sum(w), ad.sum(b))
        means.append(ad.reshape(ad.scale(total, 1.0 / (w.size + b.size)), (1, 1)))
    return ad.concat(means, axis=1)


def _assemble(slot: Tensor, theta: ParamSet, outputs: Tensor, spec: ModelSpec, mask=None) -> Tensor:
    b = outputs.shape[0]
    means = ad.expand(layerwise_weight_means(theta, spec.n_layers), (b, spec.n_layers))
    rows = ad.concat([slot, means, outputs], axis=1)
    if mask is not None:
        rows = ad.mul(rows, Tensor(mask))
    return rows


def column_mask(spec: ModelSpec, use_weights: bool = True, use_predictions: bool = True) -> np.ndarray | None:
    """Row mask zeroing the weight-mean and/or output columns; ``None`` keeps all."""
    if use_weights and use_predictions:
        return None
    m = np.ones((1, spec.state_dim))
    if not use_weights:
        m[0, 1 : 1 + spec.n_layers] = 0.0
    if not use_predictions:
        m[0, 1 + spec.n_layers :] = 0.0
    return m


def _output_columns(raw: Tensor, spec: ModelSpec, probs: bool) -> Tensor:
    if spec.task_kind == "classification" and probs:
        return ad.softmax(raw)
    return raw


def build_state_supervised(
    theta: ParamSet,
    x_s,
    y_s,
    spec: ModelSpec,
    probs: bool = True,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """State rows for labeled support examples.

    Returns ``(rows, task_loss)`` where ``task_loss`` is the scalar mean of the
    loss column, i.e. exactly the plain MAML inner objective.
    """
    x_s = ad.as_tensor(x_s)
    if x_s.shape[0] < 1:
        raise ContractError("support set is empty")
    raw = forward_base(theta, x_s, spec)
    if spec.task_kind == "classification":
        per = ad.softmax_ce(raw, np.asarray(y_s), per_example=True)
    else:
        per = ad.mse(raw, ad.as_tensor(y_s), per_example=True)
    rows = _assemble(per, theta, _output_columns(raw, spec, probs), spec, mask)
    return rows, ad.mean(per)


def build_state_unlabeled(
    theta: ParamSet,
    x_u,
    spec: ModelSpec,
    probs: bool = True,
    mask: np.ndarray | None = None,
) -> Tensor:
    """State rows for unlabeled examples.

    Classification uses the entropy of the softmaxed output in the loss slot.
    Regression has no entropy for a point prediction, so the slot holds the
    squared deviation of each prediction from the batch-mean prediction.
    """
    x_u = ad.as_tensor(x_u)
    if x_u.data.ndim != 2 or x_u.shape[0] < 1:
        raise ContractError("unlabeled set is empty")
    raw = forward_base(theta, x_u, spec)
    if spec.task_kind == "classification":
        p = ad.softmax(raw)
        slot = ad.entropy(p)
        outs = p if probs else raw
    else:
        centre = ad.expand(ad.mean(raw, axis=0, keepdims=True), raw.shape)
        slot = ad.mean(ad.square(ad.sub(raw, centre)), axis=1, keepdims=True)
        outs = raw
    return _assemble(slot, theta, outs, spec, mask)
