"""Parameter containers and forward passes for the three networks.

* base learner: plain MLP, parameters ``W1, b1, ..., WL, bL`` (a ``ParamSet``)
* loss learner: 2-layer MLP from a task-state row to a scalar
* adapter: 2-layer MLP from the mean task-state row to 4 scales and 4 shifts
  applied to the loss learner's four parameter tensors
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, SpecError

ParamSet = dict[str, Tensor]

LOSS_TENSORS = ("W1", "b1", "W2", "b2")
ROLES = ("support", "query")
AFFINE_OUT = 2 * len(LOSS_TENSORS)


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "relu"
    task_kind: str = "regression"
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise SpecError(f"all layer widths must be positive: {self}")
        if self.activation not in ("relu", "leaky_relu"):
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.task_kind not in ("regression", "classification"):
            raise SpecError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "classification" and self.output_dim < 2:
            raise SpecError("classification needs at least 2 ways")

    @property
    def n_layers(self) -> int:
        """Number of weight matrices, ``L``."""
        return len(self.hidden_widths) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def state_dim(self) -> int:
        return 1 + self.n_layers + self.output_dim

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "task_kind": self.task_kind,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**{**d, "hidden_widths": tuple(d["hidden_widths"])})


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _mlp_params(widths, rng, zero_last=False) -> ParamSet:
    params: ParamSet = {}
    n = len(widths) - 1
    for i in range(n):
        fan_in, fan_out = widths[i], widths[i + 1]
        if fan_in < 1 or fan_out < 1:
            raise SpecError(f"zero-width layer in {widths}")
        w = np.zeros((fan_in, fan_out)) if (zero_last and i == n - 1) else glorot(rng, fan_in, fan_out)
        params[f"W{i + 1}"] = Tensor(w, requires_grad=True)
        params[f"b{i + 1}"] = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    return params


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights and zero biases for the base learner."""
    return _mlp_params(spec.widths, rng)


def init_loss_learner(state_dim: int, rng: np.random.Generator) -> ParamSet:
    return _mlp_params((state_dim, state_dim, 1), rng)


def init_adapter(state_dim: int, rng: np.random.Generator, zero_output: bool = True) -> ParamSet:
    """Adapter parameters. ``zero_output`` starts the transform at identity."""
    return _mlp_params((state_dim, state_dim, AFFINE_OUT), rng, zero_last=zero_output)


def _mlp(params: ParamSet, x: Tensor, n_layers: int, act) -> Tensor:
    h = x
    for i in range(1, n_layers + 1):
        h = ad.add(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < n_layers:
            h = act(h)
    return h


def forward_base(params: ParamSet, inputs, spec: ModelSpec) -> Tensor:
    """Raw outputs (regression values or logits), shape ``(B, N)``."""
    x = ad.as_tensor(inputs)
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"base learner expects (B, {spec.input_dim}) inputs, got {x.shape}")
    if spec.activation == "relu":
        act = ad.relu
    else:
        slope = spec.leaky_slope
        act = lambda t: ad.leaky_relu(t, slope)
    return _mlp(params, x, spec.n_layers, act)


def _check_rows(params: ParamSet, rows: Tensor, who: str) -> None:
    width = params["W1"].shape[0]
    if rows.data.ndim != 2 or rows.shape[1] != width or rows.shape[0] < 1:
        raise DimensionError(f"{who} expects (B, {width}) state rows, got {rows.shape}")


def forward_loss_learner(phi: ParamSet, rows) -> Tensor:
    """Per-row scalar from the 2-layer MLP, averaged over rows."""
    rows = ad.as_tensor(rows)
    _check_rows(phi, rows, "loss learner")
    return ad.mean(_mlp(phi, rows, 2, ad.relu))


@dataclass
class AffineParams:
    """Per-tensor scale and shift for ``(W1, b1, W2, b2)`` of the loss learner."""

    gamma: Tensor  # (1, 4)
    beta: Tensor  # (1, 4)

    def values(self) -> np.ndarray:
        """The 8 numbers ordered gamma_W1, beta_W1, gamma_b1, beta_b1, ..."""
        return np.stack([self.gamma.data.reshape(-1), self.beta.data.reshape(-1)], axis=1).reshape(-1)

    @classmethod
    def identity(cls) -> AffineParams:
        return cls(Tensor(np.ones((1, 4))), Tensor(np.zeros((1, 4))))


def forward_adapter(psi: ParamSet, rows) -> AffineParams:
    rows = ad.as_tensor(rows)
    _check_rows(psi, rows, "adapter")
    pooled = ad.mean(rows, axis=0, keepdims=True)
    out = _mlp(psi, pooled, 2, ad.relu)
    if out.shape != (1, AFFINE_OUT):
        raise DimensionError(f"adapter must emit {AFFINE_OUT} values, got {out.shape}")
    gamma = ad.add(ad.take(out, 0, 4, axis=1), 1.0)
    beta = ad.take(out, 4, 8, axis=1)
    return AffineParams(gamma, beta)


def adapt_loss_params(phi: ParamSet, affine: AffineParams) -> ParamSet:
    """``gamma_k * phi_k + beta_k`` for each of the four loss-learner tensors."""
    out: ParamSet = {}
    for k, name in enumerate(LOSS_TENSORS):
        g = ad.take(affine.gamma, k, k + 1, axis=1)
        b = ad.take(affine.beta, k, k + 1, axis=1)
        out[name] = ad.add(ad.mul(phi[name], g), b)
    return out


@dataclass
class MetaParamBank:
    """Loss learner and adapter parameters for every inner step and example set.

    ``loss[j][role]`` and ``adapter[j][role]`` hold the parameters used at inner
    step ``j`` for the ``support`` or ``query`` rows. With ``shared`` every slot
    refers to step 0's parameters.
    """

    loss: list[dict[str, ParamSet]]
    adapter: list[dict[str, ParamSet]]
    shared: bool = False
    state_dim: int = field(default=0)

    @property
    def steps(self) -> int:
        return len(self.loss)

    def slot(self, j: int, role: str) -> tuple[ParamSet, ParamSet]:
        if not 0 <= j < self.steps:
            raise IndexError(f"bank has {self.steps} steps, asked for step {j}")
        return self.loss[j][role], self.adapter[j][role]

    def named(self) -> dict[str, Tensor]:
        """Flat, fixed-order ``name -> tensor`` view; shared slots appear once."""
        out: dict[str, Tensor] = {}
        steps = 1 if self.shared else self.steps
        for j in range(steps):
            for role in ROLES:
                for kind, bank in (("loss", self.loss), ("adapter", self.adapter)):
                    for name, t in bank[j][role].items():
                        out[f"bank.{j}.{role}.{kind}.{name}"] = t
        return out

    def replaced(self, values: dict[str, Tensor]) -> MetaParamBank:
        """A bank with the same layout whose tensors come from ``values``."""
        steps = 1 if self.shared else self.steps
        loss, adapter = [], []
        for j in range(steps):
            loss.append({r: {n: values[f"bank.{j}.{r}.loss.{n}"] for n in self.loss[j][r]} for r in ROLES})
            adapter.append({r: {n: values[f"bank.{j}.{r}.adapter.{n}"] for n in self.adapter[j][r]} for r in ROLES})
        if self.shared:
            loss, adapter = loss * self.steps, adapter * self.steps
        return MetaParamBank(loss, adapter, self.shared, self.state_dim)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.named().items())


def init_bank(
    state_dim: int,
    steps: int,
    rng: np.random.Generator,
    shared: bool = False,
    adapter_zero_output: bool = True,
) -> MetaParamBank:
    if steps < 1:
        raise SpecError("bank needs at least one inner step")
    n = 1 if shared else steps
    loss = [{r: init_loss_learner(state_dim, rng) for r in ROLES} for _ in range(n)]
    adapter = [{r: init_adapter(state_dim, rng, adapter_zero_output) for r in ROLES} for _ in range(n)]
    if shared:
        loss, adapter = loss * steps, adapter * steps
    return MetaParamBank(loss, adapter, shared, state_dim)


def zero_like(params: ParamSet) -> ParamSet:
    return {k: Tensor(np.zeros(v.shape), requires_grad=v.requires_grad) for k, v in params.items()}
