"""Outer-loop meta-training of (theta, phi, psi) and meta-evaluation."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, NumericError, SpecError
from .innerloop import Variant, run_inner_loop
from .nets import (
    MetaParamBank,
    ModelSpec,
    ParamSet,
    forward_base,
    init_bank,
    init_params,
)
from .taskgen import (
    ClusterTaskParams,
    Task,
    make_semi_split,
    sample_cluster_task,
    sample_sinusoid_task,
)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "M6"
    task_kind: str = "sinusoid"  # sinusoid | cluster
    shots: int = 10
    ways: int = 1
    query_train: int = 15
    query_eval: int = 100
    hidden_widths: tuple[int, ...] = (80, 80)
    activation: str = "relu"
    inner_lr: float = 0.1
    outer_lr: float = 0.001
    inner_steps: int = 1
    meta_batch_size: int = 4
    epochs: int = 20
    iterations_per_epoch: int = 200
    outer_optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_tasks: int = 100
    seed: int = 0
    probs_in_state: bool = True
    adapter_zero_init: bool = True
    share_bank: bool = False
    cluster_dim: int = 20
    cluster_radius: float = 1.0
    cluster_sigma: float = ClusterTaskParams().sigma

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        Variant(self.variant)
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise SpecError("learning rates must be non-negative")
        if self.inner_steps < 1 or self.meta_batch_size < 1:
            raise SpecError("inner_steps and meta_batch_size must be at least 1")
        if self.epochs < 0 or self.iterations_per_epoch < 0:
            raise SpecError("epochs and iterations_per_epoch must be non-negative")
        if self.task_kind not in ("sinusoid", "cluster"):
            raise SpecError(f"unknown task kind {self.task_kind!r}")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise SpecError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.task_kind == "cluster" and self.ways < 2:
            raise SpecError("cluster tasks need at least 2 ways")

    @property
    def model_spec(self) -> ModelSpec:
        if self.task_kind == "sinusoid":
            return ModelSpec(1, self.hidden_widths, 1, self.activation, "regression")
        return ModelSpec(self.cluster_dim, self.hidden_widths, self.ways, self.activation, "classification")

    @property
    def metric(self) -> str:
        return "mse" if self.task_kind == "sinusoid" else "accuracy"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def sample_task(self, rng: np.random.Generator, query: int | None = None) -> Task:
        m = self.query_train if query is None else query
        if self.task_kind == "sinusoid":
            return sample_sinusoid_task(rng, self.shots, m)
        params = ClusterTaskParams(self.cluster_dim, self.cluster_radius, self.cluster_sigma)
        return sample_cluster_task(rng, self.ways, self.shots, m, params)


def _stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose]))


# purposes for the seeded substreams
_TRAIN, _VAL, _THETA, _BANK, _TEST = 0, 1, 2, 3, 4


@dataclass
class OptimizerState:
    kind: str
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class MetaModel:
    theta: ParamSet
    bank: MetaParamBank
    spec: ModelSpec
    optimizer: OptimizerState

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"theta.{k}": v for k, v in self.theta.items()}
        out.update(self.bank.named())
        return out

    def with_parameters(self, values: dict[str, np.ndarray]) -> MetaModel:
        theta = {k: Tensor(values[f"theta.{k}"], requires_grad=True) for k in self.theta}
        bank = self.bank.replaced({k: Tensor(values[k], requires_grad=True) for k in self.bank.named()})
        return replace(self, theta=theta, bank=bank)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}


def init_model(cfg: TrainConfig) -> MetaModel:
    """Seeded initialisation of theta and the full meta-parameter bank."""
    spec = cfg.model_spec
    theta = init_params(spec, _stream(cfg.seed, _THETA))
    bank = init_bank(
        spec.state_dim,
        cfg.inner_steps,
        _stream(cfg.seed, _BANK),
        shared=cfg.share_bank,
        adapter_zero_output=cfg.adapter_zero_init,
    )
    return MetaModel(theta, bank, spec, OptimizerState(cfg.outer_optimizer))


def _prepare(task: Task, variant: Variant) -> Task:
    return task.transductive() if variant.config.semi else task


def query_loss(theta: ParamSet, task: Task, spec: ModelSpec) -> Tensor:
    out = forward_base(theta, Tensor(task.query_x), spec)
    if spec.task_kind == "classification":
        return ad.softmax_ce(out, np.asarray(task.query_y, dtype=np.int64))
    return ad.mse(out, Tensor(np.asarray(task.query_y).reshape(out.shape)))


def _trainable(model: MetaModel, variant: Variant) -> dict[str, Tensor]:
    named = model.named_parameters()
    if variant.uses_bank:
        if not variant.uses_adapter:
            return {k: v for k, v in named.items() if ".adapter." not in k}
        return named
    return {k: v for k, v in named.items() if k.startswith("theta.")}


def meta_gradients(model: MetaModel, tasks: list[Task], cfg: TrainConfig) -> tuple[dict[str, np.ndarray], float]:
    """Gradient of the summed query loss through the inner loops, plus the mean loss."""
    if not tasks:
        raise ContractError("empty meta-batch")
    variant = Variant(cfg.variant)
    params = _trainable(model, variant)
    names = list(params)
    total = {n: np.zeros(params[n].shape) for n in names}
    losses = []
    for i, task in enumerate(tasks):
        theta_j, _ = run_inner_loop(
            variant,
            _prepare(task, variant),
            model.theta,
            model.bank,
            cfg.inner_lr,
            cfg.inner_steps,
            model.spec,
            create_graph=True,
            probs=cfg.probs_in_state,
            task_id=i,
        )
        loss = query_loss(theta_j, task, model.spec)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"meta-loss is not finite on task {i}")
        # accumulate in fixed task order
        for n, g in zip(names, ad.grad(loss, [params[n] for n in names])):
            total[n] += g.data
        losses.append(loss.item())
    return total, float(np.mean(losses))


def apply_update(model: MetaModel, grads: dict[str, np.ndarray], cfg: TrainConfig) -> MetaModel:
    """One outer step. Parameters without a gradient entry are left untouched."""
    opt = model.optimizer
    values = model.arrays()
    new = dict(values)
    step = opt.step + 1
    m, v = dict(opt.m), dict(opt.v)
    lr = cfg.outer_lr
    for name, g in grads.items():
        p = values[name]
        if cfg.outer_optimizer == "sgd":
            new[name] = p - lr * g
            continue
        m[name] = cfg.adam_beta1 * m.get(name, np.zeros_like(p)) + (1 - cfg.adam_beta1) * g
        v[name] = cfg.adam_beta2 * v.get(name, np.zeros_like(p)) + (1 - cfg.adam_beta2) * g * g
        m_hat = m[name] / (1 - cfg.adam_beta1**step)
        v_hat = v[name] / (1 - cfg.adam_beta2**step)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    updated = model.with_parameters(new)
    updated.optimizer = OptimizerState(opt.kind, step, m, v)
    return updated


def meta_train_step(model: MetaModel, tasks: list[Task], cfg: TrainConfig) -> tuple[MetaModel, float]:
    grads, loss = meta_gradients(model, tasks, cfg)
    return apply_update(model, grads, cfg), loss


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    metric: str
    mean: float
    ci95: float
    n_tasks: int
    values: list[float]
    fingerprint: str = ""
    degenerate: bool = False
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(values: Iterable[float], metric: str, fingerprint: str = "", label: str = "") -> EvalReport:
    """Mean and 95% interval ``1.96 * sample std / sqrt(n)``; n < 2 is flagged degenerate."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ContractError("no values to summarize")
    mean = float(np.mean(vals))
    if n < 2:
        return EvalReport(metric, mean, 0.0, n, vals, fingerprint, True, label)
    ci = 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(n)
    return EvalReport(metric, mean, ci, n, vals, fingerprint, False, label)


def adapt(model: MetaModel, task: Task, cfg: TrainConfig, create_graph: bool = False):
    """Inner-loop adaptation only; returns ``(theta_J, trace)``."""
    variant = Variant(cfg.variant)
    return run_inner_loop(
        variant,
        _prepare(task, variant),
        model.theta,
        model.bank,
        cfg.inner_lr,
        cfg.inner_steps,
        model.spec,
        create_graph=create_graph,
        probs=cfg.probs_in_state,
    )


def task_metric(theta: ParamSet, task: Task, spec: ModelSpec) -> float:
    with ad.no_grad():
        out = forward_base(theta, Tensor(task.query_x), spec).data
    if spec.task_kind == "classification":
        return float(np.mean(out.argmax(axis=1) == np.asarray(task.query_y)))
    return float(np.mean((out - np.asarray(task.query_y).reshape(out.shape)) ** 2))


def meta_evaluate(model: MetaModel, tasks: list[Task], cfg: TrainConfig, label: str = "") -> EvalReport:
    """Adapt to each task and score its query set. The model is not modified."""
    if not tasks:
        raise ContractError("no evaluation tasks")
    values = []
    for task in tasks:
        theta_j, _ = adapt(model, task, cfg)
        values.append(task_metric(theta_j, task, model.spec))
    return summarize(values, cfg.metric, cfg.fingerprint(), label or cfg.variant)


def validation_tasks(cfg: TrainConfig) -> list[Task]:
    rng = _stream(cfg.seed, _VAL)
    return [cfg.sample_task(rng, cfg.query_train) for _ in range(cfg.val_tasks)]


def held_out_tasks(cfg: TrainConfig, n: int, seed: int | None = None, query: int | None = None) -> list[Task]:
    """Held-out evaluation tasks, drawn from a stream disjoint from training and validation."""
    rng = _stream(cfg.seed if seed is None else seed, _TEST)
    q = cfg.query_eval if query is None else query
    return [cfg.sample_task(rng, q) for _ in range(n)]


def semi_tasks(tasks: list[Task], split: tuple[int, int, int], seed: int) -> list[Task]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    return [make_semi_split(t, *split, rng) for t in tasks]


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    model: MetaModel
    cfg: TrainConfig
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_metric: float | None = None
    best_params: dict[str, np.ndarray] | None = None

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.cfg.iterations_per_epoch

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    def best_model(self) -> MetaModel:
        if self.best_params is None:
            return self.model
        return self.model.with_parameters(self.best_params)


def new_train_state(cfg: TrainConfig) -> TrainState:
    return TrainState(init_model(cfg), cfg, 0, _stream(cfg.seed, _TRAIN).bit_generator.state)


def _better(metric: str, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new < old if metric == "mse" else new > old


class ProgressLog:
    """Line-delimited JSON progress records to stdout and/or a file."""

    def __init__(self, path=None, stream=sys.stdout):
        self.stream = stream
        self.fh = open(path, "a") if path is not None else None

    def __call__(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if self.stream is not None:
            print(line, file=self.stream, flush=True)
        if self.fh is not None:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()
            self.fh = None


def meta_train(
    state: TrainState,
    callbacks: Iterable[Callable[[dict], None]] = (),
    stop_at: int | None = None,
    on_abort: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run Algorithm-style outer iterations until the configured budget (or ``stop_at``).

    Validation runs at the end of every epoch on a fixed seeded pool; the best
    parameters by validation metric are kept on the state.
    """
    cfg = state.cfg
    callbacks = list(callbacks)
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    val = validation_tasks(cfg) if cfg.iterations_per_epoch and cfg.epochs else []
    end = state.total_steps if stop_at is None else min(stop_at, state.total_steps)
    while state.step < end:
        tasks = [cfg.sample_task(rng) for _ in range(cfg.meta_batch_size)]
        try:
            state.model, loss = meta_train_step(state.model, tasks, cfg)
        except NumericError as exc:
            state.rng_state = rng.bit_generator.state
            if on_abort is not None:
                on_abort(state)
            raise NumericError(f"{exc} (outer step {state.step})") from exc
        state.step += 1
        state.rng_state = rng.bit_generator.state
        epoch, it = divmod(state.step - 1, cfg.iterations_per_epoch)
        record = {"epoch": epoch, "iteration": it, "step": state.step, "train_loss": loss}
        if state.step % cfg.iterations_per_epoch == 0:
            rep = meta_evaluate(state.model, val, cfg)
            record["val_" + rep.metric] = rep.mean
            if _better(rep.metric, rep.mean, state.best_metric):
                state.best_metric = rep.mean
                state.best_params = {k: v.copy() for k, v in state.model.arrays().items()}
            state.history.append({"epoch": epoch, "step": state.step, "train_loss": loss, "val": rep.mean})
        for cb in callbacks:
            cb(record)
    return state
