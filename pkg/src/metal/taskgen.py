"""Seeded few-shot episode generators.

Every sampler draws one 63-bit task seed from the caller's generator and then
splits it with :class:`numpy.random.SeedSequence` into independent child
streams::

    child 0 -> task parameters
    child 1 -> support inputs / noise
    child 2 -> query inputs / noise

so asking for more query points never changes the support set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

SINUSOID_AMPLITUDE = (0.1, 5.0)
SINUSOID_FREQUENCY = (0.8, 1.2)
SINUSOID_PHASE = (0.0, np.pi)
SINUSOID_X = (-5.0, 5.0)

# nearest-true-mean accuracy 0.90 for 5 ways, dim 20, radius 1
# (scripts/calibrate_cluster_sigma.py, 1e5 Monte-Carlo samples)
CLUSTER_SIGMA = 0.3704

EPISODE_FORMAT = "metal-episode"
EPISODE_VERSION = 1


@dataclass
class Task:
    """One episode. Classification targets are integer labels of shape ``(n,)``."""

    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    descriptor: dict
    unlabeled_query_x: np.ndarray | None = None
    unlabeled_nonquery_x: np.ndarray | None = None
    distractor_x: np.ndarray | None = None
    split: tuple[int, int, int] | None = field(default=None)

    @property
    def kind(self) -> str:
        return self.descriptor["kind"]

    @property
    def unlabeled_x(self) -> np.ndarray | None:
        """Stacked unlabeled pools, or ``None`` when no split was attached."""
        if self.split is None:
            return None
        pools = [p for p in (self.unlabeled_query_x, self.unlabeled_nonquery_x, self.distractor_x) if p is not None]
        return np.concatenate(pools, axis=0) if pools else np.zeros((0, self.support_x.shape[1]))

    def transductive(self) -> Task:
        """Attach the query inputs as the unlabeled pool unless a split exists."""
        if self.split is not None:
            return self
        return replace(self, unlabeled_query_x=self.query_x, split=(self.query_x.shape[0], 0, 0))


def _streams(rng: np.random.Generator, n: int = 3) -> tuple[int, list[np.random.Generator]]:
    seed = int(rng.integers(0, 2**63 - 1))
    return seed, [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def sinusoid(x: np.ndarray, amplitude: float, frequency: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(frequency * x + phase)


def sample_sinusoid_task(rng: np.random.Generator, k: int, m: int) -> Task:
    """``y = A sin(w x + b)`` with A, w, b uniform in their ranges and x in [-5, 5]."""
    if k < 1 or m < 1:
        raise ContractError("need at least one support and one query point")
    seed, (pr, sr, qr) = _streams(rng)
    a = float(pr.uniform(*SINUSOID_AMPLITUDE))
    w = float(pr.uniform(*SINUSOID_FREQUENCY))
    b = float(pr.uniform(*SINUSOID_PHASE))
    xs = sr.uniform(*SINUSOID_X, size=(k, 1))
    xq = qr.uniform(*SINUSOID_X, size=(m, 1))
    desc = {"kind": "sinusoid", "seed": seed, "amplitude": a, "frequency": w, "phase": b}
    return Task(xs, sinusoid(xs, a, w, b), xq, sinusoid(xq, a, w, b), desc)


@dataclass(frozen=True)
class ClusterTaskParams:
    dim: int = 20
    radius: float = 1.0
    sigma: float = CLUSTER_SIGMA


def _sphere(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _cluster_draw(rng, means: np.ndarray, per_class: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    n_way, dim = means.shape
    labels = np.repeat(np.arange(n_way), per_class)
    x = means[labels] + sigma * rng.standard_normal((labels.size, dim))
    return x, labels


def sample_cluster_task(
    rng: np.random.Generator,
    n_way: int,
    k: int,
    m: int,
    params: ClusterTaskParams = ClusterTaskParams(),
) -> Task:
    """Gaussian clusters around class means drawn uniformly on a sphere.

    ``k`` and ``m`` are per-class counts; examples come class-major.
    """
    if n_way < 2 or k < 1 or m < 1:
        raise ContractError("need n_way >= 2 and at least one support and query example per class")
    seed, (pr, sr, qr) = _streams(rng)
    means = _sphere(pr, n_way, params.dim, params.radius)
    xs, ys = _cluster_draw(sr, means, k, params.sigma)
    xq, yq = _cluster_draw(qr, means, m, params.sigma)
    desc = {
        "kind": "cluster",
        "seed": seed,
        "n_way": n_way,
        "dim": params.dim,
        "radius": params.radius,
        "sigma": params.sigma,
        "means": means.tolist(),
    }
    return Task(xs, ys, xq, yq, desc)


def onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _same_task_inputs(task: Task, count: int, rng: np.random.Generator) -> np.ndarray:
    d = task.descriptor
    if task.kind == "sinusoid":
        return rng.uniform(*SINUSOID_X, size=(count, 1))
    x, _ = _cluster_draw(rng, np.asarray(d["means"]), count, d["sigma"])
    return x


def _distractor_inputs(task: Task, count: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    d = task.descriptor
    if task.kind == "sinusoid":
        other = sample_sinusoid_task(rng, count, 1)
        return other.support_x, other.descriptor
    # every distractor gets its own fresh class, so the pool has no cluster structure to latch onto
    means = _sphere(rng, d["n_way"] * count, d["dim"], d["radius"])
    x, _ = _cluster_draw(rng, means, 1, d["sigma"])
    return x, {"kind": "cluster", "means": means.tolist()}


def make_semi_split(
    task: Task,
    n_query_unlabeled: int,
    n_nonquery: int,
    n_distractor: int,
    rng: np.random.Generator,
) -> Task:
    """Attach unlabeled pools: query inputs, fresh same-task inputs, other-task inputs.

    For cluster tasks the counts are per class (so ``(15, 0, 0)`` with 15 query
    examples per class is the whole query set); for sinusoids they are totals.
    """
    if min(n_query_unlabeled, n_nonquery, n_distractor) < 0:
        raise ContractError("unlabeled pool sizes must be non-negative")
    per_class = task.kind == "cluster"
    n_way = task.descriptor.get("n_way", 1)
    uq = None
    if n_query_unlabeled:
        if per_class:
            m = task.query_x.shape[0] // n_way
            if n_query_unlabeled > m:
                raise ContractError(f"only {m} query examples per class")
            idx = np.concatenate([np.arange(c * m, c * m + n_query_unlabeled) for c in range(n_way)])
            uq = task.query_x[idx]
        else:
            if n_query_unlabeled > task.query_x.shape[0]:
                raise ContractError(f"only {task.query_x.shape[0]} query points")
            uq = task.query_x[:n_query_unlabeled]
    nq = _same_task_inputs(task, n_nonquery, rng) if n_nonquery else None
    dx, ddesc = _distractor_inputs(task, n_distractor, rng) if n_distractor else (None, None)
    desc = dict(task.descriptor)
    if ddesc is not None:
        desc["distractor"] = ddesc
    return replace(
        task,
        descriptor=desc,
        unlabeled_query_x=uq,
        unlabeled_nonquery_x=nq,
        distractor_x=dx,
        split=(n_query_unlabeled, n_nonquery, n_distractor),
    )


_ARRAYS = ("support_x", "support_y", "query_x", "query_y", "unlabeled_query_x", "unlabeled_nonquery_x", "distractor_x")


def task_to_json(task: Task) -> str:
    arrays = {}
    for name in _ARRAYS:
        a = getattr(task, name)
        if a is not None:
            a = np.asarray(a)
            arrays[name] = {"dtype": "int" if np.issubdtype(a.dtype, np.integer) else "float",
                            "shape": list(a.shape), "data": a.reshape(-1).tolist()}
    doc = {
        "format": EPISODE_FORMAT,
        "version": EPISODE_VERSION,
        "descriptor": task.descriptor,
        "split": list(task.split) if task.split is not None else None,
        "arrays": arrays,
    }
    return json.dumps(doc, indent=1)


def task_from_json(text: str) -> Task:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"episode is not valid JSON: {exc}") from None
    if doc.get("format") != EPISODE_FORMAT or doc.get("version") != EPISODE_VERSION:
        raise FormatError("not a version-1 episode file")
    fields = {}
    for name, spec in doc["arrays"].items():
        if name not in _ARRAYS:
            raise FormatError(f"unknown array {name!r}")
        dtype = np.int64 if spec["dtype"] == "int" else np.float64
        a = np.asarray(spec["data"], dtype=dtype)
        if a.size != int(np.prod(spec["shape"])):
            raise FormatError(f"array {name!r} has {a.size} values for shape {spec['shape']}")
        fields[name] = a.reshape(spec["shape"])
    for name in _ARRAYS[:4]:
        if name not in fields:
            raise FormatError(f"missing array {name!r}")
    split = tuple(doc["split"]) if doc.get("split") is not None else None
    return Task(descriptor=doc["descriptor"], split=split, **fields)


def save_task(task: Task, path) -> None:
    Path(path).write_text(task_to_json(task))


def load_task(path) -> Task:
    return task_from_json(Path(path).read_text())
