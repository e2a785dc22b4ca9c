"""Finite-difference oracles for the autodiff engine and the bi-level gradient.

Errors are norm-wise relative errors ``|a - n| / max(|a|, |n|, 1e-12)`` between
the analytic gradient ``a`` and the central-difference estimate ``n``. Vector
outputs are reduced to a scalar with a fixed random projection.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

STEP = 1e-5
FIRST_ORDER_TOL = 1e-6
SECOND_ORDER_TOL = 1e-4
BILEVEL_TOL = 1e-4


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    a, n = np.ravel(a), np.ravel(n)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def central_diff(f: Callable[[list[np.ndarray]], float], xs: list[np.ndarray], h: float = STEP) -> list[np.ndarray]:
    """Central differences of scalar ``f`` with respect to every entry of every input."""
    out = []
    for i, x in enumerate(xs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = f(xs)
            x[idx] = orig - h
            fm = f(xs)
            x[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    inputs: Callable[[np.random.Generator], list[np.ndarray]]


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.uniform(-2, 2, size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def _probs(rng, b, n):
    p = rng.uniform(0.1, 1.0, size=(b, n))
    return p / p.sum(axis=1, keepdims=True)


def op_cases() -> list[OpCase]:
    u = lambda *s: (lambda r: [r.uniform(-2, 2, size=t) for t in s])
    labels = np.array([0, 2, 1])
    return [
        OpCase("add", ad.add, u((3, 4), (3, 4))),
        OpCase("add_row_broadcast", ad.add, u((3, 4), (1, 4))),
        OpCase("add_scalar_broadcast", ad.add, u((3, 4), ())),
        OpCase("sub", ad.sub, u((3, 4), (1, 4))),
        OpCase("mul", ad.mul, u((3, 4), (3, 4))),
        OpCase("mul_row_broadcast", ad.mul, u((3, 4), (1, 4))),
        OpCase("div", ad.div, lambda r: [r.uniform(-2, 2, (3, 2)), r.uniform(0.5, 2, (3, 2))]),
        OpCase("neg", ad.neg, u((3, 2))),
        OpCase("scale", lambda a: ad.scale(a, -1.7), u((3, 2))),
        OpCase("relu", ad.relu, lambda r: [_away_from_zero(r, (4, 3))]),
        OpCase("leaky_relu", lambda a: ad.leaky_relu(a, 0.01), lambda r: [_away_from_zero(r, (4, 3))]),
        OpCase("exp", ad.exp, u((3, 3))),
        OpCase("log", ad.log, lambda r: [r.uniform(0.5, 2.0, (3, 3))]),
        OpCase("square", ad.square, u((3, 3))),
        OpCase("matmul", ad.matmul, u((3, 4), (4, 2))),
        OpCase("transpose", ad.transpose, u((3, 2))),
        OpCase("reshape", lambda a: ad.reshape(a, (2, 3)), u((3, 2))),
        OpCase("sum_all", ad.sum, u((3, 4))),
        OpCase("sum_axis0", lambda a: ad.sum(a, axis=0), u((3, 4))),
        OpCase("sum_axis1_keep", lambda a: ad.sum(a, axis=1, keepdims=True), u((3, 4))),
        OpCase("mean_all", ad.mean, u((3, 4))),
        OpCase("mean_axis0", lambda a: ad.mean(a, axis=0, keepdims=True), u((3, 4))),
        OpCase("expand_row", lambda a: ad.expand(a, (3, 4)), u((1, 4))),
        OpCase("expand_col", lambda a: ad.expand(a, (3, 4)), u((3, 1))),
        OpCase("sum_to_row", lambda a: ad.sum_to(a, (1, 4)), u((3, 4))),
        OpCase("concat_axis1", lambda a, b: ad.concat([a, b], axis=1), u((2, 1), (2, 3))),
        OpCase("concat_axis0", lambda a, b: ad.concat([a, b], axis=0), u((1, 3), (2, 3))),
        OpCase("take", lambda a: ad.take(a, 1, 3, axis=1), u((2, 4))),
        OpCase("softmax", ad.softmax, u((3, 4))),
        OpCase("softmax_ce", lambda z: ad.softmax_ce(z, labels), u((3, 4))),
        OpCase("softmax_ce_per_example", lambda z: ad.softmax_ce(z, labels, per_example=True), u((3, 4))),
        OpCase("mse", ad.mse, u((3, 2), (3, 2))),
        OpCase("mse_per_example", lambda a, b: ad.mse(a, b, per_example=True), u((3, 2), (3, 2))),
        OpCase("entropy", ad.entropy, lambda r: [_probs(r, 3, 4)]),
    ]


def _projection(case: OpCase, xs: list[np.ndarray], rng) -> np.ndarray:
    with ad.no_grad():
        out = case.fn(*[Tensor(x) for x in xs])
    return rng.uniform(-1, 1, size=out.shape)


def _scalar(case: OpCase, w: np.ndarray, ts: list[Tensor]) -> Tensor:
    out = case.fn(*ts)
    return ad.sum(ad.mul(out, Tensor(w)))


def first_order_error(case: OpCase, rng: np.random.Generator) -> float:
    xs = case.inputs(rng)
    w = _projection(case, xs, rng)
    ts = [Tensor(x.copy(), requires_grad=True) for x in xs]
    analytic = ad.grad(_scalar(case, w, ts), ts)
    numeric = central_diff(lambda v: _scalar(case, w, [Tensor(x) for x in v]).item(), [x.copy() for x in xs])
    return rel_err(np.concatenate([g.data.ravel() for g in analytic]), np.concatenate([n.ravel() for n in numeric]))


def second_order_error(case: OpCase, rng: np.random.Generator) -> float:
    """Double backward of ``sum(v * grad f)`` against differences of the first gradient.

    ``v`` is a random weight; with all-ones weights shift-invariant ops such as
    softmax would make the check vacuous.
    """
    xs = case.inputs(rng)
    w = _projection(case, xs, rng)
    vs = [rng.uniform(0.5, 1.5, size=x.shape) for x in xs]

    def weighted_grad_sum(values, create_graph):
        ts = [Tensor(v, requires_grad=True) for v in values]
        gs = ad.grad(_scalar(case, w, ts), ts, create_graph=create_graph)
        s = ad.sum(ad.mul(gs[0], Tensor(vs[0])))
        for g, v in zip(gs[1:], vs[1:]):
            s = ad.add(s, ad.sum(ad.mul(g, Tensor(v))))
        return ts, s

    ts, s = weighted_grad_sum([x.copy() for x in xs], True)
    analytic = ad.grad(s, ts)
    numeric = central_diff(lambda v: weighted_grad_sum([x.copy() for x in v], False)[1].item(), [x.copy() for x in xs])
    a = np.concatenate([g.data.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    if np.linalg.norm(a) == 0.0 and np.linalg.norm(n) < 1e-8:
        # linear ops: both sides are (numerically) zero
        return 0.0
    return rel_err(a, n)


def run_op_suite(cases: int = 100, seed: int = 0) -> dict[str, dict[str, float]]:
    """Worst first- and second-order error per op over ``cases`` random inputs."""
    results = {}
    for i, case in enumerate(op_cases()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        first = max(first_order_error(case, rng) for _ in range(cases))
        second = max(second_order_error(case, rng) for _ in range(max(1, cases // 10)))
        results[case.name] = {"first": first, "second": second}
    return results


def bilevel_error(seed: int = 0, variant: str = "M6", steps: int = 2) -> float:
    """Query loss after ``steps`` inner updates, differentiated w.r.t. (theta, phi, psi).

    Uses a 1-hidden-unit regression learner and a non-zero adapter so every
    parameter group carries gradient.
    """
    from .innerloop import Variant, run_inner_loop
    from .metatrain import query_loss
    from .nets import ModelSpec, init_bank, init_params
    from .taskgen import sample_sinusoid_task

    rng = np.random.default_rng(seed)
    spec = ModelSpec(1, (1,), 1)
    theta = init_params(spec, rng)
    bank = init_bank(spec.state_dim, steps, rng, adapter_zero_output=False)
    task = sample_sinusoid_task(rng, 5, 5).transductive()
    v = Variant(variant)

    named = {f"theta.{k}": t for k, t in theta.items()}
    named.update(bank.named())
    names = list(named)

    def loss_of(values: dict[str, Tensor]) -> Tensor:
        th = {k: values[f"theta.{k}"] for k in theta}
        bk = bank.replaced({k: values[k] for k in bank.named()})
        theta_j, _ = run_inner_loop(v, task, th, bk, 0.1, steps, spec, create_graph=True)
        return query_loss(theta_j, task, spec)

    analytic = ad.grad(loss_of(named), [named[n] for n in names])

    def f(arrays):
        return loss_of({n: Tensor(a, requires_grad=True) for n, a in zip(names, arrays)}).item()

    numeric = central_diff(f, [named[n].data.copy() for n in names])
    return rel_err(np.concatenate([g.data.ravel() for g in analytic]), np.concatenate([g.ravel() for g in numeric]))
