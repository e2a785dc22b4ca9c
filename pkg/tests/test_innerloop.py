import numpy as np
import pytest

from metal import autodiff as ad
from metal.autodiff import Tensor
from metal.errors import ContractError, NumericError
from metal.innerloop import Variant, inner_step_maml, inner_step_metal, run_inner_loop
from metal.metatrain import query_loss
from metal.nets import MetaParamBank, ModelSpec, init_bank, init_params, zero_like
from metal.taskgen import (
    Task,
    make_semi_split,
    sample_cluster_task,
    sample_sinusoid_task,
)

LINEAR = ModelSpec(1, (), 1)
SMALL = ModelSpec(1, (8,), 1)
SMALL_CLS = ModelSpec(20, (8,), 5, task_kind="classification")


def leaf(v):
    return Tensor(np.asarray(v, dtype=float), requires_grad=True)


def one_point_task():
    x, y = np.array([[1.0]]), np.array([[0.0]])
    return Task(x, y, x, y, {"kind": "sinusoid"})


def bank_of(loss_params, state_dim):
    """Single-step bank with the given loss learner in both roles and zero adapters."""
    zeros = {"W1": leaf(np.zeros((state_dim, state_dim))), "b1": leaf(np.zeros((1, state_dim))),
             "W2": leaf(np.zeros((state_dim, 8))), "b2": leaf(np.zeros((1, 8)))}
    return MetaParamBank([{"support": loss_params, "query": loss_params}], [{"support": zeros, "query": zeros}],
                         state_dim=state_dim)


class TestMamlStep:
    def test_hand_gradient(self):
        theta = {"W1": leaf([[1.0]]), "b1": leaf([[0.0]])}
        new, loss = inner_step_maml(theta, one_point_task(), 0.1, LINEAR)
        assert loss == 1.0
        assert new["W1"].item() == pytest.approx(0.8, abs=1e-15)

    def test_perfect_fit_leaves_theta(self):
        theta = {"W1": leaf([[2.0]]), "b1": leaf([[1.0]])}
        x = np.array([[0.5], [-1.0]])
        task = Task(x, 2 * x + 1, x, 2 * x + 1, {"kind": "sinusoid"})
        new, _ = inner_step_maml(theta, task, 0.1, LINEAR)
        assert new["W1"].item() == 2.0 and new["b1"].item() == 1.0

    def test_zero_step_size_is_bit_exact(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        new, _ = inner_step_maml(theta, sample_sinusoid_task(np.random.default_rng(1), 5, 5), 0.0, SMALL)
        for k in theta:
            assert new[k].data.tobytes() == theta[k].data.tobytes()


class TestMetalStep:
    def test_hand_chain_rule(self):
        # row = [squared error 1, mean(w, b) 0.5, prediction 1]
        # hidden pre-activation 0.5*1 + 1*0.5 + 0.25*1 + 0.1 = 1.35 > 0, output 2 * 1.35
        # d/dw = 2 * (0.5 * 2 + 1 * 0.5 + 0.25 * 1) = 3.5, same for b
        phi = {"W1": leaf([[0.5], [1.0], [0.25]]), "b1": leaf([[0.1]]), "W2": leaf([[2.0]]), "b2": leaf([[0.0]])}
        theta = {"W1": leaf([[1.0]]), "b1": leaf([[0.0]])}
        new, entry = inner_step_metal(theta, one_point_task(), bank_of(phi, 3), 0, 0.1, LINEAR, Variant.M2)
        assert entry.inner_loss == pytest.approx(2.7, abs=1e-14)
        assert new["W1"].item() == pytest.approx(0.65, abs=1e-14)
        assert new["b1"].item() == pytest.approx(-0.35, abs=1e-14)

    def test_zero_loss_learner_leaves_theta(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        bank = bank.replaced({k: Tensor(np.zeros(v.shape), requires_grad=True) for k, v in bank.named().items()})
        new, entry = inner_step_metal(theta, sample_sinusoid_task(np.random.default_rng(2), 5, 5), bank, 0, 0.1,
                                      SMALL, Variant.M2)
        assert entry.inner_loss == 0.0
        for k in theta:
            assert new[k].data.tobytes() == theta[k].data.tobytes()

    def test_semi_needs_pool(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        with pytest.raises(ContractError):
            inner_step_metal(theta, sample_sinusoid_task(np.random.default_rng(2), 5, 5), bank, 0, 0.1, SMALL,
                             Variant.M6)

    def test_empty_pool_drops_query_term(self):
        theta = init_params(SMALL_CLS, np.random.default_rng(0))
        bank = init_bank(SMALL_CLS.state_dim, 1, np.random.default_rng(1))
        task = sample_cluster_task(np.random.default_rng(2), 5, 2, 3)
        empty = make_semi_split(task, 0, 0, 0, np.random.default_rng(3))
        semi, e_semi = inner_step_metal(theta, empty, bank, 0, 0.1, SMALL_CLS, Variant.M6, create_graph=False)
        sup, e_sup = inner_step_metal(theta, task, bank, 0, 0.1, SMALL_CLS, Variant.M4, create_graph=False)
        assert e_semi.inner_loss == e_sup.inner_loss and "query" not in e_semi.affine
        for k in theta:
            assert semi[k].data.tobytes() == sup[k].data.tobytes()

    def test_trace_records_both_sets(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        task = sample_sinusoid_task(np.random.default_rng(2), 5, 5).transductive()
        _, entry = inner_step_metal(theta, task, bank, 0, 0.1, SMALL, Variant.M6)
        assert set(entry.affine) == {"support", "query"}
        assert all(v.shape == (8,) for v in entry.affine.values())

    def test_non_finite_objective(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        bank.loss[0]["support"]["b2"] = Tensor(np.array([[np.inf]]), requires_grad=True)
        with pytest.raises(NumericError):
            inner_step_metal(theta, sample_sinusoid_task(np.random.default_rng(2), 5, 5), bank, 0, 0.1, SMALL,
                             Variant.M2)

    def test_maml_variant_rejected(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        with pytest.raises(ContractError):
            inner_step_metal(theta, sample_sinusoid_task(np.random.default_rng(2), 5, 5), bank, 0, 0.1, SMALL,
                             Variant.M1)


class TestRunInnerLoop:
    def test_single_step_equals_inner_step(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        task = sample_sinusoid_task(np.random.default_rng(2), 5, 5)
        a, _ = run_inner_loop(Variant.M3, task, theta, bank, 0.1, 1, SMALL)
        b, _ = inner_step_metal(theta, task, bank, 0, 0.1, SMALL, Variant.M3)
        for k in theta:
            assert a[k].data.tobytes() == b[k].data.tobytes()

    def test_trace_length(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 5, np.random.default_rng(1))
        _, trace = run_inner_loop(Variant.M6, sample_sinusoid_task(np.random.default_rng(2), 5, 5).transductive(),
                                  theta, bank, 0.1, 5, SMALL, task_id=7)
        assert [e.step for e in trace] == list(range(5)) and all(e.task_id == 7 for e in trace)

    def test_maml_matches_composed_steps_and_ignores_bank(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        task = sample_sinusoid_task(np.random.default_rng(2), 5, 5)
        a, _ = run_inner_loop(Variant.M1, task, theta, None, 0.1, 3, SMALL, create_graph=False)
        b = theta
        for j in range(3):
            b, _ = inner_step_maml(b, task, 0.1, SMALL, create_graph=False, step=j)
        c, _ = run_inner_loop(Variant.M1, task, theta, init_bank(SMALL.state_dim, 3, np.random.default_rng(9)), 0.1,
                              3, SMALL, create_graph=False)
        for k in theta:
            assert a[k].data.tobytes() == b[k].data.tobytes() == c[k].data.tobytes()

    def test_maml_query_loss_has_no_bank_gradient(self):
        theta = init_params(SMALL, np.random.default_rng(0))
        bank = init_bank(SMALL.state_dim, 1, np.random.default_rng(1))
        task = sample_sinusoid_task(np.random.default_rng(2), 5, 5)
        theta_j, _ = run_inner_loop(Variant.M1, task, theta, bank, 0.1, 1, SMALL)
        grads = ad.grad(query_loss(theta_j, task, SMALL), list(bank.named().values()))
        assert all(not g.data.any() for g in grads)

    def test_needs_a_step(self):
        with pytest.raises(ContractError):
            run_inner_loop(Variant.M1, one_point_task(), init_params(LINEAR, np.random.default_rng(0)), None, 0.1, 0,
                           LINEAR)

    def test_bank_required_for_learned_loss(self):
        with pytest.raises(ContractError):
            run_inner_loop(Variant.M2, one_point_task(), init_params(LINEAR, np.random.default_rng(0)), None, 0.1, 1,
                           LINEAR)


def _identity_pair(seed, spec, steps, create_graph):
    rng = np.random.default_rng(seed)
    theta = init_params(spec, rng)
    bank = init_bank(spec.state_dim, steps, rng)
    if spec.task_kind == "classification":
        task = sample_cluster_task(rng, 5, 2, 3)
    else:
        task = sample_sinusoid_task(rng, 5, 5)
    m2 = run_inner_loop(Variant.M2, task, theta, bank, 0.05, steps, spec, create_graph=create_graph)
    m4 = run_inner_loop(Variant.M4, task, theta, bank, 0.05, steps, spec, create_graph=create_graph)
    return theta, bank, task, m2, m4


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("spec", [SMALL, SMALL_CLS], ids=["regression", "classification"])
def test_identity_adapter_reproduces_fixed_loss_for_100_steps(seed, spec):
    _, _, _, (a, trace_a), (b, trace_b) = _identity_pair(seed, spec, 100, create_graph=False)
    assert [e.inner_loss for e in trace_a] == [e.inner_loss for e in trace_b]
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert all((e.affine["support"] == np.tile([1.0, 0.0], 4)).all() for e in trace_b)


@pytest.mark.parametrize("seed", [0, 1])
def test_identity_adapter_gives_identical_meta_gradients(seed):
    theta, bank, task, (a, _), (b, _) = _identity_pair(seed, SMALL, 3, create_graph=True)
    wrt = list(theta.values()) + [t for n, t in bank.named().items() if ".loss." in n]
    ga = ad.grad(query_loss(a, task, SMALL), wrt)
    gb = ad.grad(query_loss(b, task, SMALL), wrt)
    for x, y in zip(ga, gb):
        assert x.data.tobytes() == y.data.tobytes()


def test_maml_theta_independent_of_meta_parameters():
    theta = init_params(SMALL, np.random.default_rng(0))
    task = sample_sinusoid_task(np.random.default_rng(2), 5, 5)
    a, _ = run_inner_loop(Variant.M1, task, theta, init_bank(SMALL.state_dim, 2, np.random.default_rng(1)), 0.1, 2,
                          SMALL, create_graph=False)
    bank = init_bank(SMALL.state_dim, 2, np.random.default_rng(5), adapter_zero_output=False)
    b, _ = run_inner_loop(Variant.M1, task, theta, bank, 0.1, 2, SMALL, create_graph=False)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()


def test_zero_like_keeps_shapes():
    theta = init_params(SMALL, np.random.default_rng(0))
    z = zero_like(theta)
    assert all(z[k].shape == theta[k].shape and not z[k].data.any() for k in theta)
