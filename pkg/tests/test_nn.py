import numpy as np
import pytest

from crsapprox.nn import (
    AdamState,
    ComputeLedger,
    DivergenceError,
    LayerSpec,
    StepContext,
    TrainConfig,
    adam_step,
    backward_fc,
    build_network,
    compute_reduction,
    forward_fc,
    meprop_backward_fc,
    mlp_specs,
    planned_ledger,
    softmax_cross_entropy,
    train,
)
from crsapprox.nn.layers import Dropout, MaxPool2
from crsapprox.sampling import Policy
from crsapprox.tensor import DomainError, MacCounter, counting_matmul, make_rng, spawn_rngs
from oracles import batch_sequence, finite_difference_check, reference_mlp_training, synthetic_splits


def small_fc_specs(fwd=None, bwd=None):
    return (
        LayerSpec("flatten"),
        LayerSpec("fc", (8, 6), fwd, bwd),
        LayerSpec("relu"),
        LayerSpec("fc", (6, 4), fwd, bwd),
    )


def small_conv_specs(fwd=None, bwd=None):
    return (
        LayerSpec("conv", (3, 3, 2, 4), None, bwd),
        LayerSpec("relu"),
        LayerSpec("conv", (3, 3, 4, 4), fwd, bwd, pad="valid"),
        LayerSpec("maxpool"),
        LayerSpec("flatten"),
        LayerSpec("fc", (16, 3), fwd, bwd),
    )


def frozen_network(specs, x, labels, seed=0):
    net = build_network(specs, make_rng(seed))
    ctx = StepContext(train=True, sampling_rng=make_rng(seed + 1), dropout_rng=make_rng(0))
    net.loss_and_grads(x, labels, ctx)
    net.freeze_plans()
    return net


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("fwd", [
    None, Policy("topk", ratio=0.5), Policy("nps", True, True, ratio=0.5),
    Policy("uniform", False, True, ratio=0.5),
])
def test_fc_gradients_match_finite_differences(fwd):
    rng = make_rng(1)
    x = rng.standard_normal((5, 8))
    labels = rng.integers(0, 4, 5)
    net = frozen_network(small_fc_specs(fwd), x, labels)
    errors = finite_difference_check(net, x, labels)
    assert max(errors.values()) <= 1e-4, errors


@pytest.mark.parametrize("fwd", [None, Policy("topk", ratio=0.5), Policy("nps", True, True, k=3)])
def test_conv_gradients_match_finite_differences(fwd):
    rng = make_rng(2)
    x = rng.standard_normal((2, 6, 6, 2))
    labels = rng.integers(0, 3, 2)
    net = frozen_network(small_conv_specs(fwd), x, labels)
    errors = finite_difference_check(net, x, labels)
    assert max(errors.values()) <= 1e-4, errors


def test_unsampled_features_get_zero_gradient():
    rng = make_rng(3)
    x = rng.standard_normal((4, 10))
    w = rng.standard_normal((10, 3))
    dy = rng.standard_normal((4, 3))
    _, plan = forward_fc(x, w, Policy("topk", ratio=0.4), make_rng(0))
    dx, dw = backward_fc(plan, x, w, dy)
    dropped = np.setdiff1d(np.arange(10), plan.indices)
    assert np.all(dw[dropped] == 0.0)
    assert np.all(dx[:, dropped] == 0.0)
    np.testing.assert_allclose(dw[plan.indices], x[:, plan.indices].T @ dy, rtol=1e-12)


def test_backward_sampling_with_full_floor_is_exact():
    rng = make_rng(4)
    x = rng.standard_normal((6, 5))
    w = rng.standard_normal((5, 7))
    dy = rng.standard_normal((6, 7))
    dx, dw = backward_fc(None, x, w, dy, Policy("topk", ratio=0.05, min_k=10), make_rng(0))
    np.testing.assert_allclose(dw, x.T @ dy, rtol=1e-12)
    np.testing.assert_allclose(dx, dy @ w.T, rtol=1e-12)


def test_meprop_keeps_largest_gradient_columns():
    rng = make_rng(5)
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 5))
    dy = rng.standard_normal((4, 5))
    dy[:, 2] *= 10.0
    dy[:, 4] *= 5.0
    dx, dw = meprop_backward_fc(x, w, dy, 2)
    keep = [2, 4]
    np.testing.assert_allclose(dw[:, keep], x.T @ dy[:, keep], rtol=1e-12)
    assert np.all(dw[:, [0, 1, 3]] == 0.0)
    np.testing.assert_allclose(dx, dy[:, keep] @ w[:, keep].T, rtol=1e-12)
    dx_full, dw_full = meprop_backward_fc(x, w, dy, 5)
    np.testing.assert_allclose(dw_full, x.T @ dy, rtol=1e-12)
    np.testing.assert_allclose(dx_full, dy @ w.T, rtol=1e-12)


def test_softmax_cross_entropy():
    loss, grad = softmax_cross_entropy(np.zeros((2, 10)), np.array([3, 7]))
    np.testing.assert_allclose(loss, np.log(10.0))
    expected = np.full((2, 10), 0.1)
    expected[0, 3] -= 1.0
    expected[1, 7] -= 1.0
    np.testing.assert_allclose(grad, expected / 2)
    # stable for large logits
    loss, _ = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
    assert np.isfinite(loss) and loss < 1e-12


def test_maxpool_routes_gradient_to_first_maximum():
    pool = MaxPool2("pool")
    x = np.array([[1.0, 3.0], [3.0, 2.0]]).reshape(1, 2, 2, 1)
    out = pool.forward(x, StepContext())
    assert out.item() == 3.0
    dx = pool.backward(np.ones((1, 1, 1, 1)), StepContext())
    np.testing.assert_array_equal(dx.reshape(2, 2), [[0.0, 1.0], [0.0, 0.0]])


def test_dropout_is_identity_at_eval_and_unbiased_in_training():
    drop = Dropout("d", 0.5)
    x = np.ones((200, 500))
    np.testing.assert_array_equal(drop.forward(x, StepContext()), x)
    out = drop.forward(x, StepContext(train=True, dropout_rng=make_rng(0)))
    assert set(np.unique(out)) == {0.0, 2.0}
    np.testing.assert_allclose(out.mean(), 1.0, atol=0.01)
    np.testing.assert_array_equal(drop.backward(x, StepContext()), out)


def test_adam_matches_hand_update():
    p = {"w": np.array([1.0, -2.0])}
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    state = AdamState()
    adam_step(p, {"w": g1}, state, lr=0.1)
    # first bias-corrected step moves by lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], rtol=1e-7)
    after_one = p["w"].copy()
    adam_step(p, {"w": g2}, state, lr=0.1)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(p["w"], after_one - step, rtol=1e-12)


# ---------------------------------------------------------------- MAC ledger

@pytest.mark.parametrize("specs_fn,shape", [
    (small_fc_specs, (8,)),
    (small_conv_specs, (6, 6, 2)),
])
@pytest.mark.parametrize("fwd,bwd", [
    (None, None),
    (Policy("topk", ratio=0.5), None),
    (Policy("nps", True, True, ratio=0.5), Policy("topk", ratio=0.3, min_k=2)),
])
def test_ledger_matches_counted_macs_and_plan(specs_fn, shape, fwd, bwd):
    specs = specs_fn(fwd, bwd)
    batch = 4
    rng = make_rng(6)
    x = rng.standard_normal((batch,) + shape)
    labels = rng.integers(0, 3, batch)
    net = build_network(specs, make_rng(0))
    counter = MacCounter()
    ledger = ComputeLedger()
    ctx = StepContext(train=True, sampling_rng=make_rng(1), dropout_rng=make_rng(2),
                      ledger=ledger, mm=counting_matmul(counter))
    net.loss_and_grads(x, labels, ctx)
    assert counter.macs == ledger.total_actual
    planned = planned_ledger(specs, batch, shape)
    assert ledger.rows() == planned.rows()
    # the first parametric layer never computes an input gradient
    first = next(name for name, _, _, _ in ledger.rows())
    assert (first, "bwd-data") not in ledger.macs_exact


def test_ledger_rules():
    ledger = ComputeLedger()
    with pytest.raises(DomainError):
        compute_reduction(ledger)
    with pytest.raises(DomainError):
        ledger.record("fc1", "fwd", 10, 11)
    with pytest.raises(DomainError):
        ledger.record("fc1", "sideways", 10, 1)
    ledger.record("fc1", "fwd", 100, 40)
    ledger.record("fc1", "bwd-weight", 100, 100)
    np.testing.assert_allclose(compute_reduction(ledger), 0.3)


def test_exact_planned_ledger_has_no_reduction():
    assert compute_reduction(planned_ledger(mlp_specs(), 50)) == 0.0
    assert compute_reduction(planned_ledger(mlp_specs(1.0, 1.0, min_k=1), 50)) == 0.0


# ---------------------------------------------------------------- training loop

def test_exact_training_matches_reference_trainer():
    data = synthetic_splits()
    specs = mlp_specs(hidden=32)
    config = TrainConfig(specs, iterations=30, batch_size=20, seed=3)
    init = build_network(specs, spawn_rngs(3, 4)[0]).parameters()
    batches = batch_sequence(3, len(data.train), 20, 30)
    ref_losses, ref_params = reference_mlp_training(init, data.train.images, data.train.labels,
                                                    batches)
    result = train(config, data)
    np.testing.assert_allclose(result.losses, ref_losses, rtol=1e-10, atol=1e-12)
    for name, value in ref_params.items():
        np.testing.assert_allclose(result.network.parameters()[name], value, rtol=1e-10,
                                   atol=1e-12)


def test_training_learns_and_is_deterministic():
    data = synthetic_splits()
    config = TrainConfig(mlp_specs(0.4, 0.05), epochs=3, batch_size=20, seed=1)
    a = train(config, data)
    b = train(config, data)
    assert a.losses == b.losses
    assert a.curves == b.curves
    assert a.final_test_accuracy > 0.9
    assert 0.0 < compute_reduction(a.ledger) < 1.0
    assert a.ledger.rows() == b.ledger.rows()
    assert len(a.curves) == 3


@pytest.mark.parametrize("selection,scaled", [("topk", False), ("nps", True), ("uniform", False)])
def test_full_ratio_sampling_reproduces_exact_training(selection, scaled):
    data = synthetic_splits()
    exact = train(TrainConfig(mlp_specs(hidden=16), iterations=15, batch_size=20, seed=2), data)
    specs = mlp_specs(1.0, 1.0, selection=selection, scaled=scaled, hidden=16)
    full = train(TrainConfig(specs, iterations=15, batch_size=20, seed=2), data)
    np.testing.assert_allclose(full.losses, exact.losses, rtol=1e-10)
    assert compute_reduction(full.ledger) == 0.0


def test_divergence_is_reported():
    data = synthetic_splits()
    specs = mlp_specs(hidden=8)
    net = build_network(specs, make_rng(0))
    net.parameters()["fc2.W"][0, 0] = np.nan
    with pytest.raises(DivergenceError):
        train(TrainConfig(specs, iterations=3, seed=0), data, network=net)


def test_config_validation():
    assert TrainConfig(mlp_specs()).epochs == 20
    with pytest.raises(ValueError):
        TrainConfig(mlp_specs(), epochs=2, iterations=3)
    with pytest.raises(ValueError):
        TrainConfig(mlp_specs(), lr=0.0)
    with pytest.raises(ValueError):
        LayerSpec("fc", (3,))
    with pytest.raises(ValueError):
        LayerSpec("relu", forward_policy=Policy(ratio=0.5))
    with pytest.raises(ValueError):
        LayerSpec("dropout", rate=1.0)
