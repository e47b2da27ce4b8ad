import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import gradient_check, random_net
from stablegates.rnn import Mode, NetworkParams, default_initial_state, simulate
from stablegates.training import (
    AdamState,
    BestTracker,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    bptt_gradients,
    fit_metric,
    mse_loss,
    sample_dropout_masks,
    train,
)


def make_batch(rng, net, n_seq=3, T=20):
    return [(rng.uniform(-1, 1, (T, net.n_u)), rng.uniform(-1, 1, (T, net.n_y))) for _ in range(n_seq)]


@pytest.mark.parametrize("mode", [Mode.CFN, Mode.DGN])
def test_gradients_match_finite_differences(rng, mode):
    net = random_net(rng, 2, (3, 3), 1, mode, scale=0.7)
    assert gradient_check(net, make_batch(rng, net), washout=5) < 1e-5


def test_gradients_with_dropout_masks(rng):
    net = random_net(rng, 2, (3, 2), 2, Mode.CFN, scale=0.7)
    batch = make_batch(rng, net, n_seq=2, T=15)
    masks = sample_dropout_masks(net, [15, 15], 0.3, rng)
    assert gradient_check(net, batch, washout=3, masks=masks) < 1e-5


def test_zero_loss_gives_zero_gradients(rng):
    net = random_net(rng, 2, (3,), 1, Mode.CFN, scale=0.5)
    u = rng.uniform(-1, 1, (12, 2))
    y = simulate(net, default_initial_state(net), u).y
    loss, grads = bptt_gradients(net, [(u, y)], washout=2)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.tensors())


def test_dgn_recurrent_gradients_are_exactly_zero(rng):
    net = random_net(rng, 2, (3, 3), 1, Mode.DGN)
    _, grads = bptt_gradients(net, make_batch(rng, net), washout=4)
    for p in grads.layers:
        assert not np.any(p.R_f) and not np.any(p.R_i)


def test_loss_examples():
    net = NetworkParams.zeros(1, (2,), 1)
    washout = 3
    u = np.zeros((washout + 4, 1))
    assert mse_loss(net, [(u, np.ones((washout + 4, 1)))], washout) == 1.0
    assert mse_loss(net, [(u, np.zeros((washout + 4, 1)))], washout) == 0.0


def test_loss_ignores_washout_targets(rng):
    net = random_net(rng, 2, (3,), 1)
    u, y = rng.uniform(-1, 1, (20, 2)), rng.uniform(-1, 1, (20, 1))
    y2 = y.copy()
    y2[:5] = 1e6
    assert mse_loss(net, [(u, y)], 5) == mse_loss(net, [(u, y2)], 5)
    assert bptt_gradients(net, [(u, y)], 5)[0] == pytest.approx(mse_loss(net, [(u, y)], 5), rel=1e-14)


def test_washout_must_leave_samples():
    net = NetworkParams.zeros(1, (2,), 1)
    with pytest.raises(ValueError):
        mse_loss(net, [(np.zeros((5, 1)), np.zeros((5, 1)))], 5)


def test_dropout_masks_scale_and_shape(rng):
    net = random_net(rng, 2, (3, 4), 1)
    masks = sample_dropout_masks(net, [10, 7], 0.25, rng)
    assert [m.shape for m in masks[0]] == [(10, 2), (10, 3)]
    assert [m.shape for m in masks[1]] == [(7, 2), (7, 3)]
    vals = np.unique(np.concatenate([m.ravel() for seq in masks for m in seq]))
    assert set(vals) <= {0.0, 1.0 / 0.75}


def test_adam_zero_gradient_leaves_params(rng):
    net = random_net(rng, 2, (3,), 1)
    state = AdamState.for_params(net)
    state.m[0][:] = 1.0
    zero = net.with_tensors([np.zeros_like(t) for t in net.tensors()])
    new, state = adam_step(state, zero, 1e-3, net)
    np.testing.assert_array_equal(new.tensors()[1], net.tensors()[1])
    assert np.all(state.m[0] == 0.9)


def test_adam_first_step_normalizes_gradient(rng):
    net = random_net(rng, 2, (3,), 1)
    grads = net.with_tensors([rng.standard_normal(t.shape) for t in net.tensors()])
    new, _ = adam_step(AdamState.for_params(net), grads, 1e-3, net)
    for w0, w1, g in zip(net.tensors(), new.tensors(), grads.tensors()):
        # bias correction gives m_hat = g and v_hat = g**2 on the first step
        np.testing.assert_allclose(w1 - w0, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-9, atol=1e-15)


def test_adam_keeps_dgn_recurrence_zero(rng):
    net = random_net(rng, 2, (3,), 1, Mode.DGN)
    grads = net.with_tensors([rng.standard_normal(t.shape) for t in net.tensors()][:3] + [np.zeros((3, 3))] * 2
                             + [rng.standard_normal(t.shape) for t in net.tensors()][5:])
    new, _ = adam_step(AdamState.for_params(net), grads, 1e-2, net)
    assert not np.any(new.layers[0].R_f) and not np.any(new.layers[0].R_i)


def test_learning_rate_schedule():
    c = TrainConfig()
    assert c.lr_at(0) == 0.001
    assert c.lr_at(199) == 0.001
    assert c.lr_at(200) == pytest.approx(0.0009, rel=1e-15)
    assert c.lr_at(400) == pytest.approx(0.00081, rel=1e-15)


def test_config_validation():
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"dropout_rate": 1.0}, {"base_lr": -1.0}, {"washout": -1},
                {"hidden_sizes": ()}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_best_tracker_ignores_later_spike(rng):
    nets = [random_net(rng, 1, (2,), 1) for _ in range(4)]
    t = BestTracker()
    for epoch, (v, n) in enumerate(zip([0.5, 0.2, 0.2, 9.0], nets)):
        t.update(epoch, v, n)
    assert t.best_epoch == 1 and t.best_params is nets[1]


def _toy_sets(rng, n=6, T=40):
    teacher = random_net(rng, 1, (3,), 1, Mode.DGN, scale=0.8)
    seqs = []
    for _ in range(n):
        u = rng.uniform(-1, 1, (T, 1))
        seqs.append((u, simulate(teacher, default_initial_state(teacher), u).y))
    return seqs[: n - 2], seqs[n - 2:]


def test_one_epoch_single_batch(rng):
    tr, va = _toy_sets(rng)
    net, rep = train(TrainConfig(hidden_sizes=(3,), epochs=1, batch_size=len(tr), washout=5), tr, va)
    assert rep.n_updates == 1
    assert len(rep.val_mse) == 1 and rep.best_epoch == 0


def test_training_reduces_loss_and_is_deterministic(rng):
    tr, va = _toy_sets(rng)
    cfg = TrainConfig(hidden_sizes=(4,), mode=Mode.CFN, epochs=40, base_lr=0.01, batch_size=2, washout=5, seed=3)
    a, rep = train(cfg, tr, va)
    b, _ = train(cfg, tr, va)
    assert rep.val_mse[rep.best_epoch] < rep.val_mse[0]
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x, y)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(rng):
    tr, va = _toy_sets(rng)
    start = random_net(rng, 1, (3,), 1, Mode.CFN)
    cfg = TrainConfig(hidden_sizes=(3,), mode=Mode.CFN, epochs=3, base_lr=1e300, washout=5)
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train(cfg, tr, va, init=start)


def test_fit_examples(rng):
    y = rng.standard_normal((50, 1))
    assert fit_metric(y, y) == 100.0
    assert fit_metric(y, np.full_like(y, y.mean())) == pytest.approx(0.0, abs=1e-12)


def test_fit_skip_improves_with_transient_errors(rng):
    y = np.sin(np.linspace(0, 20, 400))[:, None]
    y_hat = y + 0.01 * rng.standard_normal(y.shape)
    y_hat[:25] += 1.0
    assert fit_metric(y, y_hat, skip=25) > fit_metric(y, y_hat)


def test_fit_rejects_constant_target():
    with pytest.raises(ValueError):
        fit_metric(np.ones((10, 1)), np.zeros((10, 1)))


def test_fit_is_per_channel(rng):
    y = rng.standard_normal((30, 2))
    yp = y.copy()
    yp[:, 1] = y[:, 1].mean()
    np.testing.assert_allclose(fit_metric(y, yp), [100.0, 0.0], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.floats(0.1, 100), b=st.floats(-100, 100))
def test_fit_is_affine_invariant(seed, a, b):
    rng = np.random.default_rng(seed)
    y, yp = rng.standard_normal((40, 1)), rng.standard_normal((40, 1))
    assert fit_metric(a * y + b, a * yp + b) == pytest.approx(fit_metric(y, yp), rel=1e-9, abs=1e-9)
