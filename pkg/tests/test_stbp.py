import numpy as np
import pytest

from ticsnn.harness.datasets import synth_blobs
from ticsnn.lif import NetworkConfig, build_network, forward, surrogate_derivative
from ticsnn.stbp import (
    EpochRecord,
    LossConfig,
    OptimizerConfig,
    TrainingDivergedError,
    TrainReport,
    clip_gradients,
    compute_loss,
    evaluate,
    loss_alpha,
    loss_standard,
    stbp_backward,
    train,
)
from ticsnn.tensor import StateError, softmax_cross_entropy


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def fd_check(net, x, T, h=1e-6, input_h=1e-4):
    """Compare STBP against central differences of a random linear readout functional."""
    rng = np.random.default_rng(11)
    coef = rng.normal(size=(T, x.shape[0], net.n_classes))

    def objective():
        return float(np.sum(coef * forward(net, x, smooth=True).readout))

    trace = forward(net, x, smooth=True)
    grads, gx = stbp_backward(net, trace, coef, input_grad=True)
    worst = 0.0
    for name, value in net.params.items():
        num = np.zeros_like(value)
        flat, nflat = value.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = objective()
            flat[i] = old - h
            fm = objective()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        worst = max(worst, rel_err(grads[name], num))
    num_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + input_h
        fp = objective()
        x[idx] = old - input_h
        fm = objective()
        x[idx] = old
        num_x[idx] = (fp - fm) / (2 * input_h)
    return worst, rel_err(gx, num_x)


@pytest.mark.parametrize("tau", [0.75, 2.0, 4.0])
def test_smooth_mode_matches_fd_mlp(tau):
    net = build_network((4,), 3, [5], NetworkConfig(timesteps=3, tau=tau), np.random.default_rng(0))
    x = np.random.default_rng(1).uniform(size=(2, 4))
    params_err, input_err = fd_check(net, x, 3)
    assert params_err < 1e-4 and input_err < 1e-4


@pytest.mark.parametrize("tau", [0.75, 2.0, 4.0])
def test_smooth_mode_matches_fd_conv(tau):
    hidden = [{"kind": "conv", "channels": 2, "kernel": 3, "stride": 1, "padding": 1},
              {"kind": "conv", "channels": 2, "kernel": 3, "stride": 2, "padding": 1}]
    net = build_network((1, 4, 4), 2, hidden, NetworkConfig(timesteps=3, tau=tau),
                        np.random.default_rng(2))
    x = np.random.default_rng(3).uniform(size=(2, 1, 4, 4))
    params_err, input_err = fd_check(net, x, 3)
    assert params_err < 1e-4 and input_err < 1e-4


def test_smooth_mode_matches_fd_spike_count_readout():
    net = build_network((3,), 2, [4], NetworkConfig(timesteps=3, readout="spike-count"),
                        np.random.default_rng(4))
    x = np.random.default_rng(5).uniform(size=(2, 3))
    params_err, input_err = fd_check(net, x, 3)
    assert params_err < 1e-4 and input_err < 1e-4


def test_zero_upstream_gives_zero_gradients():
    net = build_network((4,), 3, [5], NetworkConfig(timesteps=3), np.random.default_rng(0))
    trace = forward(net, np.ones((2, 4)))
    grads = stbp_backward(net, trace, np.zeros((3, 2, 3)))
    assert grads.squared_norm() == 0.0


def test_single_step_reduces_to_feedforward_backprop():
    net = build_network((4,), 3, [5], NetworkConfig(timesteps=1, tau=2.0), np.random.default_rng(6), 3.0)
    x = np.random.default_rng(7).uniform(size=(3, 4))
    labels = np.array([0, 2, 1])
    trace = forward(net, x)
    _, g = loss_standard(trace, labels)
    grads = stbp_backward(net, trace, g)

    W0, b0 = net.params["layer0.weight"], net.params["layer0.bias"]
    W1 = net.params["layer1.weight"]
    u = 0.5 * (x @ W0.T + b0)
    o = (u >= 1.0).astype(float)
    logits = o @ W1.T + net.params["layer1.bias"]
    _, dz = softmax_cross_entropy(logits, labels)
    du = (dz @ W1) * surrogate_derivative(u - 1.0)
    np.testing.assert_allclose(grads["layer1.weight"], dz.T @ o, atol=1e-14)
    np.testing.assert_allclose(grads["layer1.bias"], dz.sum(0), atol=1e-14)
    np.testing.assert_allclose(grads["layer0.weight"], 0.5 * du.T @ x, atol=1e-14)
    np.testing.assert_allclose(grads["layer0.bias"], 0.5 * du.sum(0), atol=1e-14)


def test_batch_gradient_equals_sum_of_per_sample():
    net = build_network((5,), 3, [6], NetworkConfig(timesteps=4), np.random.default_rng(8), 3.0)
    x = np.random.default_rng(9).uniform(size=(4, 5))
    trace = forward(net, x)
    _, g, _ = loss_alpha(trace, np.array([0, 1, 2, 0]), 0.1)
    batch = stbp_backward(net, trace, g)
    per = stbp_backward(net, trace, g, per_sample=True)
    for name, v in batch.items():
        np.testing.assert_allclose(per[name].sum(axis=0), v, atol=1e-12)


def test_trace_mismatch_is_state_error():
    net = build_network((4,), 3, [5], NetworkConfig(timesteps=3), np.random.default_rng(0))
    trace = forward(net, np.ones((2, 4)))
    with pytest.raises(StateError):
        stbp_backward(net, trace, np.zeros((2, 2, 3)))


# -------------------------------------------------------------------- losses

def _trace_with_readout(readout):
    net = build_network((2,), readout.shape[2], [3], NetworkConfig(timesteps=readout.shape[0]))
    trace = forward(net, np.zeros((readout.shape[1], 2)))
    trace.readout = np.asarray(readout, dtype=float)
    return trace


def test_loss_standard_examples():
    trace = _trace_with_readout(np.zeros((2, 1, 4)))
    loss, grads = loss_standard(trace, np.array([1]))
    assert loss == pytest.approx(np.log(4), abs=1e-15)
    assert not np.any(grads[0]) and np.any(grads[1])
    trace = _trace_with_readout(np.array([[[0.0, 0.0]], [[50.0, -50.0]]]))
    assert loss_standard(trace, np.array([0]))[0] < 1e-40
    with pytest.raises(ValueError):
        loss_standard(trace, np.array([2]))


def _readout_for_losses(losses):
    """Two-class logits whose CE for label 0 equals each entry of ``losses``."""
    margins = np.log(1 / (np.exp(np.asarray(losses)) - 1))
    return np.stack([np.array([[m, 0.0]]) for m in margins])


def test_loss_alpha_hand_value():
    trace = _trace_with_readout(_readout_for_losses([0.05, 0.03]))
    loss, _, per_t = loss_alpha(trace, np.array([0]), 0.01)
    np.testing.assert_allclose(per_t, [0.05, 0.03], atol=1e-14)
    assert loss == pytest.approx(0.03, abs=1e-14)


def test_loss_alpha_flips_sign_below_target():
    trace = _trace_with_readout(_readout_for_losses([0.05, 0.03]))
    _, g_low, _ = loss_alpha(trace, np.array([0]), 0.0)
    _, g_high, _ = loss_alpha(trace, np.array([0]), 1.0)
    np.testing.assert_array_equal(g_high, -g_low)
    _, _, per_t = loss_alpha(trace, np.array([0]), 0.0)
    _, g_tie, _ = loss_alpha(trace, np.array([0]), per_t[0])
    assert not np.any(g_tie[0]) and np.any(g_tie[1])  # sign(0) = 0


def test_loss_alpha_zero_is_mean_ce_and_matches_standard_at_T():
    rng = np.random.default_rng(10)
    trace = _trace_with_readout(rng.normal(size=(3, 4, 3)))
    y = np.array([0, 1, 2, 1])
    loss, g, per_t = loss_alpha(trace, y, 0.0)
    ces = [softmax_cross_entropy(trace.readout[t], y) for t in range(3)]
    assert loss == pytest.approx(np.mean([c[0] for c in ces]), abs=1e-14)
    for t in range(3):
        np.testing.assert_allclose(g[t], ces[t][1] / 3, atol=1e-15)
    _, g_std = loss_standard(trace, y)
    np.testing.assert_allclose(g[-1], g_std[-1] / 3, atol=1e-15)
    assert loss_standard(trace, y)[0] == pytest.approx(per_t[-1], abs=1e-15)


def test_compute_loss_reports_raw_loss():
    rng = np.random.default_rng(12)
    trace = _trace_with_readout(rng.normal(size=(3, 4, 3)))
    y = np.array([0, 1, 2, 1])
    objective, _, raw = compute_loss(trace, y, LossConfig("alpha-target", 10.0))
    assert raw < objective
    with pytest.raises(ValueError):
        LossConfig("alpha-target", -1.0)
    with pytest.raises(ValueError):
        LossConfig("hinge")


# ------------------------------------------------------------------ training

@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(classes=2, train=256, test=128, seed=3)


def test_training_reaches_accuracy_floor(blobs):
    net = build_network((256,), 2, [16], NetworkConfig(timesteps=4), np.random.default_rng(0))
    _, report = train(net, blobs, 50, OptimizerConfig(lr=0.1), seed=0)
    assert max(report.test_accuracies) >= 0.95


def test_training_is_deterministic_and_leaves_input_untouched(blobs):
    net = build_network((256,), 2, [8], NetworkConfig(timesteps=3), np.random.default_rng(1))
    before = net.params.copy()
    a_net, a = train(net, blobs, 3, OptimizerConfig(lr=0.1), seed=5)
    b_net, b = train(net, blobs, 3, OptimizerConfig(lr=0.1), seed=5)
    assert a == b and a_net.params == b_net.params
    assert net.params == before
    _, c = train(net, blobs, 3, OptimizerConfig(lr=0.1), seed=6)
    assert c != a


def test_training_loss_decreases_when_smoothed(blobs):
    """Five-epoch moving average of the training loss falls over 30 epochs."""
    for seed in range(3):
        net = build_network((256,), 2, [16], NetworkConfig(timesteps=4), np.random.default_rng(seed))
        _, report = train(net, blobs, 30, OptimizerConfig(lr=0.1), seed=seed)
        smooth = np.convolve(report.train_losses, np.ones(5) / 5, mode="valid")
        assert smooth[-1] < smooth[0]


def test_zero_epochs_rejected(blobs):
    net = build_network((256,), 2, [4])
    with pytest.raises(ValueError):
        train(net, blobs, 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_batch_and_loss(blobs):
    net = build_network((256,), 2, [4])
    net.params["layer1.bias"] = np.array([np.inf, 0.0])
    with pytest.raises(TrainingDivergedError) as info:
        train(net, blobs, 2, seed=0)
    assert info.value.epoch == 1 and info.value.batch == 0 and not np.isfinite(info.value.loss)


def test_momentum_and_clipping_paths(blobs):
    net = build_network((256,), 2, [8], NetworkConfig(timesteps=2), np.random.default_rng(2))
    _, report = train(net, blobs, 2, OptimizerConfig(lr=0.05, momentum=0.9, clip_norm=1.0), seed=0)
    assert all(np.isfinite(report.train_losses))
    net_g = net.params.copy()
    clipped = clip_gradients(net_g, 1e-3)
    assert np.sqrt(clipped.squared_norm()) == pytest.approx(1e-3, rel=1e-12)


def test_evaluate_and_report_csv(blobs, tmp_path):
    net = build_network((256,), 2, [8], NetworkConfig(timesteps=2), np.random.default_rng(3))
    loss, acc = evaluate(net, blobs.X_test, blobs.y_test)
    assert np.isfinite(loss) and 0 <= acc <= 1
    report = TrainReport(seed=1, epochs=[EpochRecord(1, 0.5, 0.75, 0.25, 1.0, 0.125)])
    report.to_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy,seconds"
    assert lines[1:] == ["1,train,0.5,0.75,0.125", "1,test,0.25,1.0,0.125"]
