"""Spatio-temporal backpropagation, losses and the SGD training loop."""
import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .lif import forward, surrogate_derivative
from .tensor import (
    DTYPE,
    ParameterVector,
    StateError,
    affine_backward,
    check_labels,
    conv2d_backward,
    sgd_step,
    softmax_cross_entropy,
)

logger = logging.getLogger(__name__)

LOSS_MODES = ("standard", "alpha-target")

# Large-scale presets for the three-level alpha study; loss scales on the
# toy tasks differ, so experiments carry their own tuned triples.
ALPHA_PRESETS = {
    "cifar10": (1e-3, 1e-2, 7e-2),
    "svhn": (1e-4, 1e-2, 7e-2),
    "cifar100": (1e-4, 1e-3, 1e-2),
}


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class LossConfig:
    mode: str = "standard"
    alpha: float = 0.0

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


@dataclass
class OptimizerConfig:
    lr: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 64
    momentum: float = 0.0
    clip_norm: float = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0 or self.momentum < 0:
            raise ValueError("weight_decay and momentum must be >= 0")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        self.batch_size = int(self.batch_size)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    seconds: float


@dataclass
class TrainReport:
    seed: int
    epochs: list = field(default_factory=list)

    @property
    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    @property
    def test_accuracies(self):
        return [e.test_accuracy for e in self.epochs]

    def rows(self):
        for e in self.epochs:
            yield {"epoch": e.epoch, "split": "train", "loss": e.train_loss,
                   "accuracy": e.train_accuracy, "seconds": e.seconds}
            yield {"epoch": e.epoch, "split": "test", "loss": e.test_loss,
                   "accuracy": e.test_accuracy, "seconds": e.seconds}

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "split", "loss", "accuracy", "seconds"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def __eq__(self, other):
        # wall time is excluded on purpose
        strip = lambda r: [(e.epoch, e.train_loss, e.train_accuracy, e.test_loss, e.test_accuracy)
                           for e in r.epochs]
        return isinstance(other, TrainReport) and self.seed == other.seed and strip(self) == strip(other)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _synapse_backward(layer, upstream, layer_input, params, per_sample):
    w = params[layer.name + ".weight"]
    if layer.kind == "affine":
        return affine_backward(upstream, layer_input, w, per_sample=per_sample)
    return conv2d_backward(upstream, layer_input, w, layer.stride, layer.padding,
                           per_sample=per_sample)


def stbp_backward(net, trace, readout_grads, per_sample=False, input_grad=False):
    """Backpropagate ``dL/dA_t`` through layers and time.

    ``readout_grads`` has shape ``(T, batch, classes)`` and holds the loss
    gradient w.r.t. each accumulated readout ``A_t``.  Spike derivatives use
    :func:`surrogate_derivative`; the temporal path through a hard reset
    carries the factor ``(1 - O_t)`` with the spike treated as constant.

    Returns a :class:`ParameterVector` of gradients (with a leading batch
    axis per segment when ``per_sample``), plus ``dL/dx`` summed over
    timesteps when ``input_grad`` is set.
    """
    readout_grads = np.asarray(readout_grads, dtype=DTYPE)
    T, batch = trace.timesteps, trace.batch_size
    if readout_grads.shape != (T, batch, net.n_classes):
        raise StateError(f"readout gradients {readout_grads.shape} do not match trace "
                         f"{(T, batch, net.n_classes)}")
    if len(trace.spikes) != len(net.layers):
        raise StateError("trace was produced by a different network")
    cfg = net.config
    decay, gain = 1.0 - 1.0 / cfg.tau, 1.0 / cfg.tau
    v_th, s = cfg.threshold, cfg.surrogate_scale
    L = len(net.layers)

    grads = {}
    for name, value in net.params.items():
        shape = ((batch,) if per_sample else ()) + value.shape
        grads[name] = np.zeros(shape, dtype=DTYPE)
    grad_x = np.zeros_like(trace.inputs[0]) if input_grad else None

    nonzero = np.flatnonzero(np.any(readout_grads != 0, axis=(1, 2)))
    if nonzero.size == 0:
        out = ParameterVector((n, grads[n]) for n in net.params.names())
        return (out, grad_x) if input_grad else out
    t_last = int(nonzero[-1])

    carry = [None] * L  # dL/dU_l^{t+1} * dU_l^{t+1}/dU_l^t
    tail = np.zeros((batch, net.n_classes), dtype=DTYPE)  # sum_{s>=t} dL/dA_s
    for ti in range(t_last, -1, -1):
        tail = tail + readout_grads[ti]
        upstream = tail.reshape((batch,) + tuple(net.layers[-1].out_shape))
        for l in range(L - 1, -1, -1):
            layer = net.layers[l]
            if layer.spiking:
                u = trace.membrane[l][ti]
                g_u = upstream * surrogate_derivative(u - v_th, s)
                if carry[l] is not None:
                    g_u = g_u + carry[l]
                if trace.smooth:
                    carry[l] = decay * g_u
                else:
                    carry[l] = decay * g_u * (1.0 - trace.spikes[l][ti])
                g_current = gain * g_u
            else:
                g_current = upstream
            g_in, g_w, g_b = _synapse_backward(
                layer, g_current, trace.layer_input(l, ti), net.params, per_sample)
            grads[layer.name + ".weight"] += g_w
            grads[layer.name + ".bias"] += g_b
            upstream = g_in
        if input_grad:
            grad_x += upstream.reshape(grad_x.shape)
    out = ParameterVector((n, grads[n]) for n in net.params.names())
    return (out, grad_x) if input_grad else out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_at(trace, labels, t):
    """Cross-entropy of ``softmax(A_t)`` and its logit gradient."""
    return softmax_cross_entropy(trace.readout[t - 1], labels)


def loss_standard(trace, labels):
    """Cross-entropy on the final accumulated readout ``A_T``.

    Returns ``(loss, readout_grads)`` with only the last timestep nonzero.
    """
    labels = check_labels(labels, trace.readout.shape[2])
    loss, g = loss_at(trace, labels, trace.timesteps)
    grads = np.zeros_like(trace.readout)
    grads[-1] = g
    return loss, grads


def loss_alpha(trace, labels, alpha):
    """Time-averaged alpha-target loss ``(1/T) sum_t |L_t - alpha|``.

    Each term contributes ``sign(L_t - alpha) * grad L_t / T`` with
    ``sign(0) = 0``, so timesteps whose loss dropped below ``alpha`` are
    pushed back up.  Returns ``(loss, readout_grads, per_timestep_losses)``.
    """
    if not alpha >= 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    T = trace.timesteps
    labels = check_labels(labels, trace.readout.shape[2])
    grads = np.zeros_like(trace.readout)
    per_t = np.empty(T)
    for ti in range(T):
        per_t[ti], g = loss_at(trace, labels, ti + 1)
        grads[ti] = np.sign(per_t[ti] - alpha) * g / T
    return float(np.mean(np.abs(per_t - alpha))), grads, per_t


def compute_loss(trace, labels, loss_cfg):
    """Objective, readout gradients and the raw loss to report."""
    if loss_cfg.mode == "standard":
        loss, grads = loss_standard(trace, labels)
        return loss, grads, loss
    loss, grads, per_t = loss_alpha(trace, labels, loss_cfg.alpha)
    return loss, grads, float(per_t.mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def clip_gradients(grads, max_norm):
    norm = np.sqrt(grads.squared_norm())
    if norm <= max_norm or norm == 0:
        return grads
    scale = max_norm / norm
    return ParameterVector((n, g * scale) for n, g in grads.items())


def _apply_mask(params, mask):
    if mask is None:
        return params
    out = params.copy()
    for name, keep in mask.items():
        out[name] = out[name] * keep
    return out


def train(net, dataset, epochs, optimizer=None, loss=None, seed=0, timesteps=None,
          mask=None, callbacks=(), eval_timesteps=None):
    """Train a copy of ``net`` with minibatch SGD and STBP.

    ``dataset`` needs ``X_train, y_train, X_test, y_test`` attributes.
    ``timesteps`` overrides the simulation length used for training;
    ``eval_timesteps`` the one used for test accuracy (defaults to the
    network's own).  ``mask`` maps weight names to 0/1 arrays: masked
    gradients are zeroed so pruned weights stay exactly zero.  Each callback
    is called as ``cb(epoch, net)`` once before training (epoch 0) and after
    every epoch.

    Returns ``(trained_net, TrainReport)``.
    """
    if int(epochs) < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    X, y = np.asarray(dataset.X_train, dtype=DTYPE), np.asarray(dataset.y_train)
    if len(y) == 0:
        raise ValueError("training set is empty")
    optimizer = optimizer or OptimizerConfig()
    loss_cfg = loss or LossConfig()
    rng = np.random.default_rng(seed)
    net = net.copy()
    if mask is not None:
        net.params = _apply_mask(net.params, mask)
    velocity = net.params.zeros_like() if optimizer.momentum else None
    report = TrainReport(seed=seed)
    for cb in callbacks:
        cb(0, net)

    n = len(y)
    bs = optimizer.batch_size
    for epoch in range(1, int(epochs) + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for bi, lo in enumerate(range(0, n, bs)):
            idx = order[lo:lo + bs]
            trace = forward(net, X[idx], timesteps)
            objective, readout_grads, raw = compute_loss(trace, y[idx], loss_cfg)
            if not np.isfinite(objective):
                raise TrainingDivergedError(epoch, bi, objective)
            grads = stbp_backward(net, trace, readout_grads)
            if mask is not None:
                grads = _apply_mask(grads, mask)
            if optimizer.clip_norm:
                grads = clip_gradients(grads, optimizer.clip_norm)
            if velocity is not None:
                velocity = ParameterVector(
                    (name, optimizer.momentum * v + grads[name]) for name, v in velocity.items())
                grads = velocity
            net.params = sgd_step(net.params, grads, optimizer.lr, optimizer.weight_decay)
            loss_sum += raw * len(idx)
            correct += int(np.sum(np.argmax(trace.readout[-1], axis=1) == y[idx]))
        test_loss, test_acc = evaluate(net, dataset.X_test, dataset.y_test, eval_timesteps)
        record = EpochRecord(epoch, loss_sum / n, correct / n, test_loss, test_acc,
                             time.perf_counter() - start)
        report.epochs.append(record)
        logger.debug("epoch %d loss %.4f test acc %.4f", epoch, record.train_loss, test_acc)
        for cb in callbacks:
            cb(epoch, net)
    return net, report


def evaluate(net, X, y, timesteps=None, batch_size=512):
    """Mean cross-entropy at the final timestep and accuracy on ``(X, y)``."""
    X, y = np.asarray(X, dtype=DTYPE), np.asarray(y)
    if len(y) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for lo in range(0, len(y), batch_size):
        logits = forward(net, X[lo:lo + batch_size], timesteps).readout[-1]
        yb = y[lo:lo + batch_size]
        total += softmax_cross_entropy(logits, yb)[0] * len(yb)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
    return total / len(y), correct / len(y)
