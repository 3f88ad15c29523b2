"""Accumulated Fisher information trace per timestep and its centroid.

For timestep ``t`` the readout is the accumulated logit vector ``A_t`` and
the model posterior is ``softmax(A_t)``.  The Fisher trace is

    I_t = (1/N) sum_n E_{y ~ p(y | x_n, t)} || grad_theta log p(y | x_n, t) ||^2

The inner expectation is either enumerated over all classes ("exact") or
replaced by ``draws`` categorical samples ("monte-carlo").  Gradients use
the same surrogate backward as training.
"""
import csv
from dataclasses import dataclass, field

import numpy as np

from .lif import forward, posterior
from .stbp import stbp_backward
from .tensor import DTYPE

ESTIMATORS = ("exact", "monte-carlo")
MAX_EXACT_CLASSES = 32
DEFAULT_SUBSET = 256


class UndefinedCentroidError(ValueError):
    """All Fisher traces are zero, so no centroid exists."""


@dataclass
class FisherProfile:
    traces: np.ndarray
    centroid: float
    num_samples: int
    estimator: str
    draws: int = 0
    seed: int = None
    std_errors: np.ndarray = None

    @property
    def timesteps(self):
        return len(self.traces)

    @property
    def peak_timestep(self):
        return int(np.argmax(self.traces)) + 1


@dataclass
class LayerFisherMap:
    layers: list
    values: np.ndarray  # (layers, T)
    normalized: bool = False

    def curve(self, layer):
        return self.values[self.layers.index(layer)]


def information_centroid(traces):
    """Fisher-weighted mean timestep ``sum_t t I_t / sum_t I_t`` (1-based)."""
    traces = np.asarray(traces, dtype=DTYPE)
    if traces.ndim != 1 or traces.size == 0:
        raise ValueError("traces must be a non-empty 1-D sequence")
    if np.any(traces < 0):
        raise ValueError("Fisher traces must be non-negative")
    total = traces.sum()
    if total <= 0:
        raise UndefinedCentroidError("centroid undefined: every trace is zero")
    return float(np.dot(np.arange(1, traces.size + 1), traces) / total)


def resolve_estimator(estimator, n_classes, draws=None):
    if estimator in (None, "auto"):
        return ("exact", 0) if n_classes <= MAX_EXACT_CLASSES else ("monte-carlo", draws or 1)
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS} or 'auto', got {estimator!r}")
    if estimator == "monte-carlo":
        draws = 1 if draws is None else int(draws)
        if draws < 1:
            raise ValueError("monte-carlo estimator needs draws >= 1")
        return estimator, draws
    return estimator, 0


def _layer_sq_norms(net, grads):
    """Per-sample squared gradient norm of each layer: shape (batch, layers)."""
    cols = []
    for layer in net.layers:
        total = 0.0
        for suffix in (".weight", ".bias"):
            g = grads[layer.name + suffix]
            total = total + np.sum(g.reshape(g.shape[0], -1) ** 2, axis=1)
        cols.append(total)
    return np.stack(cols, axis=1)


def _chunk_rows(net, budget=2 ** 22):
    return max(1, budget // max(1, net.params.size))


def _check_inputs(net, X, timesteps_list):
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim < 2 or X.shape[0] == 0:
        raise ValueError("Fisher estimation needs at least one sample")
    T = net.config.timesteps
    for t in timesteps_list:
        if not 1 <= t <= T:
            raise ValueError(f"timestep {t} outside [1, {T}]")
    return X


def layer_fisher_terms(net, X, timesteps_list=None, estimator="auto", draws=None, seed=0):
    """Core estimator: per-timestep, per-layer Fisher contributions.

    Returns ``(values, std_errors, estimator, draws)`` where ``values`` has
    shape ``(len(timesteps_list), layers)`` and ``std_errors`` (Monte Carlo
    only) has one entry per timestep.
    """
    T = net.config.timesteps
    ts = list(range(1, T + 1)) if timesteps_list is None else [int(t) for t in timesteps_list]
    X = _check_inputs(net, X, ts)
    C, L, N = net.n_classes, len(net.layers), X.shape[0]
    estimator, draws = resolve_estimator(estimator, C, draws)
    rng = np.random.default_rng(seed)
    values = np.zeros((len(ts), L))
    variance = np.zeros(len(ts))
    rows = _chunk_rows(net)
    eye = np.eye(C)

    # samples-per-chunk is chosen so the expanded MC batch stays within budget
    per_chunk = rows if estimator == "exact" else max(1, rows // draws)
    for lo in range(0, N, per_chunk):
        trace = forward(net, X[lo:lo + per_chunk])
        b = trace.batch_size
        for k, t in enumerate(ts):
            p = posterior(trace, t)
            if estimator == "exact":
                for c in range(C):
                    readout_grads = np.zeros_like(trace.readout)
                    readout_grads[t - 1] = p - eye[c]
                    sq = _layer_sq_norms(net, stbp_backward(net, trace, readout_grads, per_sample=True))
                    values[k] += np.einsum("n,nl->l", p[:, c], sq)
                continue
            # inverse-CDF categorical draws, one row per (sample, draw)
            u = rng.random((b, draws))
            labels = np.minimum((u[:, :, None] > np.cumsum(p, axis=1)[:, None, :]).sum(axis=2), C - 1)
            sample_idx = np.repeat(np.arange(b), draws)
            flat_labels = labels.ravel()
            per_row = np.zeros((b * draws, L))
            for r0 in range(0, b * draws, rows):
                sel = slice(r0, r0 + rows)
                sub = trace.take(sample_idx[sel])
                readout_grads = np.zeros_like(sub.readout)
                readout_grads[t - 1] = p[sample_idx[sel]] - eye[flat_labels[sel]]
                per_row[sel] = _layer_sq_norms(
                    net, stbp_backward(net, sub, readout_grads, per_sample=True))
            values[k] += per_row.sum(axis=0) / draws
            totals = per_row.sum(axis=1).reshape(b, draws)
            if draws > 1:
                variance[k] += np.sum(totals.var(axis=1, ddof=1)) / draws
    values /= N
    std_errors = np.sqrt(variance) / N if estimator == "monte-carlo" else None
    return values, std_errors, estimator, draws


def fisher_trace(net, X, t, estimator="auto", draws=None, seed=0):
    """Accumulated Fisher trace ``I_t`` over the samples ``X``."""
    values, _, _, _ = layer_fisher_terms(net, X, [t], estimator, draws, seed)
    return float(values[0].sum())


def _profile(values, std_errors, n, estimator, draws, seed):
    traces = values.sum(axis=1)
    try:
        centroid = information_centroid(traces)
    except UndefinedCentroidError:
        centroid = float("nan")
    return FisherProfile(traces, centroid, n, estimator, draws,
                         seed if estimator == "monte-carlo" else None, std_errors)


def fisher_profile(net, X, estimator="auto", draws=None, seed=0):
    """Fisher traces ``I_1..I_T`` and the information centroid.

    The centroid is NaN when every trace is zero.
    """
    values, se, estimator, draws = layer_fisher_terms(net, X, None, estimator, draws, seed)
    return _profile(values, se, len(X), estimator, draws, seed)


def _layer_map(net, values, normalize):
    per_layer = values.T.copy()
    if normalize:
        peak = per_layer.max(axis=1, keepdims=True)
        per_layer = np.divide(per_layer, peak, out=np.zeros_like(per_layer), where=peak > 0)
    return LayerFisherMap([layer.name for layer in net.layers], per_layer, bool(normalize))


def layerwise_fisher(net, X, estimator="auto", normalize=False, draws=None, seed=0):
    """Split each ``I_t`` by layer; optionally scale every layer curve to peak 1."""
    values, _, _, _ = layer_fisher_terms(net, X, None, estimator, draws, seed)
    return _layer_map(net, values, normalize)


def profile_and_layers(net, X, estimator="auto", draws=None, seed=0, normalize=False):
    """One pass producing both the profile and the layer map."""
    values, se, estimator, draws = layer_fisher_terms(net, X, None, estimator, draws, seed)
    return _profile(values, se, len(X), estimator, draws, seed), _layer_map(net, values, normalize)


def fisher_subset(X, size=DEFAULT_SUBSET):
    """The fixed evaluation subset: the first ``min(len(X), size)`` samples."""
    return np.asarray(X)[:min(len(X), size)]


@dataclass
class ICPoint:
    epoch: int
    centroid: float
    traces: np.ndarray
    layers: LayerFisherMap = None


@dataclass
class ICTracker:
    """Training callback recording ``(epoch, IC, I_1..I_T)`` every ``every`` epochs.

    Pass an instance in ``train(..., callbacks=[tracker])``.  Epoch 0 (the
    untrained network) is always recorded.
    """

    X: np.ndarray
    every: int = 1
    estimator: str = "auto"
    draws: int = None
    seed: int = 0
    layers: bool = False
    series: list = field(default_factory=list)
    profiles: list = field(default_factory=list)

    def __post_init__(self):
        if int(self.every) < 1:
            raise ValueError("every must be >= 1")

    def __call__(self, epoch, net):
        if epoch % self.every:
            return
        profile, layer_map = profile_and_layers(net, self.X, self.estimator, self.draws, self.seed)
        self.profiles.append(profile)
        self.series.append(ICPoint(epoch, profile.centroid, profile.traces,
                                   layer_map if self.layers else None))

    def at(self, epoch):
        for point in self.series:
            if point.epoch == epoch:
                return point
        raise KeyError(epoch)


def ic_vs_epoch(net, dataset, epochs, every=1, subset=DEFAULT_SUBSET, estimator="auto",
                draws=None, seed=0, **train_kwargs):
    """Train ``net`` while tracking the information centroid.

    The Fisher subset is the first ``subset`` held-out samples and stays
    fixed across epochs.  Returns ``(trained_net, report, tracker)``.
    """
    from .stbp import train

    tracker = ICTracker(fisher_subset(dataset.X_test, subset), every, estimator, draws, seed)
    trained, report = train(net, dataset, epochs, seed=seed,
                            callbacks=[tracker, *train_kwargs.pop("callbacks", ())], **train_kwargs)
    return trained, report, tracker


FISHER_COLUMNS = ["epoch", "t", "I_t", "IC", "estimator", "seed", "N"]
LAYER_COLUMNS = ["epoch", "layer", "t", "value", "normalized"]


def profile_rows(profile, epoch=0, seed=None):
    for t, value in enumerate(profile.traces, start=1):
        yield {"epoch": epoch, "t": t, "I_t": float(value), "IC": profile.centroid,
               "estimator": profile.estimator, "seed": seed if seed is not None else profile.seed,
               "N": profile.num_samples}


def layer_rows(layer_map, epoch=0):
    for name, curve in zip(layer_map.layers, layer_map.values):
        for t, value in enumerate(curve, start=1):
            yield {"epoch": epoch, "layer": name, "t": t, "value": float(value),
                   "normalized": int(layer_map.normalized)}


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
