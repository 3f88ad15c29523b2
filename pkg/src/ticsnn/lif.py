"""Discrete-time LIF network: dynamics, direct coding and forward traces.

Membrane update per layer and timestep (dt = 1)::

    U[t] = (1 - 1/tau) * U_reset[t-1] + (1/tau) * I[t]
    O[t] = U[t] >= v_th
    U_reset[t] = U[t] * (1 - O[t])

where ``I[t]`` is the synaptic current from the previous layer's spikes (or
the raw image for the first layer).  The readout layer either accumulates
its synaptic current without spiking or counts its own spikes.
"""
import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (
    DTYPE,
    DimensionError,
    ParameterVector,
    affine_forward,
    conv2d_forward,
    conv2d_output_shape,
    softmax,
)

READOUT_MODES = ("accumulate-current", "spike-count")

CHECKPOINT_FORMAT = "ticsnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    timesteps: int = 8
    tau: float = 2.0
    threshold: float = 1.0
    readout: str = "accumulate-current"
    surrogate_scale: float = 1.0

    def __post_init__(self):
        if int(self.timesteps) != self.timesteps or self.timesteps < 1:
            raise ValueError(f"timesteps must be a positive integer, got {self.timesteps}")
        self.timesteps = int(self.timesteps)
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")
        if self.readout not in READOUT_MODES:
            raise ValueError(f"readout must be one of {READOUT_MODES}, got {self.readout!r}")
        if not self.surrogate_scale > 0:
            raise ValueError("surrogate_scale must be > 0")


@dataclass
class Layer:
    """One synaptic stage.  ``spiking`` is False only for a current readout."""

    kind: str
    name: str
    in_shape: tuple
    out_shape: tuple
    spiking: bool = True
    stride: int = 1
    padding: int = 0

    def synapse(self, x, params):
        w, b = params[self.name + ".weight"], params[self.name + ".bias"]
        if self.kind == "affine":
            return affine_forward(x, w, b)
        return conv2d_forward(x, w, b, self.stride, self.padding)


class SpikingNetwork:
    """Layer stack plus neuron configuration and parameters.

    The last layer is the readout.  Its ``spiking`` flag follows
    ``config.readout``.
    """

    def __init__(self, layers, config, params):
        self.layers = list(layers)
        self.config = config
        self.params = params
        self._validate()

    def _validate(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if int(np.prod(prev.out_shape)) != int(np.prod(nxt.in_shape)):
                raise DimensionError(
                    f"layer {prev.name} output {prev.out_shape} does not feed "
                    f"{nxt.name} input {nxt.in_shape}")
            if nxt.kind == "conv" and tuple(prev.out_shape) != tuple(nxt.in_shape):
                raise DimensionError(f"conv layer {nxt.name} needs a spatial input")
        readout_spikes = self.config.readout == "spike-count"
        self.layers[-1].spiking = readout_spikes
        for layer in self.layers[:-1]:
            layer.spiking = True
        for layer in self.layers:
            for suffix in (".weight", ".bias"):
                if layer.name + suffix not in self.params:
                    raise ValueError(f"missing parameter {layer.name}{suffix}")

    @property
    def input_shape(self):
        return tuple(self.layers[0].in_shape)

    @property
    def n_classes(self):
        return int(np.prod(self.layers[-1].out_shape))

    def weight_names(self):
        return [layer.name + ".weight" for layer in self.layers]

    def copy(self):
        layers = [Layer(**asdict(layer)) for layer in self.layers]
        return SpikingNetwork(layers, NetworkConfig(**asdict(self.config)), self.params.copy())

    def with_config(self, **changes):
        """Copy sharing no state, with some config fields replaced."""
        net = self.copy()
        cfg = asdict(net.config)
        cfg.update(changes)
        net.config = NetworkConfig(**cfg)
        net._validate()
        return net

    def __eq__(self, other):
        return (isinstance(other, SpikingNetwork)
                and [asdict(a) for a in self.layers] == [asdict(b) for b in other.layers]
                and self.config == other.config
                and self.params == other.params)

    def __repr__(self):
        arch = " -> ".join(f"{l.kind}{l.out_shape}" for l in self.layers)
        return f"SpikingNetwork({arch}, {self.config})"


def build_network(input_shape, n_classes, hidden=(64,), config=None, rng=None,
                  init_gain=2.0):
    """Construct a network with uniform fan-in scaled initialization.

    ``hidden`` lists hidden layers: an int is an affine layer of that width,
    a dict ``{"kind": "conv", "channels": c, "kernel": k, "stride": s,
    "padding": p}`` is a convolution.  A readout affine layer with
    ``n_classes`` outputs is appended.  Weights are drawn from
    ``U(-a, a)`` with ``a = init_gain * sqrt(3 / fan_in)`` and biases start
    at zero.
    """
    config = config or NetworkConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    shape = tuple(int(s) for s in input_shape)
    specs = list(hidden) + [int(n_classes)]
    layers, segments = [], []
    for i, spec in enumerate(specs):
        name = f"layer{i}"
        if isinstance(spec, dict) and spec.get("kind", "affine") == "conv":
            if len(shape) != 3:
                raise DimensionError(f"conv layer needs (c, h, w) input, got {shape}")
            k = int(spec.get("kernel", 3))
            stride, padding = int(spec.get("stride", 1)), int(spec.get("padding", k // 2))
            cout = int(spec["channels"])
            ho, wo = conv2d_output_shape(shape[1], shape[2], k, stride, padding)
            w_shape, fan_in = (cout, shape[0], k, k), shape[0] * k * k
            out_shape = (cout, ho, wo)
            layer = Layer("conv", name, shape, out_shape, stride=stride, padding=padding)
        else:
            width = int(spec["units"]) if isinstance(spec, dict) else int(spec)
            fan_in = int(np.prod(shape))
            w_shape, out_shape = (width, fan_in), (width,)
            layer = Layer("affine", name, shape, out_shape)
        bound = init_gain * np.sqrt(3.0 / fan_in)
        segments.append((name + ".weight", rng.uniform(-bound, bound, size=w_shape)))
        segments.append((name + ".bias", np.zeros(out_shape[0], dtype=DTYPE)))
        layers.append(layer)
        shape = out_shape
    return SpikingNetwork(layers, config, ParameterVector(segments))


# ---------------------------------------------------------------------------
# neuron primitives
# ---------------------------------------------------------------------------

def lif_step(u_prev, current, tau, v_th):
    """One LIF update; returns ``(u_new, spikes, u_after_reset)``."""
    u_prev, current = np.asarray(u_prev, dtype=DTYPE), np.asarray(current, dtype=DTYPE)
    if u_prev.shape != current.shape:
        raise DimensionError(f"membrane {u_prev.shape} and current {current.shape} differ")
    u_new = (1.0 - 1.0 / tau) * u_prev + (1.0 / tau) * current
    spikes = (u_new >= v_th).astype(DTYPE)
    return u_new, spikes, u_new * (1.0 - spikes)


def surrogate_spike(x, scale=1.0):
    """Smooth spike ``(1/pi) arctan(pi * s * x) + 1/2`` used in smooth mode."""
    return np.arctan(np.pi * scale * np.asarray(x, dtype=DTYPE)) / np.pi + 0.5


def surrogate_derivative(x, scale=1.0):
    """Derivative of :func:`surrogate_spike`: ``s / (1 + (pi s x)^2)``."""
    x = np.asarray(x, dtype=DTYPE)
    return scale / (1.0 + (np.pi * scale * x) ** 2)


# ---------------------------------------------------------------------------
# forward simulation
# ---------------------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per-timestep caches of one forward simulation.

    Arrays are indexed ``[t - 1]`` for timestep ``t``.  ``membrane[l]`` holds
    pre-reset potentials, ``membrane_reset[l]`` the post-reset ones and
    ``spikes[l]`` the layer outputs; all three are ``None`` for a
    non-spiking readout.  ``readout`` holds the accumulated logits
    ``A_1..A_T`` with shape ``(T, batch, classes)``.
    """

    inputs: list
    membrane: list
    membrane_reset: list
    spikes: list
    readout: np.ndarray
    smooth: bool = False
    config: NetworkConfig = field(default=None)

    @property
    def timesteps(self):
        return self.readout.shape[0]

    @property
    def batch_size(self):
        return self.readout.shape[1]

    def layer_input(self, l, t_index):
        return self.inputs[t_index] if l == 0 else self.spikes[l - 1][t_index]

    def take(self, index):
        """Trace restricted (or repeated) along the batch axis."""
        pick = lambda arrs: [None if a is None else a[:, index] for a in arrs]
        return ForwardTrace(
            [x[index] for x in self.inputs], pick(self.membrane), pick(self.membrane_reset),
            pick(self.spikes), self.readout[:, index], self.smooth, self.config)


def forward(net, x, timesteps=None, inject=None, smooth=False):
    """Simulate ``net`` on a batch for ``timesteps`` steps with direct coding.

    ``inject(t, x)`` (1-based ``t``) may return a replacement input current
    for timestep ``t``; by default the same image is presented every step.
    ``smooth`` swaps the hard threshold for :func:`surrogate_spike` and
    disables reset, which makes the forward pass differentiable.
    """
    cfg = net.config
    T = cfg.timesteps if timesteps is None else int(timesteps)
    if T < 1:
        raise ValueError("timesteps must be >= 1")
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim < 2 or int(np.prod(x.shape[1:])) != int(np.prod(net.input_shape)):
        raise DimensionError(f"input {x.shape} does not match network input {net.input_shape}")
    if net.layers[0].kind == "conv":
        x = x.reshape((x.shape[0],) + net.input_shape)
    batch = x.shape[0]
    decay, gain = 1.0 - 1.0 / cfg.tau, 1.0 / cfg.tau
    v_th, s = cfg.threshold, cfg.surrogate_scale

    L = len(net.layers)
    membrane = [None] * L
    membrane_reset = [None] * L
    spikes = [None] * L
    for l, layer in enumerate(net.layers):
        if layer.spiking:
            shape = (T, batch) + tuple(layer.out_shape)
            membrane[l] = np.empty(shape, dtype=DTYPE)
            membrane_reset[l] = np.empty(shape, dtype=DTYPE)
            spikes[l] = np.empty(shape, dtype=DTYPE)
    readout = np.empty((T, batch, net.n_classes), dtype=DTYPE)
    inputs = []

    state = [np.zeros((batch,) + tuple(layer.out_shape), dtype=DTYPE) for layer in net.layers]
    acc = np.zeros((batch, net.n_classes), dtype=DTYPE)
    for ti in range(T):
        current_in = x if inject is None else np.asarray(inject(ti + 1, x), dtype=DTYPE)
        if current_in.shape != x.shape:
            raise DimensionError(f"injected input {current_in.shape} != {x.shape}")
        inputs.append(current_in)
        h = current_in
        for l, layer in enumerate(net.layers):
            current = layer.synapse(h, net.params)
            if not layer.spiking:
                acc = acc + current.reshape(batch, -1)
                break
            u = decay * state[l] + gain * current
            if smooth:
                o = surrogate_spike(u - v_th, s)
                u_after = u
            else:
                o = (u >= v_th).astype(DTYPE)
                u_after = u * (1.0 - o)
            membrane[l][ti], spikes[l][ti], membrane_reset[l][ti] = u, o, u_after
            state[l] = u_after
            h = o
        else:
            acc = acc + h.reshape(batch, -1)
        readout[ti] = acc
    return ForwardTrace(inputs, membrane, membrane_reset, spikes, readout, smooth, cfg)


def posterior(trace, t):
    """Class probabilities ``softmax(A_t)`` for 1-based timestep ``t``."""
    if not 1 <= t <= trace.timesteps:
        raise ValueError(f"timestep {t} outside [1, {trace.timesteps}]")
    return softmax(trace.readout[t - 1])


def predict_logits(net, x, timesteps=None):
    return forward(net, x, timesteps).readout[-1]


def accuracy(net, x, y, timesteps=None, batch_size=512):
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    correct = 0
    for start in range(0, len(y), batch_size):
        logits = predict_logits(net, x[start:start + batch_size], timesteps)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / len(y)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _encode(arr):
    return {
        "shape": list(arr.shape),
        "dtype": "<f8",
        "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
    }


def _decode(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj.get("dtype", "<f8")).astype(DTYPE).reshape(obj["shape"])


def network_to_dict(net):
    """JSON-serializable checkpoint (parameters stored as base64 little-endian float64)."""
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "layers": [
            {**asdict(layer), "in_shape": list(layer.in_shape), "out_shape": list(layer.out_shape)}
            for layer in net.layers
        ],
        "params": [{"name": n, **_encode(v)} for n, v in net.params.items()],
    }


def network_from_dict(obj):
    if obj.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} document")
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')}")
    layers = []
    for spec in obj["layers"]:
        spec = dict(spec)
        spec["in_shape"], spec["out_shape"] = tuple(spec["in_shape"]), tuple(spec["out_shape"])
        layers.append(Layer(**spec))
    params = ParameterVector((p["name"], _decode(p)) for p in obj["params"])
    return SpikingNetwork(layers, NetworkConfig(**obj["config"]), params)


def save_network(net, path):
    with open(path, "w") as f:
        json.dump(network_to_dict(net), f, indent=1)


def load_network(path):
    with open(path) as f:
        return network_from_dict(json.load(f))
