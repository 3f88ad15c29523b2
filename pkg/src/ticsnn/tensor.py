"""Dense float64 kernels with hand-written forward/backward pairs.

Every differentiable primitive the spiking network needs lives here as a
pair of plain functions over numpy arrays.  There is no autodiff tape:
callers keep whatever the backward pass needs (usually the forward input)
and hand it back explicitly.

Shapes follow the usual deep-learning conventions:

- affine:  input (batch, *features) -> (batch, out), weights (out, in)
- conv2d:  input (batch, cin, h, w), kernel (cout, cin, k, k)
"""
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_checked = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class StateError(RuntimeError):
    """An operation was called with missing or mismatched state."""


def set_checked(flag):
    """Toggle shape/finiteness validation globally; returns the previous value."""
    global _checked
    previous = _checked
    _checked = bool(flag)
    return previous


def is_checked():
    return _checked


def as_tensor(data, shape=None):
    """Convert ``data`` to a float64 array, validating finiteness in checked mode."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape entries must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(
                f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    if _checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def _flat_features(x):
    return x.reshape(x.shape[0], -1)


# ---------------------------------------------------------------------------
# affine
# ---------------------------------------------------------------------------

def affine_forward(x, weights, bias):
    """out[b, o] = bias[o] + sum_i weights[o, i] * x[b, i].

    Trailing input dimensions are flattened, so a conv feature map can feed
    an affine layer directly.
    """
    X = _flat_features(x)
    if _checked:
        if weights.ndim != 2 or bias.shape != (weights.shape[0],):
            raise DimensionError(
                f"weights {weights.shape} and bias {bias.shape} do not conform")
        if X.shape[1] != weights.shape[1]:
            raise DimensionError(
                f"input has {X.shape[1]} features, weights expect {weights.shape[1]}")
    return X @ weights.T + bias


def affine_backward(upstream, x, weights, per_sample=False):
    """Gradients of :func:`affine_forward`.

    Returns ``(grad_input, grad_weights, grad_bias)``.  With ``per_sample``
    the parameter gradients keep a leading batch axis instead of being
    summed over it.
    """
    if x is None or weights is None:
        raise StateError("affine_backward needs the cached forward input and weights")
    X = _flat_features(x)
    if _checked and upstream.shape != (X.shape[0], weights.shape[0]):
        raise DimensionError(
            f"upstream {upstream.shape} does not match forward output "
            f"{(X.shape[0], weights.shape[0])}")
    grad_input = (upstream @ weights).reshape(x.shape)
    if per_sample:
        grad_weights = upstream[:, :, None] * X[:, None, :]
        grad_bias = upstream.copy()
    else:
        grad_weights = upstream.T @ X
        grad_bias = upstream.sum(axis=0)
    return grad_input, grad_weights, grad_bias


# ---------------------------------------------------------------------------
# conv2d (cross-correlation, zero padding)
# ---------------------------------------------------------------------------

def conv2d_output_shape(h, w, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1


def _check_conv(x, kernel, bias, stride, padding):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    ho, wo = conv2d_output_shape(x.shape[2], x.shape[3], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError("kernel larger than padded input")


def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (b, cin, ho, wo, k, k)


def conv2d_forward(x, kernel, bias, stride=1, padding=0):
    if _checked:
        _check_conv(x, kernel, bias, stride, padding)
    k = kernel.shape[2]
    win = _windows(x, k, stride, padding)
    out = np.einsum("bchwij,ocij->bohw", win, kernel, optimize=True)
    return out + bias[None, :, None, None]


def conv2d_backward(upstream, x, kernel, stride=1, padding=0, per_sample=False):
    """Gradients of :func:`conv2d_forward` as ``(grad_input, grad_kernel, grad_bias)``."""
    if x is None or kernel is None:
        raise StateError("conv2d_backward needs the cached forward input and kernel")
    if _checked:
        _check_conv(x, kernel, None, stride, padding)
        ho, wo = conv2d_output_shape(x.shape[2], x.shape[3], kernel.shape[2], stride, padding)
        if upstream.shape != (x.shape[0], kernel.shape[0], ho, wo):
            raise DimensionError(
                f"upstream {upstream.shape} does not match forward output "
                f"{(x.shape[0], kernel.shape[0], ho, wo)}")
    k = kernel.shape[2]
    win = _windows(x, k, stride, padding)
    if per_sample:
        grad_kernel = np.einsum("bohw,bchwij->bocij", upstream, win, optimize=True)
        grad_bias = upstream.sum(axis=(2, 3))
    else:
        grad_kernel = np.einsum("bohw,bchwij->ocij", upstream, win, optimize=True)
        grad_bias = upstream.sum(axis=(0, 2, 3))

    b, _, h, w = x.shape
    ho, wo = upstream.shape[2], upstream.shape[3]
    grad_padded = np.zeros((b, x.shape[1], h + 2 * padding, w + 2 * padding), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("bohw,oc->bchw", upstream, kernel[:, :, i, j], optimize=True)
            grad_padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    grad_input = grad_padded[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits.

    The gradient is ``(softmax - onehot) / batch``.
    """
    n, c = logits.shape
    labels = check_labels(labels, c)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


# ---------------------------------------------------------------------------
# parameter containers and SGD
# ---------------------------------------------------------------------------

class ParameterVector:
    """Ordered named segments making up the trainable parameter vector.

    Segment names are ``"<layer>.weight"`` / ``"<layer>.bias"``; order is
    insertion order and therefore deterministic for a given network.
    """

    def __init__(self, segments=()):
        self._segments = OrderedDict()
        for name, value in (segments.items() if isinstance(segments, dict) else segments):
            self._segments[name] = np.asarray(value, dtype=DTYPE)

    def __getitem__(self, name):
        return self._segments[name]

    def __setitem__(self, name, value):
        self._segments[name] = np.asarray(value, dtype=DTYPE)

    def __contains__(self, name):
        return name in self._segments

    def __iter__(self):
        return iter(self._segments)

    def __len__(self):
        return len(self._segments)

    def items(self):
        return self._segments.items()

    def names(self):
        return list(self._segments)

    def layout(self):
        return [(name, value.shape) for name, value in self._segments.items()]

    @property
    def size(self):
        return sum(v.size for v in self._segments.values())

    def flatten(self):
        if not self._segments:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([v.ravel() for v in self._segments.values()])

    def unflatten(self, flat):
        """Return a new vector with this layout filled from ``flat``."""
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.ndim != 1 or flat.size != self.size:
            raise DimensionError(f"expected flat vector of length {self.size}, got {flat.shape}")
        out, offset = [], 0
        for name, value in self._segments.items():
            out.append((name, flat[offset:offset + value.size].reshape(value.shape).copy()))
            offset += value.size
        return ParameterVector(out)

    def squared_norm(self):
        return float(sum(np.sum(v * v) for v in self._segments.values()))

    def zeros_like(self):
        return ParameterVector((n, np.zeros_like(v)) for n, v in self._segments.items())

    def copy(self):
        return ParameterVector((n, v.copy()) for n, v in self._segments.items())

    def same_layout(self, other):
        return self.layout() == other.layout()

    def __eq__(self, other):
        if not isinstance(other, ParameterVector) or not self.same_layout(other):
            return False
        return all(np.array_equal(v, other[n]) for n, v in self._segments.items())

    def __repr__(self):
        inner = ", ".join(f"{n}{tuple(v.shape)}" for n, v in self._segments.items())
        return f"ParameterVector({inner})"


def is_bias(name):
    return name.endswith(".bias")


def sgd_step(params, grads, lr, weight_decay=0.0):
    """Plain SGD: ``w <- w - lr * (g + weight_decay * w)``; biases skip the decay."""
    if not params.same_layout(grads):
        raise StateError("parameter and gradient segmentations differ")
    out = []
    for name, w in params.items():
        g = grads[name]
        if weight_decay and not is_bias(name):
            g = g + weight_decay * w
        out.append((name, w - lr * g))
    return ParameterVector(out)
