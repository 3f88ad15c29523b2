"""Input corruptions, l-inf attacks, time-windowed deficits and the KL check."""
import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .lif import forward
from .stbp import loss_at, stbp_backward
from .tensor import DTYPE, DimensionError, log_softmax

ATTACKS = ("fgsm", "pgd")

# Attack strengths used for the reported tables.
FGSM_EPS = 8 / 255
PGD_EPS, PGD_STEP, PGD_ITERS = 8 / 255, 4 / 255, 10


@dataclass
class AttackParams:
    kind: str = "pgd"
    eps: float = PGD_EPS
    step_size: float = PGD_STEP
    iterations: int = PGD_ITERS
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"attack kind must be one of {ATTACKS}")
        if not self.eps > 0 or not self.step_size > 0:
            raise ValueError("eps and step_size must be > 0")
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if self.kind == "pgd" and self.step_size > self.eps:
            warnings.warn("PGD step_size exceeds eps; every step will be clipped", stacklevel=2)


@dataclass
class DeficitWindow:
    start: int
    length: int = 3
    noise_ratio: float = 0.5

    def validate(self, T):
        if self.length < 1:
            raise ValueError("deficit window must cover at least one timestep")
        if not 1 <= self.start or self.start + self.length - 1 > T:
            raise ValueError(f"window [{self.start}, {self.start + self.length - 1}] "
                             f"outside [1, {T}]")
        if not 0 <= self.noise_ratio <= 1:
            raise ValueError("noise_ratio must lie in [0, 1]")

    def covers(self, t):
        return self.start <= t < self.start + self.length


# ---------------------------------------------------------------------------
# natural corruptions
# ---------------------------------------------------------------------------

def gaussian_corrupt(x, ratio=0.5, rng=None, clamp=None):
    """Add Gaussian noise scaled so ``||noise||_2 = ratio * ||x||_2`` per sample."""
    if not ratio >= 0:
        raise ValueError("ratio must be >= 0")
    x = np.asarray(x, dtype=DTYPE)
    if ratio == 0:
        return x.copy() if clamp is None else np.clip(x, *clamp)
    rng = rng if rng is not None else np.random.default_rng(0)
    flat = x.reshape(len(x), -1)
    norms = np.linalg.norm(flat, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot scale noise to a zero-norm input")
    noise = rng.standard_normal(flat.shape)
    noise *= (ratio * norms / np.linalg.norm(noise, axis=1))[:, None]
    out = (flat + noise).reshape(x.shape)
    return out if clamp is None else np.clip(out, *clamp)


def _bilinear_upsample(img, out_h, out_w):
    """Half-pixel-centre bilinear resize (``align_corners=False``), edges clamped."""
    in_h, in_w = img.shape[-2:]

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(out_h, in_h)
    x0, x1, wx = axis(out_w, in_w)
    top = img[..., y0, :] * (1 - wy)[:, None] + img[..., y1, :] * wy[:, None]
    return top[..., x0] * (1 - wx) + top[..., x1] * wx


def blur_corrupt(x, factor=2, image_shape=None):
    """Average-pool by ``factor`` then bilinearly upsample back.

    Accepts ``(batch, c, h, w)`` or flat rows with ``image_shape`` given.
    """
    x = np.asarray(x, dtype=DTYPE)
    flat_in = x.ndim == 2
    if flat_in:
        if image_shape is None:
            raise DimensionError("flat input needs image_shape")
        x = x.reshape((len(x),) + tuple(image_shape))
    if x.ndim != 4:
        raise DimensionError(f"blur expects (batch, c, h, w), got {x.shape}")
    k = int(factor)
    b, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise DimensionError(f"image {h}x{w} not divisible by blur factor {k}")
    pooled = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    out = _bilinear_upsample(pooled, h, w)
    return out.reshape(len(out), -1) if flat_in else out


# ---------------------------------------------------------------------------
# adversarial attacks
# ---------------------------------------------------------------------------

def input_gradient(net, x, y, t=None):
    """Gradient of the cross-entropy at timestep ``t`` (default ``T``) w.r.t. ``x``."""
    trace = forward(net, x)
    t = trace.timesteps if t is None else t
    _, g = loss_at(trace, y, t)
    readout_grads = np.zeros_like(trace.readout)
    readout_grads[t - 1] = g
    _, grad_x = stbp_backward(net, trace, readout_grads, input_grad=True)
    return grad_x.reshape(np.shape(x))


def fgsm(net, x, y, eps=FGSM_EPS, clamp=(0.0, 1.0)):
    """One signed-gradient step of size ``eps`` followed by clamping."""
    if not eps > 0:
        raise ValueError("eps must be > 0")
    x = np.asarray(x, dtype=DTYPE)
    x_adv = x + eps * np.sign(input_gradient(net, x, y))
    return project_linf(x_adv, x, eps, clamp)


def project_linf(x_adv, x, eps, clamp=None):
    """Clip onto the ``eps`` ball around ``x`` (then the clamp range).

    ``x + eps`` can round one ulp past the ball, so such entries are
    nudged back until ``|out - x| <= eps`` holds in floating point.
    """
    out = np.clip(x_adv, x - eps, x + eps)
    for _ in range(4):
        over = np.abs(out - x) > eps
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over])
    return out if clamp is None else np.clip(out, *clamp)


def pgd(net, x, y, params=None):
    """Iterated signed-gradient ascent projected onto the ``eps`` ball around ``x``.

    Starts from ``x`` itself (no random start).
    """
    params = params or AttackParams()
    x = np.asarray(x, dtype=DTYPE)
    x_adv = x.copy()
    for _ in range(int(params.iterations)):
        step = params.step_size * np.sign(input_gradient(net, x_adv, y))
        x_adv = project_linf(x_adv + step, x, params.eps, params.clamp)
    return x_adv


def attack(net, x, y, params, batch_size=256):
    out = np.empty_like(np.asarray(x, dtype=DTYPE))
    for lo in range(0, len(y), batch_size):
        sl = slice(lo, lo + batch_size)
        if params.kind == "fgsm":
            out[sl] = fgsm(net, x[sl], y[sl], params.eps, params.clamp)
        else:
            out[sl] = pgd(net, x[sl], y[sl], params)
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _accuracy(net, X, y, inject=None, batch_size=512):
    correct = 0
    for lo in range(0, len(y), batch_size):
        sl = slice(lo, lo + batch_size)
        hook = None if inject is None else (lambda t, xb, sl=sl: inject(t, xb, sl))
        logits = forward(net, X[sl], inject=hook).readout[-1]
        correct += int(np.sum(np.argmax(logits, axis=1) == y[sl]))
    return correct / len(y)


def windowed_deficit_eval(net, X, y, window, seed=0, clamp=None):
    """Accuracy when the input inside ``window`` is a Gaussian-corrupted image.

    One corrupted copy per sample is drawn and shown for every timestep of
    the window; other timesteps see the clean image.
    """
    T = net.config.timesteps
    window.validate(T)
    X = np.asarray(X, dtype=DTYPE)
    noisy = gaussian_corrupt(X, window.noise_ratio, np.random.default_rng(seed), clamp)

    def inject(t, xb, sl):
        return noisy[sl].reshape(xb.shape) if window.covers(t) else xb

    return _accuracy(net, X, y, inject)


@dataclass
class DeficitResult:
    window_start: int
    accuracy: float
    relative_accuracy: float


def deficit_sweep(net, X, y, length=3, noise_ratio=0.5, seed=0, clamp=None):
    """Accuracy for every window position, relative to the last position."""
    T = net.config.timesteps
    if length > T:
        raise ValueError(f"window length {length} exceeds {T} timesteps")
    accs = [windowed_deficit_eval(net, X, y, DeficitWindow(s, length, noise_ratio), seed, clamp)
            for s in range(1, T - length + 2)]
    ref = accs[-1]
    return [DeficitResult(s, a, a - ref) for s, a in enumerate(accs, start=1)]


@dataclass
class RobustnessRow:
    method: str
    dataset: str
    corruption: str
    params: str
    clean: float
    corrupted: float

    @property
    def drop(self):
        return self.clean - self.corrupted


def corrupt(net, X, y, spec, image_shape=None, seed=0, clamp=(0.0, 1.0)):
    """Apply a corruption spec dict ``{"kind": ..., ...}`` to a batch."""
    kind = spec["kind"]
    if kind == "identity":
        return np.array(X, dtype=DTYPE)
    if kind == "gaussian":
        return gaussian_corrupt(X, spec.get("ratio", 0.5), np.random.default_rng(seed),
                                clamp if spec.get("clamp", False) else None)
    if kind == "blur":
        return blur_corrupt(X, spec.get("factor", 2), image_shape)
    if kind in ATTACKS:
        defaults = {"eps": FGSM_EPS} if kind == "fgsm" else {}
        params = AttackParams(kind=kind, clamp=tuple(spec.get("clamp", clamp)),
                              **{**defaults, **{k: v for k, v in spec.items()
                                                if k in ("eps", "step_size", "iterations")}})
        return attack(net, X, y, params)
    raise ValueError(f"unknown corruption {kind!r}")


def robust_accuracy(net, X, y, spec, method="model", dataset="data", image_shape=None,
                    seed=0, clamp=(0.0, 1.0), clean=None):
    """Clean vs corrupted accuracy on the same split."""
    X = np.asarray(X, dtype=DTYPE)
    clean = _accuracy(net, X, y) if clean is None else clean
    corrupted = _accuracy(net, corrupt(net, X, y, spec, image_shape, seed, clamp), y)
    params = ";".join(f"{k}={v}" for k, v in sorted(spec.items()) if k != "kind")
    return RobustnessRow(method, dataset, spec["kind"], params, clean, corrupted)


ROBUSTNESS_COLUMNS = ["model", "dataset", "corruption", "params", "clean_acc", "corrupted_acc", "drop"]
DEFICIT_COLUMNS = ["window_start", "acc", "rel_acc"]


def write_robustness_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ROBUSTNESS_COLUMNS)
        for r in rows:
            writer.writerow([r.method, r.dataset, r.corruption, r.params,
                             repr(r.clean), repr(r.corrupted), repr(r.drop)])


def write_deficit_csv(path, results):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DEFICIT_COLUMNS)
        for r in results:
            writer.writerow([r.window_start, repr(r.accuracy), repr(r.relative_accuracy)])


# ---------------------------------------------------------------------------
# KL vs. input-space Fisher quadratic form
# ---------------------------------------------------------------------------

def kl_quadratic_check(net, x, delta, t=None, smooth=True):
    """Exact ``KL(p(x) || p(x + delta))`` at timestep ``t`` and ``0.5 delta^T M_t delta``.

    ``M_t`` is the input-space Fisher ``E_{y ~ p(x)}[g_y g_y^T]`` with
    ``g_y = grad_x log p(y | x)``; only its quadratic form along ``delta``
    is evaluated.  ``x`` is a single sample (batch of one).
    """
    x = np.asarray(x, dtype=DTYPE)
    delta = np.asarray(delta, dtype=DTYPE).reshape(x.shape)
    if x.shape[0] != 1:
        raise DimensionError("kl_quadratic_check works on a single sample")
    trace = forward(net, x, smooth=smooth)
    t = trace.timesteps if t is None else t
    logp = log_softmax(trace.readout[t - 1])[0]
    logq = log_softmax(forward(net, x + delta, smooth=smooth).readout[t - 1])[0]
    p = np.exp(logp)
    kl = float(np.sum(p * (logp - logq)))

    quad = 0.0
    for c in range(net.n_classes):
        readout_grads = np.zeros_like(trace.readout)
        readout_grads[t - 1, 0] = np.eye(net.n_classes)[c] - p  # d log p_c / dA_t
        _, g = stbp_backward(net, trace, readout_grads, input_grad=True)
        quad += p[c] * float(np.sum(g.reshape(delta.shape) * delta)) ** 2
    return kl, 0.5 * quad
