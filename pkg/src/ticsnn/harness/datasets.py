"""Toy image datasets and IDX (MNIST-family) file support."""
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConsistencyError(ValueError):
    pass


@dataclass
class Dataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    classes: int
    image_shape: tuple
    value_range: tuple = (0.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for split, y in (("train", self.y_train), ("test", self.y_test)):
            if len(y) and (y.min() < 0 or y.max() >= self.classes):
                raise ValueError(f"{split} labels outside [0, {self.classes})")
        if len(self.X_train) != len(self.y_train) or len(self.X_test) != len(self.y_test):
            raise ConsistencyError("image and label counts differ")

    @property
    def n_features(self):
        return int(np.prod(self.image_shape))

    def subset(self, n_train=None, n_test=None):
        return Dataset(self.X_train[:n_train], self.y_train[:n_train],
                       self.X_test[:n_test], self.y_test[:n_test], self.classes,
                       self.image_shape, self.value_range, dict(self.provenance))

    def summary(self):
        return {
            "classes": self.classes,
            "image_shape": list(self.image_shape),
            "train": int(len(self.y_train)),
            "test": int(len(self.y_test)),
            "value_range": list(self.value_range),
            "train_class_counts": np.bincount(self.y_train, minlength=self.classes).tolist(),
            "provenance": self.provenance,
        }


GEOMETRIES = ("blobs", "stripes")


def _render_blobs(rng, labels, shape, separation, width, jitter, noise, contrast):
    c, h, w = shape
    n_classes = int(labels.max()) + 1 if labels.size else 0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    radius = separation * min(h, w) / 4.0
    angles = 2 * np.pi * np.arange(max(n_classes, 1)) / max(n_classes, 1)
    centers = np.stack([(h - 1) / 2 + radius * np.sin(angles),
                        (w - 1) / 2 + radius * np.cos(angles)], axis=1)
    n = labels.size
    pos = centers[labels] + jitter * rng.standard_normal((n, 2))
    amp = contrast * rng.uniform(0.6, 1.0, size=n)
    d2 = (yy[None] - pos[:, 0, None, None]) ** 2 + (xx[None] - pos[:, 1, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2 * width ** 2))
    img = np.repeat(img[:, None], c, axis=1)
    return img + noise * rng.standard_normal(img.shape)


def _render_stripes(rng, labels, shape, separation, width, jitter, noise, contrast):
    c, h, w = shape
    n_classes = int(labels.max()) + 1 if labels.size else 0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    theta = separation * np.pi * labels / max(n_classes, 1) + jitter * rng.standard_normal(labels.size)
    phase = rng.uniform(0, 2 * np.pi, size=labels.size)
    freq = 1.0 / (2.0 * width)
    proj = (xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None])
    img = 0.5 * contrast * (1 + np.sin(2 * np.pi * freq * proj + phase[:, None, None]))
    img = np.repeat(img[:, None], c, axis=1)
    return img + noise * rng.standard_normal(img.shape)


def synth_blobs(classes=2, train=512, test=256, image_shape=(1, 16, 16), geometry="blobs",
                separation=1.0, width=2.0, jitter=1.0, noise=0.1, background=0.0, contrast=1.0,
                seed=0, flatten=True):
    """Class-conditional synthetic images in ``[0, 1]``.

    ``blobs``: a Gaussian bump whose centre sits on a circle of radius
    ``separation * min(h, w) / 4`` at an angle set by the class.
    ``stripes``: a sinusoidal grating whose orientation is set by the class.
    ``jitter`` perturbs centre (pixels) or orientation (radians); ``noise``
    is additive pixel noise.  ``contrast`` scales the pattern, which is added
    to a constant ``background`` level before clipping.  Labels are balanced and the
    result is a deterministic function of the arguments.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if train < 1 or test < 1:
        raise ValueError("train and test sample counts must be >= 1")
    if geometry not in GEOMETRIES:
        raise ValueError(f"geometry must be one of {GEOMETRIES}, got {geometry!r}")
    if not separation > 0 or not width > 0 or jitter < 0 or noise < 0:
        raise ValueError("degenerate geometry: separation and width must be > 0, "
                         "jitter and noise >= 0")
    if not contrast > 0 or not 0 <= background < 1:
        raise ValueError("contrast must be > 0 and background in [0, 1)")
    shape = tuple(int(s) for s in image_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"image_shape must be (channels, height, width), got {image_shape}")
    rng = np.random.default_rng(seed)
    render = _render_blobs if geometry == "blobs" else _render_stripes

    def split(n):
        labels = np.arange(n) % classes
        rng.shuffle(labels)
        pattern = render(rng, labels, shape, separation, width, jitter, noise, contrast)
        images = np.clip(background + pattern, 0.0, 1.0)
        return (images.reshape(n, -1) if flatten else images), labels.astype(np.int64)

    X_train, y_train = split(int(train))
    X_test, y_test = split(int(test))
    provenance = {"source": "synthetic", "geometry": geometry, "separation": separation,
                  "width": width, "jitter": jitter, "noise": noise, "background": background,
                  "contrast": contrast, "seed": seed}
    return Dataset(X_train, y_train, X_test, y_test, classes, shape, (0.0, 1.0), provenance)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _read_header(raw, expected_magic, ndim, path):
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise IDXFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IDXFormatError(f"{path}: truncated dimension sizes", offset=len(raw))
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    expected = end + int(np.prod(dims))
    if len(raw) < expected:
        raise IDXFormatError(
            f"{path}: truncated payload, expected {expected} bytes, got {len(raw)}", offset=len(raw))
    return dims, end


def read_idx_images(path):
    with open(path, "rb") as f:
        raw = f.read()
    dims, start = _read_header(raw, IDX_IMAGE_MAGIC, 3, path)
    return np.frombuffer(raw, dtype=np.uint8, count=int(np.prod(dims)), offset=start).reshape(dims)


def read_idx_labels(path):
    with open(path, "rb") as f:
        raw = f.read()
    dims, start = _read_header(raw, IDX_LABEL_MAGIC, 1, path)
    return np.frombuffer(raw, dtype=np.uint8, count=dims[0], offset=start).copy()


def write_idx_images(path, images):
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise ValueError("IDX images must be a 3-D uint8 array")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape))
        f.write(np.ascontiguousarray(images).tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("IDX labels must be a 1-D array of byte values")
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


def to_uint8(images, value_range=(0.0, 1.0)):
    lo, hi = value_range
    scaled = np.round((np.asarray(images) - lo) / (hi - lo) * 255.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def load_idx(images_path, labels_path, test_images_path=None, test_labels_path=None,
             value_range=(0.0, 1.0), classes=None, flatten=True):
    """Read IDX image/label files; pixels are mapped linearly from 0..255 to ``value_range``.

    Without a separate test pair the same files populate the training split
    and the test split is empty.
    """
    lo, hi = value_range

    def pair(ip, lp):
        images, labels = read_idx_images(ip), read_idx_labels(lp)
        if images.shape[0] != labels.shape[0]:
            raise ConsistencyError(
                f"{ip} holds {images.shape[0]} images but {lp} holds {labels.shape[0]} labels")
        X = lo + images.astype(np.float64) / 255.0 * (hi - lo)
        X = X[:, None]
        return (X.reshape(len(X), -1) if flatten else X), labels.astype(np.int64), images.shape[1:]

    X_train, y_train, hw = pair(images_path, labels_path)
    if test_images_path is not None:
        X_test, y_test, hw_test = pair(test_images_path, test_labels_path)
        if hw_test != hw:
            raise ConsistencyError("train and test images differ in size")
    else:
        X_test, y_test = X_train[:0], y_train[:0]
    if classes is None:
        classes = int(max(y_train.max(initial=0), y_test.max(initial=0))) + 1
    provenance = {"source": "idx", "images": str(images_path), "labels": str(labels_path)}
    if test_images_path is not None:
        provenance.update(test_images=str(test_images_path), test_labels=str(test_labels_path))
    return Dataset(X_train, y_train, X_test, y_test, max(int(classes), 2), (1,) + tuple(hw),
                   (lo, hi), provenance)
