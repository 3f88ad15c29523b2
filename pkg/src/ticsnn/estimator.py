"""scikit-learn compatible wrapper around a LIF network trained with STBP."""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fisher import fisher_profile
from .lif import NetworkConfig, build_network, forward
from .stbp import LossConfig, OptimizerConfig, train
from .tensor import softmax


class _Split:
    """Minimal dataset view consumed by ``train``."""

    def __init__(self, X, y):
        self.X_train, self.y_train = X, y
        self.X_test, self.y_test = X[:0], y[:0]


class SpikingClassifier(ClassifierMixin, BaseEstimator):
    """Multi-layer LIF classifier with direct input coding.

    ``image_shape`` reshapes flat feature rows for convolutional ``hidden``
    specs; leave it ``None`` for a pure MLP.  Class scores are the readout
    accumulated over ``timesteps`` steps.
    """

    def __init__(self, hidden=(64,), timesteps=8, tau=2.0, threshold=1.0,
                 readout="accumulate-current", surrogate_scale=1.0, init_gain=2.0,
                 lr=0.03, epochs=60, batch_size=64, weight_decay=0.0, momentum=0.0,
                 clip_norm=None, loss="standard", alpha=0.0, image_shape=None,
                 random_state=None):
        self.hidden = hidden
        self.timesteps = timesteps
        self.tau = tau
        self.threshold = threshold
        self.readout = readout
        self.surrogate_scale = surrogate_scale
        self.init_gain = init_gain
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.loss = loss
        self.alpha = alpha
        self.image_shape = image_shape
        self.random_state = random_state

    def _seed(self):
        if self.random_state is None:
            return 0
        if isinstance(self.random_state, np.random.RandomState):
            return int(self.random_state.randint(2 ** 31 - 1))
        return int(self.random_state)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        if self.image_shape is not None and int(np.prod(self.image_shape)) != X.shape[1]:
            raise ValueError(f"image_shape {self.image_shape} does not match "
                             f"{X.shape[1]} features")
        seed = self._seed()
        config = NetworkConfig(self.timesteps, self.tau, self.threshold, self.readout,
                               self.surrogate_scale)
        in_shape = tuple(self.image_shape) if self.image_shape is not None else (X.shape[1],)
        net = build_network(in_shape, len(self.classes_), list(self.hidden), config,
                            np.random.default_rng(seed), self.init_gain)
        optimizer = OptimizerConfig(self.lr, self.weight_decay, self.batch_size,
                                    self.momentum, self.clip_norm)
        loss = LossConfig(self.loss, self.alpha)
        self.net_, self.report_ = train(net, _Split(X, y_idx), self.epochs, optimizer, loss,
                                        seed=seed)
        return self

    def _logits(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.net_, X).readout[-1]

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        return softmax(self._logits(X))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def fisher_profile(self, X, estimator="auto", draws=None, seed=0):
        """Per-timestep Fisher trace of the fitted network on ``X``."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return fisher_profile(self.net_, X, estimator, draws, seed)
