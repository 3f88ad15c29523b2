import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import MinMaxScaler

from ticsnn import SpikingClassifier
from ticsnn.harness.datasets import synth_blobs


@pytest.fixture(scope="module")
def blobs():
    ds = synth_blobs(classes=2, train=128, test=64, image_shape=(1, 8, 8), seed=4)
    return ds.X_train, ds.y_train, ds.X_test, ds.y_test


def small(**kw):
    params = dict(hidden=(16,), timesteps=4, lr=0.1, epochs=15, random_state=0)
    params.update(kw)
    return SpikingClassifier(**params)


def test_params_roundtrip_and_clone():
    clf = small(tau=1.5)
    assert clf.get_params()["tau"] == 1.5
    twin = clone(clf)
    assert twin.get_params() == clf.get_params() and twin is not clf
    clf.set_params(timesteps=6)
    assert clf.timesteps == 6


def test_fit_predict_with_string_labels(blobs):
    X, y, Xt, yt = blobs
    names = np.array(["cat", "dog"])
    clf = small().fit(X, names[y])
    assert list(clf.classes_) == ["cat", "dog"] and clf.n_features_in_ == 64
    assert clf.score(Xt, names[yt]) >= 0.9
    proba = clf.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-12)
    np.testing.assert_array_equal(clf.classes_[proba.argmax(axis=1)], clf.predict(Xt))


def test_fit_is_deterministic(blobs):
    X, y, Xt, _ = blobs
    a, b = small().fit(X, y), small().fit(X, y)
    np.testing.assert_array_equal(a.decision_function(Xt), b.decision_function(Xt))


def test_pipeline_and_conv_shape(blobs):
    X, y, Xt, yt = blobs
    pipe = make_pipeline(MinMaxScaler(), small()).fit(X, y)
    assert pipe.score(Xt, yt) >= 0.9
    conv = small(hidden=({"kind": "conv", "channels": 2, "kernel": 3}, 8), image_shape=(1, 8, 8),
                 epochs=2).fit(X, y)
    assert conv.predict(Xt).shape == (len(Xt),)


def test_fisher_profile_on_fitted(blobs):
    X, y, Xt, _ = blobs
    profile = small(epochs=1).fit(X, y).fisher_profile(Xt[:8])
    assert profile.traces.shape == (4,) and 1 <= profile.centroid <= 4


def test_validation_errors(blobs):
    X, y, Xt, _ = blobs
    with pytest.raises(NotFittedError):
        small().predict(Xt)
    with pytest.raises(ValueError):
        small().fit(X, np.zeros_like(y))
    with pytest.raises(ValueError):
        small().fit(X[:10], y[:9])
    with pytest.raises(ValueError):
        small(image_shape=(1, 4, 4)).fit(X, y)
    clf = small(epochs=1).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(Xt[:, :10])
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        small().fit(bad, y)
