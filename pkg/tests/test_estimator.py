import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from slimssl import SlimmableSSL, synthetic_blobs


@pytest.fixture(scope="module")
def fitted():
    X, y = synthetic_blobs(256, 8, 4, seed=0)
    model = SlimmableSSL(backbone=(32, 32), projector=(32,), proj_dim=16, epochs=2, batch_size=64, random_state=1)
    return model.fit(X), X


def test_params_round_trip():
    model = SlimmableSSL(alpha=0.1, schedule="static_sandwich")
    params = model.get_params()
    assert params["alpha"] == 0.1 and params["schedule"] == "static_sandwich"
    assert clone(model).get_params() == params


def test_transform_shapes(fitted):
    model, X = fitted
    assert model.transform(X).shape == (256, 32)
    assert model.transform(X, width=0.25).shape == (256, 8)
    assert len(model.history_) == 8
    assert model.config()["seed"] == 1


def test_transform_is_deterministic(fitted):
    model, X = fitted
    assert np.array_equal(model.transform(X, width=0.5), model.transform(X, width=0.5))


def test_errors(fitted):
    model, X = fitted
    with pytest.raises(ValueError, match="outside"):
        model.transform(X, width=0.1)
    with pytest.raises(ValueError, match="features"):
        model.transform(X[:, :3])
    with pytest.raises(NotFittedError):
        SlimmableSSL().transform(X)
    with pytest.raises(ValueError):
        SlimmableSSL().fit(np.array([[np.nan, 1.0], [0.0, 1.0]]))
