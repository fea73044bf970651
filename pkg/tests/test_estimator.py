import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vdgs.estimator import VDGSEstimator
from vdgs.synthetic import make_dataset, make_scene, write_dataset


@pytest.fixture(scope="module")
def ds():
    return make_dataset(make_scene(n=15, seed=3), n_train=3, n_test=2, size=16)


def test_params_and_clone():
    est = VDGSEstimator(variant="O*", iterations=3, config_overrides={"eval_interval": 1})
    assert est.get_params()["variant"] == "O*"
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    assert est.make_config().iterations == 3 and est.make_config().eval_interval == 1


def test_predict_before_fit(ds):
    with pytest.raises(NotFittedError):
        VDGSEstimator().predict(ds.cameras("test"))


def test_fit_predict_score(ds, tmp_path):
    est = VDGSEstimator(iterations=10, config_overrides={"densify_from": 5, "eval_interval": 5}).fit(ds)
    preds = est.predict(ds.cameras("test"))
    assert len(preds) == 2 and preds[0].shape == (16, 16, 3)
    assert all(p.min() >= 0 and p.max() <= 1 for p in preds)
    score = est.score(ds.cameras("test"), ds.images("test"))
    assert np.isfinite(score) and score > 5
    # a dataset directory works the same as the in-memory manifest
    write_dataset(tmp_path, ds)
    est2 = clone(est).fit(tmp_path)
    assert est2.n_gaussians_ > 0
