import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from eunets.data_io import SyntheticConfig, generate_synthetic, stack_samples
from eunets.estimators import DeepEnsembleSegmenter, EUNetSegmenter, check_images, check_masks


@pytest.fixture(scope="module")
def xy():
    x, y = stack_samples(generate_synthetic(SyntheticConfig(image_size=16, sample_count=10, seed=2)))
    return x, y


def small(**kw):
    return EUNetSegmenter(base_width=4, mhex_hidden=4, max_epochs=2, **kw)


@pytest.fixture(scope="module")
def fitted(xy):
    return small().fit(*xy)


def test_params_round_trip():
    est = small(backbone="unetpp")
    params = est.get_params()
    assert params["backbone"] == "unetpp" and params["base_width"] == 4
    copy = clone(est)
    assert copy.get_params() == params and copy is not est
    assert est.set_params(depth=2).depth == 2


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.zeros((1, 16, 16)))


def test_fit_predict_shapes(fitted, xy):
    x, y = xy
    proba = fitted.predict_proba(x)
    assert proba.shape == (10, 2, 16, 16)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert fitted.predict(x[:, 0]).shape == (10, 16, 16)
    assert 0.0 <= fitted.score(x, y) <= 1.0
    assert fitted.history_.stop_epoch == 2
    assert list(fitted.classes_) == [0, 1]


def test_fit_is_deterministic(fitted, xy):
    again = small().fit(*xy)
    np.testing.assert_array_equal(again.predict_proba(xy[0]), fitted.predict_proba(xy[0]))


def test_maps(fitted, xy):
    x = xy[0][:2]
    assert fitted.saliency(x).shape == (2, 16, 16)
    mu = fitted.uncertainty(x, pixel_stride=2)
    assert mu.shape == (2, 16, 16) and mu.min() >= 0 and mu.max() <= 1


def test_ensemble(xy):
    ens = DeepEnsembleSegmenter(small(), n_members=2, random_state=3).fit(*xy)
    assert [m.random_state for m in ens.estimators_] == [3, 4]
    proba = ens.predict_proba(xy[0])
    expected = (ens.estimators_[0].predict_proba(xy[0]) + ens.estimators_[1].predict_proba(xy[0])) / 2
    np.testing.assert_allclose(proba, expected, atol=1e-15)
    ent = ens.uncertainty(xy[0][:3])
    assert ent.shape == (3, 16, 16) and np.all((ent >= 0) & (ent <= np.log(2)))
    assert ens.uncertainty(xy[0][:3], "variance").min() >= 0
    with pytest.raises(ValueError):
        DeepEnsembleSegmenter(small(), n_members=1).fit(*xy)


def test_validation_helpers():
    assert check_images(np.zeros((2, 8, 8))).shape == (2, 1, 8, 8)
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 1, 8, 8)), in_channels=3)
    with pytest.raises(ValueError):
        check_images(np.full((1, 8, 8), np.nan))
    x = np.zeros((2, 1, 8, 8))
    assert check_masks(np.zeros((2, 8, 8), float), x).dtype == np.int64
    with pytest.raises(ValueError):
        check_masks(np.zeros((2, 4, 4), int), x)
    with pytest.raises(ValueError):
        check_masks(np.full((2, 8, 8), 0.5), x)
    with pytest.raises(ValueError):
        small(validation_fraction=1.5).fit(x, np.zeros((2, 8, 8), int))
