import numpy as np
import pytest
from sklearn.base import clone, is_regressor
from sklearn.exceptions import NotFittedError

from sparseformer import SparseFormerRegressor
from sparseformer.scenes import SceneConfig, generate_scene, scene_seed
from sparseformer.validation import check_image, check_scenes

TINY = dict(n_iter=2, batch_size=2, encoder_channels=(4, 4, 8, 8), decoder_channels=(8, 4, 4, 4),
            stem_channels=4, pe_bands=1, attention_width=4, refine_layers=1, landmarks_max=16)


@pytest.fixture(scope="module")
def scenes():
    cfg = SceneConfig(height=32, width=32, landmark_density=0.01, n_fixed=16)
    return [generate_scene(cfg, scene_seed(0, i)) for i in range(4)]


def test_params_and_clone():
    est = SparseFormerRegressor(**TINY)
    assert est.get_params()["n_iter"] == 2
    other = clone(est).set_params(refine=False)
    assert other.refine is False and est.refine is True
    assert is_regressor(est)


def test_predict_before_fit_raises(scenes):
    with pytest.raises(NotFittedError):
        SparseFormerRegressor(**TINY).predict(scenes)


def test_fit_predict_score(scenes):
    est = SparseFormerRegressor(**TINY).fit(scenes)
    assert est.n_iter_ == 2 and len(est.training_log_) >= 1
    pred = est.predict(scenes[:3])
    assert pred.shape == (3, 32, 32) and (pred > 0).all()
    assert est.score(scenes) < 0
    again = SparseFormerRegressor(**TINY).fit(scenes).predict(scenes[:3])
    np.testing.assert_array_equal(pred, again)


def test_validation_helpers(scenes):
    with pytest.raises(ValueError, match="divisible"):
        check_image(np.zeros((30, 32, 3)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_image(np.full((32, 32, 3), 2.0))
    with pytest.raises(ValueError, match="at least one"):
        check_scenes([])
    assert len(check_scenes(scenes[0])) == 1
