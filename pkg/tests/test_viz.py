import numpy as np
import pytest

from sparseformer import io as sio
from sparseformer.model import ModelConfig, init_params
from sparseformer.scenes import LandmarkSet, SceneConfig, generate_scene
from sparseformer.viz import argmax_surface_agreement, attention_maps, palette, render_viz


def test_attention_maps_hand_case():
    A = np.array([[1.0, 0.0, 0.0], [0.5, 0.0, 0.5]])
    maps = attention_maps(A, np.array([True, False, True]), 1, 2)
    assert maps["max"].tolist() == [[1.0, 0.5]]
    assert maps["entropy"][0, 0] == 0 and maps["entropy"][0, 1] == pytest.approx(1.0)
    assert maps["argmax"].tolist() == [[0, 0]]


def test_argmax_never_picks_padding():
    A = np.array([[0.0, 0.0, 1.0]])  # padded column can never carry weight, but check the mask
    maps = attention_maps(A, np.array([True, True, False]), 1, 1)
    assert maps["argmax"][0, 0] in (0, 1)


def test_single_valid_landmark_entropy_zero():
    maps = attention_maps(np.ones((4, 1)), np.array([True]), 2, 2)
    assert (maps["entropy"] == 0).all() and (maps["max"] == 1).all()


def test_palette_is_stable():
    a, b = palette(5), palette(8)
    np.testing.assert_array_equal(a, b[:5])
    assert len({tuple(c) for c in b}) == 8


def test_surface_agreement():
    sid = np.array([[0, 0, 1, 1]])
    lm = LandmarkSet(np.array([[0, 0], [3, 0]], np.int32), np.ones(2), np.ones(2, bool), np.zeros(2, bool))
    assert argmax_surface_agreement(np.array([[0, 0, 1, 1]]), lm, sid) == 1.0
    assert argmax_surface_agreement(np.array([[1, 0, 1, 0]]), lm, sid) == 0.5


def test_render_viz_writes_maps(tmp_path):
    cfg = ModelConfig(encoder_channels=(4, 4, 8, 8), decoder_channels=(8, 4, 4, 4), stem_channels=4,
                      pe_bands=1, attention_width=4, refine_layers=1)
    scene = generate_scene(SceneConfig(height=32, width=32, landmark_density=0.01, n_fixed=16), 0)
    files = render_viz(init_params(cfg, 0), cfg, scene, tmp_path)
    assert sio.read_pnm(files["attention_max"]).shape == (32, 32)
    assert sio.read_pnm(files["attention_argmax"]).shape == (32, 32, 3)
    assert set(files) == {"attention_max", "attention_entropy", "attention_argmax", "landmarks",
                          "pred_depth", "gt_depth"}
