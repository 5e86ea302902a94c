"""Input validation shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .scenes import LandmarkSet, Scene

__all__ = ["check_image", "check_landmarks", "check_scene", "check_scenes"]


def check_image(image, multiple: int = 16) -> np.ndarray:
    """Return ``image`` as float32 ``[H, W, 3]`` with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"image must have shape [H, W, 3], got {arr.shape}")
    H, W = arr.shape[:2]
    if H % multiple or W % multiple:
        raise ValueError(f"image size {H}x{W} must be divisible by {multiple}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def check_landmarks(lm: LandmarkSet, height: int, width: int) -> LandmarkSet:
    n = lm.d_in.shape[-1]
    if lm.uv.shape != (n, 2) or lm.valid.shape != (n,) or lm.is_outlier.shape != (n,):
        raise ValueError("landmark arrays must be uv[N, 2], d_in[N], valid[N], is_outlier[N]")
    valid = np.asarray(lm.valid, bool)
    uv = np.asarray(lm.uv)
    if ((uv[:, 0] < 0) | (uv[:, 0] >= width) | (uv[:, 1] < 0) | (uv[:, 1] >= height)).any():
        raise ValueError("landmark coordinates lie outside the image")
    d = np.asarray(lm.d_in, np.float32)
    if not np.isfinite(d).all():
        raise ValueError("landmark depths must be finite")
    if (d[valid] <= 0).any():
        raise ValueError("valid landmarks need positive depth")
    return LandmarkSet(uv.astype(np.int32), d, valid, np.asarray(lm.is_outlier, bool))


def check_scene(scene: Scene, require_depth: bool = True) -> Scene:
    image = check_image(scene.image)
    H, W = image.shape[:2]
    lm = check_landmarks(scene.landmarks, H, W)
    gt = np.asarray(scene.gt_depth, np.float32)
    valid = np.asarray(scene.gt_valid, bool)
    if gt.shape != (H, W) or valid.shape != (H, W):
        raise ValueError("ground-truth depth and validity must match the image size")
    if require_depth and not valid.any():
        raise ValueError("scene has no valid ground-truth pixel")
    if (gt[valid] <= 0).any():
        raise ValueError("valid ground-truth depth must be positive")
    return Scene(image, gt, valid, lm, scene.seed, scene.surface_id)


def check_scenes(scenes, require_depth: bool = True) -> list[Scene]:
    if isinstance(scenes, Scene):
        scenes = [scenes]
    scenes = [check_scene(s, require_depth) for s in scenes]
    if not scenes:
        raise ValueError("need at least one scene")
    if len({s.gt_depth.shape for s in scenes}) > 1:
        raise ValueError("all scenes must share one image size")
    return scenes
