"""Attention-volume summaries: max, normalised entropy and argmax maps."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from . import io as sio
from .model import ModelConfig, forward
from .scenes import LandmarkSet, Scene

__all__ = ["attention_maps", "palette", "render_viz", "argmax_surface_agreement", "overlay_landmarks"]


def palette(n: int) -> np.ndarray:
    """Fixed ``[n, 3]`` colours in [0, 1]; index ``i`` always maps to the same colour."""
    golden = 0.618033988749895
    return np.array([colorsys.hsv_to_rgb((i * golden) % 1.0, 0.85, 0.95) for i in range(n)])


def attention_maps(A: np.ndarray, valid: np.ndarray, height: int, width: int) -> dict[str, np.ndarray]:
    """Per-pixel max, entropy / log(n_valid) and argmax of ``A[HW, N]``."""
    A = np.asarray(A, np.float64)
    valid = np.asarray(valid, bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("attention maps need at least one valid landmark")
    Av = A[:, valid]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(Av > 0, Av * np.log(Av), 0.0).sum(axis=1)
    ent = ent / np.log(n_valid) if n_valid > 1 else np.zeros_like(ent)
    masked = np.where(valid[None, :], A, -1.0)
    return {
        "max": Av.max(axis=1).reshape(height, width),
        "entropy": np.clip(ent, 0, 1).reshape(height, width),
        "argmax": masked.argmax(axis=1).reshape(height, width),
    }


def overlay_landmarks(image: np.ndarray, landmarks: LandmarkSet, colors: np.ndarray) -> np.ndarray:
    out = np.array(image, dtype=np.float64)
    H, W = out.shape[:2]
    for i in np.flatnonzero(landmarks.valid):
        u, v = landmarks.uv[i]
        out[max(0, v - 1):min(H, v + 2), max(0, u - 1):min(W, u + 2)] = colors[i]
    return out


def argmax_surface_agreement(argmax: np.ndarray, landmarks: LandmarkSet,
                             surface_id: np.ndarray) -> float:
    """Fraction of surfaced pixels whose argmax landmark lies on the same surface."""
    lm_surface = surface_id[landmarks.uv[:, 1], landmarks.uv[:, 0]]
    keep = surface_id >= 0
    return float(np.mean(lm_surface[argmax[keep]] == surface_id[keep]))


def render_viz(params, model_cfg: ModelConfig, scene: Scene, out_dir) -> dict[str, Path]:
    """Write the finest block's attention maps plus predicted and true depth as PNM files."""
    lm = scene.landmarks
    if lm.n_valid == 0:
        raise ValueError("scene has no valid landmarks")
    out = forward(params, scene.image[None], LandmarkSet.stack([lm]), model_cfg, keep_attention=True)
    H, W = scene.gt_depth.shape
    maps = attention_maps(out.attention[0].data[0], lm.valid, H, W)
    colors = palette(len(lm))
    pred = out.final_depth.data[0]
    scale = max(float(scene.gt_depth.max()), float(pred.max()), 1e-6)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "attention_max": out_dir / "attention_max.pgm",
        "attention_entropy": out_dir / "attention_entropy.pgm",
        "attention_argmax": out_dir / "attention_argmax.ppm",
        "landmarks": out_dir / "landmarks.ppm",
        "pred_depth": out_dir / "pred_depth.pgm",
        "gt_depth": out_dir / "gt_depth.pgm",
    }
    peak = maps["max"].max()
    sio.write_pgm(files["attention_max"], maps["max"] / peak if peak > 0 else maps["max"])
    sio.write_pgm(files["attention_entropy"], maps["entropy"])
    sio.write_ppm(files["attention_argmax"], colors[maps["argmax"]])
    sio.write_ppm(files["landmarks"], overlay_landmarks(scene.image, lm, colors))
    sio.write_pgm(files["pred_depth"], pred / scale)
    sio.write_pgm(files["gt_depth"], np.where(scene.gt_valid, scene.gt_depth, 0) / scale)
    return files
