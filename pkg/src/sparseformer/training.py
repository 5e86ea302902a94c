"""Training loop, checkpointing and landmark-count / outlier-rate evaluation."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as sio
from .metrics import MetricsReport, compute_metrics
from .model import ModelConfig, forward, init_params, multiscale_loss
from .optim import Adam, step_decay_lr
from .scenes import LandmarkSet, Scene, SceneConfig, sample_landmarks
from .tensor import Tape

__all__ = [
    "TrainConfig", "TrainState", "LOG_HEADER", "train", "train_scenes",
    "predict_depth", "evaluate", "evaluate_scenes", "load_checkpoint",
    "save_checkpoint", "load_dataset", "split_indices", "resample_landmarks",
    "EVAL_HEADER", "format_eval_csv", "sweep",
]

log = logging.getLogger(__name__)

LOG_HEADER = ["iter", "lr", "loss", "rel", "rmse", "a1", "a2", "a3"]
EVAL_HEADER = ["n_landmarks", "outlier_rate", "rel", "rmse", "a1", "a2", "a3", "n_pixels"]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 8
    lr: float = 1e-3
    decay_interval: int = 7000
    decay_factor: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    landmarks_min: int = 2
    landmarks_max: int = 64
    outlier_min: float = 0.0
    outlier_max: float = 0.2
    val_fraction: float = 0.1
    val_every: int = 500
    val_landmarks: int = 32
    log_every: int = 50
    checkpoint_every: int = 1000
    init_seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if not 1 <= self.landmarks_min <= self.landmarks_max:
            raise ValueError("need 1 <= landmarks_min <= landmarks_max")
        if not 0 <= self.outlier_min <= self.outlier_max < 1:
            raise ValueError("need 0 <= outlier_min <= outlier_max < 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict[str, str]:
        return {f.name: str(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "TrainConfig":
        return cls(**{f.name: type(f.default)(d[f.name]) for f in dataclasses.fields(cls) if f.name in d})


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    optimizer: Adam
    iteration: int
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    scene_cfg: SceneConfig
    seed: int


def save_checkpoint(path, state: TrainState) -> None:
    config = {"seed": state.seed, "state.iteration": state.iteration,
              "state.adam_t": state.optimizer.t}
    config.update({f"model.{k}": v for k, v in state.model_cfg.to_dict().items()})
    config.update({f"train.{k}": v for k, v in state.train_cfg.to_dict().items()})
    config.update({f"scene.{k}": v for k, v in state.scene_cfg.to_dict().items()})
    tensors = {f"param.{k}": v for k, v in state.params.items()}
    tensors.update(state.optimizer.state_tensors())
    sio.write_checkpoint(path, config, tensors)


def _section(config: dict[str, str], prefix: str) -> dict[str, str]:
    return {k[len(prefix):]: v for k, v in config.items() if k.startswith(prefix)}


def load_checkpoint(path) -> TrainState:
    config, tensors = sio.read_checkpoint(path)
    tc = TrainConfig.from_dict(_section(config, "train."))
    opt = Adam(tc.beta1, tc.beta2, tc.eps)
    opt.load_state(int(config.get("state.adam_t", 0)),
                   {k: v for k, v in tensors.items() if k.startswith("adam.")})
    return TrainState(
        params={k[6:]: v for k, v in tensors.items() if k.startswith("param.")},
        optimizer=opt,
        iteration=int(config.get("state.iteration", 0)),
        model_cfg=ModelConfig.from_dict(_section(config, "model.")),
        train_cfg=tc,
        scene_cfg=SceneConfig.from_dict(_section(config, "scene.")),
        seed=int(config.get("seed", 0)),
    )


def load_dataset(manifest) -> tuple[SceneConfig, list[Scene]]:
    cfg, files, _ = sio.read_manifest(manifest)
    return cfg, [sio.read_scene(f) for f in files]


def split_indices(n: int, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Train / validation indices; the last ``val_fraction`` of scenes is held out."""
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.arange(n - n_val), np.arange(n - n_val, n)


def resample_landmarks(scene: Scene, cfg: SceneConfig, seed, n_landmarks: int,
                       outlier_rate: float, n_fixed: int | None = None) -> LandmarkSet:
    return sample_landmarks(scene.gt_depth, scene.gt_valid, scene.image, cfg, seed,
                            n_landmarks=n_landmarks, outlier_rate=outlier_rate,
                            n_fixed=n_landmarks if n_fixed is None else n_fixed)


def _batch(scenes: list[Scene], landmarks: list[LandmarkSet], dtype):
    return (np.stack([s.image for s in scenes]).astype(dtype),
            LandmarkSet.stack(landmarks),
            np.stack([s.gt_depth for s in scenes]).astype(dtype),
            np.stack([s.gt_valid for s in scenes]))


def predict_depth(params, model_cfg: ModelConfig, images, landmarks: list[LandmarkSet],
                  batch_size: int = 8) -> np.ndarray:
    """Final depth maps ``[n, H, W]`` without recording a tape."""
    out = []
    dtype = next(iter(params.values())).dtype
    for lo in range(0, len(landmarks), batch_size):
        img = np.asarray(images[lo:lo + batch_size], dtype)
        lm = LandmarkSet.stack(landmarks[lo:lo + batch_size])
        out.append(forward(params, img, lm, model_cfg).final_depth.data)
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_scenes(params, model_cfg: ModelConfig, scenes: list[Scene],
                    landmarks: list[LandmarkSet], batch_size: int = 8) -> MetricsReport:
    """Metrics pooled over every valid pixel of every scene."""
    pred = predict_depth(params, model_cfg, [s.image for s in scenes], landmarks, batch_size)
    gt = np.stack([s.gt_depth for s in scenes])
    valid = np.stack([s.gt_valid for s in scenes])
    return compute_metrics(pred, gt, valid)


def _fmt(x) -> str:
    return "" if x is None else f"{x:.9g}"


def _log_row(it, lr, loss, rep: MetricsReport | None) -> list[str]:
    metrics = [None] * 5 if rep is None else [rep.rel, rep.rmse, rep.a1, rep.a2, rep.a3]
    return [str(it), _fmt(lr), _fmt(loss)] + [_fmt(m) for m in metrics]


def train_scenes(scenes: list[Scene], scene_cfg: SceneConfig, train_cfg: TrainConfig = TrainConfig(),
                 model_cfg: ModelConfig = ModelConfig(), seed: int = 0, out_dir=None,
                 resume: TrainState | None = None, stop_at: int | None = None) -> tuple[TrainState, list[list[str]]]:
    """Train on in-memory scenes; returns final state and the log rows.

    Randomness for iteration ``i`` derives only from ``(seed, i)``, so a run
    resumed from a checkpoint reproduces the uninterrupted run exactly.
    ``stop_at`` ends the run early (at that iteration count) without changing
    the schedule.
    """
    if not scenes:
        raise ValueError("no training scenes")
    tc, mc = train_cfg, model_cfg
    if resume is None:
        state = TrainState(init_params(mc, tc.init_seed), Adam(tc.beta1, tc.beta2, tc.eps),
                           0, mc, tc, scene_cfg, seed)
    else:
        state = resume
        tc, mc, seed = state.train_cfg, state.model_cfg, state.seed
    params = state.params
    dtype = next(iter(params.values())).dtype
    train_idx, val_idx = split_indices(len(scenes), tc.val_fraction)
    val_scenes = [scenes[i] for i in val_idx]
    val_lms = [resample_landmarks(scenes[i], scene_cfg, np.random.default_rng([seed, 7, int(i)]),
                                  tc.val_landmarks, 0.0) for i in val_idx]
    out_dir = Path(out_dir) if out_dir is not None else None
    rows: list[list[str]] = []
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = _open_log(out_dir / "log.csv", state.iteration)
    names = list(params)
    lk_lo, lk_hi = math.log(tc.landmarks_min), math.log(tc.landmarks_max)
    end = tc.iterations if stop_at is None else min(stop_at, tc.iterations)
    try:
        for it in range(state.iteration, end):
            rng = np.random.default_rng([seed, it])
            picks = train_idx[rng.integers(0, train_idx.size, tc.batch_size)]
            batch = [scenes[i] for i in picks]
            lms = []
            for s in batch:
                k = int(round(math.exp(rng.uniform(lk_lo, lk_hi))))
                rate = rng.uniform(tc.outlier_min, tc.outlier_max)
                lms.append(resample_landmarks(s, scene_cfg, rng, k, rate, tc.landmarks_max))
            img, lm, gt, gv = _batch(batch, lms, dtype)
            lr = step_decay_lr(it, tc.lr, tc.decay_interval, tc.decay_factor)
            with Tape() as tape:
                w = {k: tape.watch(params[k]) for k in names}
                loss = multiscale_loss(forward(w, img, lm, mc), gt, gv)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at iteration {it}")
            grads = tape.backward(loss)
            state.optimizer.step(params, {k: grads[w[k]] for k in names}, lr)
            del tape, w, grads
            done = it + 1
            state.iteration = done
            rep = None
            if val_scenes and (done % tc.val_every == 0 or done == tc.iterations):
                rep = evaluate_scenes(params, mc, val_scenes, val_lms, tc.batch_size)
                log.info("iter %d lr %.3g loss %.4f val rel %.4f a1 %.4f", done, lr, loss.item(), rep.rel, rep.a1)
            if rep is not None or done % tc.log_every == 0 or done == end:
                row = _log_row(done, lr, loss.item(), rep)
                rows.append(row)
                if log_file is not None:
                    log_file.write(",".join(row) + "\n")
                    log_file.flush()
            if out_dir is not None and (done % tc.checkpoint_every == 0 or done == end):
                path = out_dir / f"ckpt_{done:06d}.spfc"
                save_checkpoint(path, state)
                shutil.copyfile(path, out_dir / "last.spfc")
    finally:
        if log_file is not None:
            log_file.close()
    return state, rows


def _open_log(path: Path, start: int):
    """Open the CSV log for appending, dropping rows past ``start``."""
    kept = [",".join(LOG_HEADER)]
    if start > 0 and path.exists():
        for line in path.read_text().splitlines()[1:]:
            if line and int(line.split(",", 1)[0]) <= start:
                kept.append(line)
    path.write_text("\n".join(kept) + "\n")
    return path.open("a")


def train(manifest, out_dir, train_cfg: TrainConfig = TrainConfig(),
          model_cfg: ModelConfig = ModelConfig(), seed: int = 0, resume=None,
          stop_at: int | None = None) -> TrainState:
    """Train from a dataset manifest, writing ``log.csv`` and checkpoints to ``out_dir``."""
    scene_cfg, scenes = load_dataset(manifest)
    state = load_checkpoint(resume) if resume is not None else None
    state, _ = train_scenes(scenes, scene_cfg, train_cfg, model_cfg, seed, out_dir, state, stop_at)
    return state


def sweep(state: TrainState, scene_cfg: SceneConfig, scenes: list[Scene], indices,
          n_landmarks=(2, 32, 200), outlier_rates=(0.0,), seed: int = 0,
          batch_size: int = 8) -> list[dict]:
    """Metrics per (landmark count, outlier rate) over ``scenes[indices]``.

    Landmarks are resampled per scene; pixel draws depend on ``(seed, scene,
    count)`` only, so every outlier rate sees the same landmark positions.
    """
    idx = [int(i) for i in indices]
    chosen = [scenes[i] for i in idx]
    rows = []
    for k in n_landmarks:
        for rate in outlier_rates:
            lms = [resample_landmarks(scenes[i], scene_cfg, np.random.default_rng([seed, i, int(k)]),
                                      int(k), float(rate)) for i in idx]
            rep = evaluate_scenes(state.params, state.model_cfg, chosen, lms, batch_size)
            rows.append({"n_landmarks": int(k), "outlier_rate": float(rate), **rep.as_dict()})
    return rows


def evaluate(checkpoint, manifest, n_landmarks=(2, 32, 200), outlier_rates=(0.0,),
             seed: int = 0, split: str = "val", batch_size: int = 8) -> list[dict]:
    """:func:`sweep` of a checkpoint over a dataset's validation split (or all of it)."""
    state = load_checkpoint(checkpoint)
    scene_cfg, scenes = load_dataset(manifest)
    if split == "val":
        _, idx = split_indices(len(scenes), state.train_cfg.val_fraction)
        if idx.size == 0:
            idx = np.arange(len(scenes))
    elif split == "all":
        idx = np.arange(len(scenes))
    else:
        raise ValueError(f"unknown split {split!r}")
    return sweep(state, scene_cfg, scenes, idx, n_landmarks, outlier_rates, seed, batch_size)


def format_eval_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write("# metrics pooled over all valid pixels of the evaluated scenes\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_HEADER)
    for r in rows:
        writer.writerow([r["n_landmarks"], f"{r['outlier_rate']:g}"] +
                        [f"{r[k]:.9g}" for k in ("rel", "rmse", "a1", "a2", "a3")] + [r["n_pixels"]])
    return buf.getvalue()
