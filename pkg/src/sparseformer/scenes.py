"""Synthetic piecewise-planar scenes with SfM-like landmark sets.

A scene is a back plane, an optional ground plane, finite panels and boxes
standing on the ground, rendered by per-pixel nearest-hit ray casting through
a pinhole camera (focal length ``W`` pixels, principal point at the centre).
Depth is the camera z-coordinate of the hit point.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SceneConfig", "LandmarkSet", "Scene", "Plane", "Panel", "Box",
    "camera_rays", "render", "generate_scene", "sample_landmarks",
    "dataset_stats", "DatasetStats", "scene_seed", "gradient_magnitude",
]

_LIGHT = np.array([-0.4, -0.8, -0.45]) / np.linalg.norm([-0.4, -0.8, -0.45])
_AMBIENT = 0.25
_MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class SceneConfig:
    height: int = 48
    width: int = 64
    n_planes: int = 3
    n_boxes: int = 2
    d_min: float = 1.0
    d_max: float = 10.0
    landmark_density: float = 0.01
    outlier_rate: float = 0.0
    outlier_depth_distribution: str = "uniform"
    n_fixed: int = 64
    sampling_bias: float = 0.5
    ground_plane: bool = True
    slant_prob: float = 0.5
    camera_height: tuple[float, float] = (1.0, 2.0)

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("height and width must be positive")
        if self.n_planes < 1:
            raise ValueError("n_planes must be at least 1 (the back plane)")
        if self.n_boxes < 0:
            raise ValueError("n_boxes must be non-negative")
        if not 0 < self.d_min <= self.d_max:
            raise ValueError("need 0 < d_min <= d_max")
        if not 0 <= self.outlier_rate < 1:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.outlier_depth_distribution != "uniform":
            raise ValueError("only the uniform outlier depth distribution is supported")
        if self.landmark_density * self.height * self.width < 1:
            raise ValueError("landmark_density * H * W must be at least 1")
        if not 0 <= self.sampling_bias <= 1:
            raise ValueError("sampling_bias must lie in [0, 1]")
        if self.n_fixed < 1:
            raise ValueError("n_fixed must be positive")

    @property
    def n_landmarks(self) -> int:
        return int(round(self.landmark_density * self.height * self.width))

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(repr, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "SceneConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            raw, default = d[f.name], f.default
            if isinstance(default, bool):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kwargs[f.name] = tuple(float(x) for x in raw.split(","))
            else:
                kwargs[f.name] = type(default)(raw)
        return cls(**kwargs)


@dataclass
class LandmarkSet:
    """Fixed-size landmark list; entries with ``valid == False`` are padding."""

    uv: np.ndarray          # int32 [..., N, 2] (column, row)
    d_in: np.ndarray        # float32 [..., N]
    valid: np.ndarray       # bool [..., N]
    is_outlier: np.ndarray  # bool [..., N]; generator-side label

    def __len__(self):
        return self.d_in.shape[-1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def permuted(self, order) -> "LandmarkSet":
        order = np.asarray(order)
        return LandmarkSet(self.uv[..., order, :], self.d_in[..., order],
                           self.valid[..., order], self.is_outlier[..., order])

    def padded(self, n_fixed: int) -> "LandmarkSet":
        extra = n_fixed - len(self)
        if extra < 0:
            raise ValueError("cannot pad to fewer entries")
        lead = self.d_in.shape[:-1]
        return LandmarkSet(
            np.concatenate([self.uv, np.zeros(lead + (extra, 2), np.int32)], axis=-2),
            np.concatenate([self.d_in, np.zeros(lead + (extra,), np.float32)], axis=-1),
            np.concatenate([self.valid, np.zeros(lead + (extra,), bool)], axis=-1),
            np.concatenate([self.is_outlier, np.zeros(lead + (extra,), bool)], axis=-1),
        )

    @staticmethod
    def stack(items: list["LandmarkSet"]) -> "LandmarkSet":
        n = max(len(x) for x in items)
        items = [x.padded(n) for x in items]
        return LandmarkSet(*(np.stack([getattr(x, k) for x in items])
                             for k in ("uv", "d_in", "valid", "is_outlier")))


@dataclass
class Scene:
    image: np.ndarray       # float32 [H, W, 3] in [0, 1]
    gt_depth: np.ndarray    # float32 [H, W], metres
    gt_valid: np.ndarray    # bool [H, W]
    landmarks: LandmarkSet
    seed: int | None = None
    surface_id: np.ndarray | None = field(default=None, repr=False)  # int16 [H, W], -1 = no hit

    @property
    def shape(self) -> tuple[int, int]:
        return self.gt_depth.shape


# -- geometry --------------------------------------------------------------------

def camera_rays(height: int, width: int) -> np.ndarray:
    """Ray directions with unit z through pixel centres, ``[H, W, 3]``."""
    f = float(width)
    u = (np.arange(width) + 0.5 - width / 2) / f
    v = (np.arange(height) + 0.5 - height / 2) / f
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv, np.ones_like(uu)], axis=-1)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


@dataclass
class Plane:
    """Infinite plane ``normal . X = offset``."""

    normal: np.ndarray
    offset: float
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))

    def intersect(self, rays):
        denom = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, self.offset / denom, np.inf)
        t = np.where(t > 0, t, np.inf)
        return t, np.broadcast_to(self.normal, rays.shape)


@dataclass
class Panel:
    """Rectangle centred at ``center`` spanning ``half[0]*axis_u`` and ``half[1]*axis_v``."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half: tuple[float, float]
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))

    def intersect(self, rays):
        normal = _unit(np.cross(self.axis_u, self.axis_v))
        t, _ = Plane(normal, float(normal @ self.center)).intersect(rays)
        with np.errstate(invalid="ignore"):
            rel = rays * t[..., None] - self.center
            inside = (np.abs(rel @ self.axis_u) <= self.half[0]) & \
                     (np.abs(rel @ self.axis_v) <= self.half[1])
        return np.where(inside & np.isfinite(t), t, np.inf), np.broadcast_to(normal, rays.shape)


@dataclass
class Box:
    """Axis-aligned box between corners ``lo`` and ``hi``."""

    lo: np.ndarray
    hi: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))

    def intersect(self, rays):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / rays
            t1 = self.lo * inv
            t2 = self.hi * inv
        t1 = np.where(np.isnan(t1), -np.inf, t1)
        t2 = np.where(np.isnan(t2), np.inf, t2)
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near = tmin.max(axis=-1)
        far = tmax.min(axis=-1)
        hit = (near <= far) & (near > 0)
        axis = tmin.argmax(axis=-1)
        normal = np.zeros(rays.shape)
        sign = -np.sign(np.take_along_axis(rays, axis[..., None], -1))[..., 0]
        np.put_along_axis(normal, axis[..., None], sign[..., None], -1)
        return np.where(hit, near, np.inf), normal


def render(surfaces, height: int, width: int):
    """Nearest-hit depth (float64), normals, surface ids and shaded image."""
    rays = camera_rays(height, width)
    depth = np.full((height, width), np.inf)
    normal = np.zeros((height, width, 3))
    sid = np.full((height, width), -1, dtype=np.int16)
    for i, s in enumerate(surfaces):
        t, n = s.intersect(rays)
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[..., None], n, normal)
        sid[closer] = i
    # normals face the camera
    flip = np.sum(normal * rays, axis=-1) > 0
    normal = np.where(flip[..., None], -normal, normal)
    shade = _AMBIENT + (1 - _AMBIENT) * np.clip(normal @ _LIGHT * -1, 0, None)
    albedo = np.zeros((height, width, 3))
    for i, s in enumerate(surfaces):
        albedo[sid == i] = s.albedo
    image = np.clip(albedo * shade[..., None], 0, 1)
    return depth, normal, sid, image


def _random_layout(cfg: SceneConfig, rng: np.random.Generator):
    lo, hi = cfg.d_min, cfg.d_max
    back = lo + rng.uniform(0.6, 1.0) * (hi - lo)
    surfaces = []

    def albedo():
        return rng.uniform(0.2, 1.0, size=3)

    if rng.random() < cfg.slant_prob:
        n = _unit([rng.uniform(-0.6, 0.6), rng.uniform(-0.4, 0.4), 1.0])
    else:
        n = np.array([0.0, 0.0, 1.0])
    surfaces.append(Plane(n, float(n[2] * back), albedo()))
    cam_h = rng.uniform(*cfg.camera_height)
    if cfg.ground_plane:
        surfaces.append(Plane(np.array([0.0, -1.0, 0.0]), -cam_h, albedo()))
    near_lim = max(lo, 0.2 * back)
    for _ in range(cfg.n_planes - 1):
        z = rng.uniform(near_lim, max(near_lim, 0.85 * back))
        center = np.array([rng.uniform(-0.4, 0.4) * z, rng.uniform(-0.3, 0.2) * z, z])
        if rng.random() < cfg.slant_prob:
            yaw, pitch = rng.uniform(-0.9, 0.9), rng.uniform(-0.5, 0.5)
        else:
            yaw = pitch = 0.0
        au = np.array([math.cos(yaw), 0.0, -math.sin(yaw)])
        av = np.array([math.sin(yaw) * math.sin(pitch), math.cos(pitch),
                       math.cos(yaw) * math.sin(pitch)])
        half = (rng.uniform(0.1, 0.35) * z, rng.uniform(0.1, 0.3) * z)
        surfaces.append(Panel(center, au, av, half, albedo()))
    for _ in range(cfg.n_boxes):
        z = rng.uniform(near_lim + 0.5, max(near_lim + 0.5, 0.85 * back))
        x = rng.uniform(-0.35, 0.35) * z
        hx, hz = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
        top = cam_h - rng.uniform(0.3, 2.0)
        surfaces.append(Box(np.array([x - hx, top, z - hz]),
                            np.array([x + hx, cam_h, z + hz]), albedo()))
    return surfaces


def scene_seed(global_seed: int, index: int) -> int:
    """Per-scene seed derived from ``(global_seed, index)``."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1)[0])


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Render a random scene and sample its landmarks; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    H, W = cfg.height, cfg.width
    for _ in range(_MAX_ATTEMPTS):
        surfaces = _random_layout(cfg, rng)
        depth, _, sid, image = render(surfaces, H, W)
        valid = np.isfinite(depth) & (depth > 0) & (depth <= cfg.d_max)
        if valid.mean() >= 0.5 and valid.sum() >= cfg.n_landmarks:
            break
    else:
        raise RuntimeError(f"no usable geometry after {_MAX_ATTEMPTS} attempts")
    gt = np.where(valid, depth, 0).astype(np.float32)
    image = image.astype(np.float32)
    landmarks = sample_landmarks(gt, valid, image, cfg, rng)
    return Scene(image, gt, valid, landmarks, seed=seed, surface_id=np.where(valid, sid, -1))


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of the mean intensity, scaled to max 1."""
    gray = np.asarray(image, float)
    if gray.ndim == 3:
        gray = gray.mean(axis=-1)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    top = mag.max()
    return mag / top if top > 0 else mag


def sample_landmarks(gt_depth, gt_valid, image, cfg: SceneConfig, seed,
                     n_landmarks: int | None = None, outlier_rate: float | None = None,
                     n_fixed: int | None = None) -> LandmarkSet:
    """Draw an edge-biased, outlier-prone landmark set padded to ``n_fixed``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    gt_depth = np.asarray(gt_depth, np.float32)
    H, W = gt_depth.shape
    k = cfg.n_landmarks if n_landmarks is None else int(n_landmarks)
    rate = cfg.outlier_rate if outlier_rate is None else float(outlier_rate)
    n_fixed = cfg.n_fixed if n_fixed is None else int(n_fixed)
    if k > H * W:
        raise ValueError(f"{k} landmarks requested but the image has {H * W} pixels")
    cand = np.flatnonzero(np.asarray(gt_valid, bool) & (gt_depth > 0))
    k = min(k, cand.size)
    weight = (1 - cfg.sampling_bias) + cfg.sampling_bias * gradient_magnitude(image).reshape(-1)[cand]
    # tiny floor keeps zero-weight pixels drawable when k exceeds the support
    weight = weight + 1e-9 * max(weight.mean(), 1e-12)
    pick = cand[rng.choice(cand.size, size=k, replace=False, p=weight / weight.sum())]
    rows, cols = np.divmod(pick, W)
    d_in = gt_depth.reshape(-1)[pick].copy()
    outlier = rng.random(k) < rate
    d_in[outlier] = rng.uniform(cfg.d_min, cfg.d_max, size=int(outlier.sum()))
    uv = np.stack([cols, rows], axis=-1).astype(np.int32)
    if k > n_fixed:
        keep = rng.choice(k, size=n_fixed, replace=False)
        uv, d_in, outlier = uv[keep], d_in[keep], outlier[keep]
        k = n_fixed
    lm = LandmarkSet(uv.reshape(k, 2), d_in.astype(np.float32),
                     np.ones(k, bool), outlier.astype(bool))
    return lm.padded(n_fixed)


@dataclass
class DatasetStats:
    n_scenes: int
    mean_density: float
    mean_landmarks: float
    outlier_fraction: float
    bin_edges: np.ndarray
    landmark_hist: np.ndarray
    gt_hist: np.ndarray

    def format(self) -> str:
        lines = [f"scenes={self.n_scenes}",
                 f"landmark_density={self.mean_density * 100:.4f}%",
                 f"landmarks_per_scene={self.mean_landmarks:.2f}",
                 f"outlier_fraction={self.outlier_fraction:.4f}",
                 "bin_lo,bin_hi,landmarks,gt"]
        for lo, hi, a, b in zip(self.bin_edges[:-1], self.bin_edges[1:],
                                self.landmark_hist, self.gt_hist):
            lines.append(f"{lo:.3f},{hi:.3f},{a},{b}")
        return "\n".join(lines)


def dataset_stats(scenes, bins: int = 20, d_max: float | None = None) -> DatasetStats:
    """Landmark density and landmark-vs-ground-truth depth histograms."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("dataset_stats needs at least one scene")
    dens, counts, outl = [], [], 0
    lm_depths, gt_depths = [], []
    for s in scenes:
        lm = s.landmarks
        n = lm.n_valid
        dens.append(n / s.gt_depth.size)
        counts.append(n)
        outl += int((lm.is_outlier & lm.valid).sum())
        lm_depths.append(lm.d_in[lm.valid])
        gt_depths.append(s.gt_depth[s.gt_valid])
    lm_all = np.concatenate(lm_depths)
    gt_all = np.concatenate(gt_depths)
    top = d_max if d_max is not None else float(max(gt_all.max(initial=0), lm_all.max(initial=0)))
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    return DatasetStats(
        n_scenes=len(scenes),
        mean_density=float(np.mean(dens)),
        mean_landmarks=float(np.mean(counts)),
        outlier_fraction=outl / max(1, int(np.sum(counts))),
        bin_edges=edges,
        landmark_hist=np.histogram(lm_all, edges)[0],
        gt_hist=np.histogram(gt_all, edges)[0],
    )
