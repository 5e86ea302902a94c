"""Toy encoder-decoder with one SparseFormer per decoder stage.

Encoder: a full-resolution stem conv, then four 3x3 stride-2 stages.
Decoder stage ``s`` upsamples by two, applies a 3x3 conv, adds the encoder
skip at the same stride and runs a SparseFormer, so the four blocks operate
at strides 8, 4, 2, 1. A 1x1 conv + softplus head gives the final depth.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BlockConfig, BlockOutput, block_param_shapes, init_block_params, sparseformer_forward
from .scenes import LandmarkSet
from .tensor import Tensor

__all__ = [
    "ModelConfig", "MultiScaleOutput", "LOSS_WEIGHTS", "init_params",
    "param_shapes", "forward", "multiscale_loss", "downsample_depth",
]

# final prediction first, then the SparseFormer maps fine -> coarse
LOSS_WEIGHTS = (1.0, 0.5, 0.25, 0.15, 0.10)


@dataclass(frozen=True)
class ModelConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 128)
    decoder_channels: tuple[int, ...] = (64, 32, 16, 16)
    stem_channels: int = 16
    pe_bands: int = 6
    attention_width: int = 32
    refine: bool = True
    refine_layers: int = 2
    refine_heads: int = 2
    d_max: float = 10.0
    head_skip: bool = True

    def __post_init__(self):
        if len(self.encoder_channels) != 4 or len(self.decoder_channels) != 4:
            raise ValueError("need exactly 4 encoder and 4 decoder stages")
        skips = (self.encoder_channels[2], self.encoder_channels[1],
                 self.encoder_channels[0], self.stem_channels)
        if tuple(self.decoder_channels) != skips:
            raise ValueError(f"decoder channels must match skip widths {skips}")

    @property
    def block(self) -> BlockConfig:
        return BlockConfig(self.pe_bands, self.attention_width, self.refine,
                           self.refine_layers, self.refine_heads, self.d_max)

    @property
    def strides(self) -> tuple[int, ...]:
        return (8, 4, 2, 1)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            raw, default = d[f.name], f.default
            if isinstance(default, bool):
                kwargs[f.name] = raw.strip().lower() in ("1", "true", "yes")
            elif isinstance(default, tuple):
                kwargs[f.name] = tuple(int(x) for x in raw.split(","))
            else:
                kwargs[f.name] = type(default)(raw)
        return cls(**kwargs)


@dataclass
class MultiScaleOutput:
    final_depth: Tensor                       # [..., H, W]
    d_out: list[Tensor]                       # fine -> coarse: strides 1, 2, 4, 8
    confidence: list[Tensor]
    empty: np.ndarray                         # bool [...]
    attention: list[Tensor] = field(default_factory=list)  # same order, if kept

    @property
    def strides(self) -> tuple[int, ...]:
        return (1, 2, 4, 8)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"stem.w": (3, 3, 3, cfg.stem_channels), "stem.b": (cfg.stem_channels,)}
    cin = cfg.stem_channels
    for i, c in enumerate(cfg.encoder_channels):
        shapes[f"enc.{i}.w"] = (3, 3, cin, c)
        shapes[f"enc.{i}.b"] = (c,)
        cin = c
    for i, c in enumerate(cfg.decoder_channels):
        shapes[f"dec.{i}.w"] = (3, 3, cin, c)
        shapes[f"dec.{i}.b"] = (c,)
        for name, shape in block_param_shapes(c, cfg.block).items():
            shapes[f"dec.{i}.sf.{name}"] = shape
        cin = c
    shapes["head.w"] = (1, 1, cin + int(cfg.head_skip), 1)
    shapes["head.b"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-initialised convs; the head bias starts at softplus^-1 of mid-range depth."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if ".sf." in name:
            continue
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            params[name] = rng.normal(0, math.sqrt(2.0 / fan_in), shape).astype(dtype)
        if name.startswith("dec.") and name.endswith(".b"):
            i = int(name.split(".")[1])
            for k, v in init_block_params(cfg.decoder_channels[i], cfg.block, rng, dtype).items():
                params[f"dec.{i}.sf.{k}"] = v
    if cfg.head_skip:
        # start as a pass-through of the finest interpolated depth
        params["head.w"][..., :-1, :] *= 0.1
        params["head.w"][..., -1, :] = 1.0
    else:
        mid = 0.5 * cfg.d_max
        params["head.b"] = np.full((1,), mid + math.log(-math.expm1(-mid)), dtype)
    return {k: params[k] for k in param_shapes(cfg)}


class _Prefixed:
    def __init__(self, params, prefix):
        self._p = params
        self._prefix = prefix

    def __getitem__(self, key):
        return self._p[self._prefix + key]


def forward(params, image, landmarks: LandmarkSet, cfg: ModelConfig = ModelConfig(),
            keep_attention: bool = False) -> MultiScaleOutput:
    """Dense depth from ``image[..., H, W, 3]`` and full-resolution landmarks.

    ``params`` maps names to Tensors (tracked or not) or arrays.
    """
    p = {k: T.as_tensor(v) for k, v in params.items()}
    x = T.as_tensor(image, p["stem.w"])
    H, W = x.shape[-3], x.shape[-2]
    if H % 16 or W % 16:
        raise ValueError(f"image size {H}x{W} is not divisible by 16")
    skips = [T.relu(T.conv2d(x, p["stem.w"], p["stem.b"]))]
    h = skips[0]
    for i in range(4):
        h = T.relu(T.conv2d(h, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=2))
        skips.append(h)
    d_maps, conf, attn, empty = [], [], [], None
    for i, stride in enumerate(cfg.strides):
        h = T.relu(T.conv2d(T.upsample_nearest(h), p[f"dec.{i}.w"], p[f"dec.{i}.b"]))
        h = h + skips[3 - i]
        out: BlockOutput = sparseformer_forward(h, landmarks, stride, _Prefixed(p, f"dec.{i}.sf."), cfg.block)
        h = out.features
        d_maps.append(out.d_out)
        conf.append(out.confidence)
        if keep_attention:
            attn.append(out.attention)
        empty = out.empty
    if cfg.head_skip:
        h = T.concat([h, T.reshape(d_maps[-1], d_maps[-1].shape + (1,))], axis=-1)
    final = T.softplus(T.conv2d(h, p["head.w"], p["head.b"]))
    final = T.reshape(final, final.shape[:-1])
    return MultiScaleOutput(final, d_maps[::-1], conf[::-1], empty, attn[::-1])


def downsample_depth(gt: np.ndarray, valid: np.ndarray, stride: int):
    """Validity-masked average pooling; a coarse pixel is valid if any fine one is."""
    if stride == 1:
        return np.asarray(gt), np.asarray(valid, bool)
    gt = np.asarray(gt, float)
    valid = np.asarray(valid, bool)
    *lead, H, W = gt.shape
    shape = (*lead, H // stride, stride, W // stride, stride)
    total = np.where(valid, gt, 0).reshape(shape).sum(axis=(-3, -1))
    count = valid.reshape(shape).sum(axis=(-3, -1))
    coarse_valid = count > 0
    return np.where(coarse_valid, total / np.maximum(count, 1), 0), coarse_valid


def multiscale_loss(out: MultiScaleOutput, gt_depth, gt_valid) -> Tensor:
    """Weighted ``l1 + l2`` over the final map and the four SparseFormer maps."""
    gt_valid = np.asarray(gt_valid, bool)
    if not gt_valid.any():
        raise ValueError("loss: no valid ground-truth pixels")
    pred = out.final_depth
    total = LOSS_WEIGHTS[0] * (T.l1_loss(pred, gt_depth, gt_valid) + T.l2_loss(pred, gt_depth, gt_valid))
    has = ~np.asarray(out.empty, bool)
    for w, stride, d in zip(LOSS_WEIGHTS[1:], out.strides, out.d_out):
        gt_s, valid_s = downsample_depth(gt_depth, gt_valid, stride)
        # frames without landmarks have no interpolated map to supervise
        valid_s = valid_s & has.reshape(has.shape + (1, 1))
        if not valid_s.any():
            continue
        gt_s = gt_s.astype(d.dtype)
        total = total + w * (T.l1_loss(d, gt_s, valid_s) + T.l2_loss(d, gt_s, valid_s))
    return total
