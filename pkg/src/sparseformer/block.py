"""The SparseFormer block: landmark cross-attention interpolation of depth.

Dense decoder features ``f[..., H, W, C]`` are concatenated with a positional
encoding and flattened to ``f_d[..., HW, C+P]``. Features at the landmark
pixels are gathered, joined with an encoding of the landmark depth and passed
through a small masked self-attention transformer (the refinement stage).
The refined landmark features act as queries against every pixel::

    A     = softmax_over_landmarks((f_d @ W_k) @ (f_s @ W_q).T / sqrt(C_a))
    d_out = A @ d_in
    m     = (A @ (f_s @ W_v)) @ W_o

and ``d_out``, ``m`` are merged back into ``f`` by a 1x1 convolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .scenes import LandmarkSet
from .tensor import Tensor

__all__ = [
    "BlockConfig", "BlockOutput", "positional_encoding", "depth_encoding",
    "extract_sparse_features", "refine", "attention_volume", "interpolate",
    "fuse", "sparseformer_forward", "init_block_params", "block_param_shapes",
]


@dataclass(frozen=True)
class BlockConfig:
    pe_bands: int = 6
    attention_width: int = 32
    refine: bool = True
    refine_layers: int = 2
    refine_heads: int = 2
    d_max: float = 10.0

    @property
    def pe_channels(self) -> int:
        return 2 + 4 * self.pe_bands


@dataclass
class BlockOutput:
    features: Tensor       # [..., H, W, C]
    d_out: Tensor          # [..., H, W]
    confidence: Tensor     # [..., H, W]
    attention: Tensor      # [..., H*W, N]
    empty: np.ndarray      # bool [...]; True where no landmark was valid


def _norm_coords(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def positional_encoding(height: int, width: int, n_bands: int = 6,
                        dtype=np.float64) -> np.ndarray:
    """``[H, W, 2 + 4F]``: normalised x, y then sin/cos(2^j pi x), sin/cos(2^j pi y)."""
    yy, xx = np.meshgrid(_norm_coords(height), _norm_coords(width), indexing="ij")
    chans = [xx, yy]
    for j in range(n_bands):
        fx, fy = (2.0 ** j) * math.pi * xx, (2.0 ** j) * math.pi * yy
        chans += [np.sin(fx), np.cos(fx), np.sin(fy), np.cos(fy)]
    return np.stack(chans, axis=-1).astype(dtype)


def depth_encoding(d_in: np.ndarray, d_max: float) -> np.ndarray:
    """Bounded single-channel depth code ``log(1 + d) / log(1 + d_max)``."""
    return np.log1p(np.maximum(d_in, 0)) / math.log1p(d_max)


def _coarse_index(uv: np.ndarray, stride: int, height: int, width: int) -> np.ndarray:
    col = np.clip(uv[..., 0] // stride, 0, width - 1)
    row = np.clip(uv[..., 1] // stride, 0, height - 1)
    return row * width + col


def extract_sparse_features(f_pe, uv, valid, stride: int = 1) -> Tensor:
    """Gather per-landmark rows of ``f_pe[..., H, W, D]``; padded entries are zero."""
    f_pe = T.as_tensor(f_pe)
    H, W, D = f_pe.shape[-3:]
    idx = _coarse_index(np.asarray(uv), stride, H, W)
    flat = T.reshape(f_pe, f_pe.shape[:-3] + (H * W, D))
    rows = T.gather_rows(flat, idx)
    return rows * np.asarray(valid, rows.dtype)[..., None]


def _self_attention(h: Tensor, valid: np.ndarray, p, prefix: str, n_heads: int) -> Tensor:
    q, k, v = (h @ p[prefix + name] for name in ("wq", "wk", "wv"))
    width = h.shape[-1]
    bounds = np.linspace(0, width, n_heads + 1).round().astype(int)
    key_mask = np.asarray(valid, bool)[..., None, :]
    heads = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        qh, kh, vh = (T.slice_last(t, lo, hi) for t in (q, k, v))
        logits = (qh @ T.transpose(kh)) * (1.0 / math.sqrt(hi - lo))
        heads.append(T.softmax_masked(logits, key_mask) @ vh)
    merged = heads[0] if len(heads) == 1 else T.concat(heads, axis=-1)
    return merged @ p[prefix + "wo"]


def refine(f_s, d_in, valid, params, n_layers: int = 2, n_heads: int = 2,
           d_max: float = 10.0) -> Tensor:
    """Depth-augmented pre-norm self-attention over landmark features.

    Padded rows neither attend nor are attended to, and are zero on output.
    """
    f_s = T.as_tensor(f_s)
    valid = np.asarray(valid, bool)
    if not valid.any(axis=-1).all():
        raise ValueError("refine: no valid landmarks")
    keep = valid[..., None].astype(f_s.dtype)
    enc = (depth_encoding(np.asarray(d_in, float), d_max)[..., None] * keep).astype(f_s.dtype)
    x = T.concat([f_s, enc], axis=-1)
    for layer in range(n_layers):
        pre = f"refine.{layer}."
        h = T.layer_norm(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
        x = x + _self_attention(h, valid, params, pre, n_heads)
        h = T.layer_norm(x, params[pre + "ln2_g"], params[pre + "ln2_b"])
        x = x + T.relu(h @ params[pre + "w1"]) @ params[pre + "w2"]
    return x * keep


def attention_volume(f_d, f_s_refined, valid, w_q, w_k) -> Tensor:
    """Row-stochastic ``A[..., HW, N]``; invalid landmark columns are exactly 0."""
    valid = np.asarray(valid, bool)
    if not valid.any(axis=-1).all():
        raise ValueError("attention_volume: no valid landmarks")
    keys = T.as_tensor(f_d) @ w_k
    queries = T.as_tensor(f_s_refined) @ w_q
    return T.attention_softmax(keys, queries, valid[..., None, :], 1.0 / math.sqrt(keys.shape[-1]))


def interpolate(A, d_in, f_s_refined, w_v, w_o) -> tuple[Tensor, Tensor]:
    """Interpolated depth ``A @ d_in`` and confidence ``(A @ (f_s W_v)) W_o``, both ``[..., HW]``."""
    A = T.as_tensor(A)
    # (A V) W_o == A (V W_o); the right-hand grouping keeps the HW-sized product 1 column wide
    value = (T.as_tensor(f_s_refined) @ w_v) @ w_o
    d_col = T.as_tensor(np.asarray(d_in, A.dtype)[..., None], A)
    both = A @ T.concat([d_col, value], axis=-1)
    lead = A.shape[:-1]
    return (T.reshape(T.slice_last(both, 0, 1), lead),
            T.reshape(T.slice_last(both, 1, 2), lead))


def fuse(f, d_out, m, w, b) -> Tensor:
    """``relu(conv1x1(concat(f, d_out, m)))`` back to ``C`` channels."""
    f = T.as_tensor(f)
    cat = T.concat([f, T.reshape(d_out, f.shape[:-1] + (1,)),
                    T.reshape(m, f.shape[:-1] + (1,))], axis=-1)
    return T.relu(T.conv2d(cat, w, b))


def sparseformer_forward(f, landmarks: LandmarkSet, stride: int, params,
                         cfg: BlockConfig = BlockConfig()) -> BlockOutput:
    """Run one block on ``f[..., H, W, C]`` with full-resolution landmarks.

    Frames without any valid landmark pass ``f`` through unchanged and get a
    zero ``d_out``; their ``empty`` flag is set.
    """
    f = T.as_tensor(f)
    H, W, C = f.shape[-3:]
    lead = f.shape[:-3]
    valid = np.broadcast_to(np.asarray(landmarks.valid, bool), lead + landmarks.valid.shape[-1:])
    has = valid.any(axis=-1)
    safe = valid | ~has[..., None]
    pe = positional_encoding(H, W, cfg.pe_bands, f.dtype)
    f_pe = T.concat([f, np.broadcast_to(pe, lead + pe.shape)], axis=-1)
    f_d = T.reshape(f_pe, lead + (H * W, f_pe.shape[-1]))

    f_s = extract_sparse_features(f_pe, landmarks.uv, safe, stride)
    if cfg.refine:
        f_ref = refine(f_s, landmarks.d_in, safe, params, cfg.refine_layers,
                       cfg.refine_heads, cfg.d_max)
    else:
        enc = depth_encoding(np.asarray(landmarks.d_in, float), cfg.d_max)[..., None] * safe[..., None]
        f_ref = T.concat([f_s, enc.astype(f.dtype)], axis=-1)

    A = attention_volume(f_d, f_ref, safe, params["wq"], params["wk"])
    d_in = np.where(safe, landmarks.d_in, 0)
    d_out, m = interpolate(A, d_in, f_ref, params["wv"], params["wo"])
    d_out = T.reshape(d_out, lead + (H, W))
    m = T.reshape(m, lead + (H, W))
    fused = fuse(f, d_out, m, params["fuse_w"], params["fuse_b"])
    if not has.all():
        on = has.astype(f.dtype)
        fused = fused * on[..., None, None, None] + f * (1 - on)[..., None, None, None]
        d_out = d_out * on[..., None, None]
        m = m * on[..., None, None]
        A = A * on[..., None, None]
    return BlockOutput(fused, d_out, m, A, ~has)


def block_param_shapes(channels: int, cfg: BlockConfig) -> dict[str, tuple[int, ...]]:
    d_f = channels + cfg.pe_channels
    d_r = d_f + 1
    ca = cfg.attention_width
    shapes = {"wq": (d_r, ca), "wk": (d_f, ca), "wv": (d_r, ca), "wo": (ca, 1),
              "fuse_w": (1, 1, channels + 2, channels), "fuse_b": (channels,)}
    if cfg.refine:
        for layer in range(cfg.refine_layers):
            pre = f"refine.{layer}."
            shapes.update({pre + "ln1_g": (d_r,), pre + "ln1_b": (d_r,),
                           pre + "wq": (d_r, d_r), pre + "wk": (d_r, d_r),
                           pre + "wv": (d_r, d_r), pre + "wo": (d_r, d_r),
                           pre + "ln2_g": (d_r,), pre + "ln2_b": (d_r,),
                           pre + "w1": (d_r, 2 * d_r), pre + "w2": (2 * d_r, d_r)})
    return shapes


def init_block_params(channels: int, cfg: BlockConfig, rng: np.random.Generator,
                      dtype=np.float32) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in block_param_shapes(channels, cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf == "fuse_w":
            arr = rng.normal(0, math.sqrt(2.0 / shape[2]), shape)
        elif leaf == "w1":
            arr = rng.normal(0, math.sqrt(2.0 / shape[0]), shape)
        elif leaf in ("w2", "wo") and name.startswith("refine"):
            arr = rng.normal(0, 0.5 / math.sqrt(shape[0]), shape)
        else:
            arr = rng.normal(0, 1.0 / math.sqrt(shape[0]), shape)
        out[name] = arr.astype(dtype)
    return out
