"""Binary scene/checkpoint containers, dataset manifests and PNM images.

All binary formats are little-endian.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .scenes import LandmarkSet, Scene, SceneConfig

__all__ = [
    "write_scene", "read_scene", "write_manifest", "read_manifest",
    "write_checkpoint", "read_checkpoint", "write_pgm", "write_ppm", "read_pnm",
    "parse_kv", "format_kv", "FormatError",
]

SCENE_MAGIC = b"SPFS"
SCENE_VERSION = 1
CKPT_MAGIC = b"SPFC"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected container layout."""


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_scene(path, scene: Scene) -> None:
    H, W = scene.gt_depth.shape
    lm = scene.landmarks
    n = len(lm)
    parts = [
        SCENE_MAGIC,
        struct.pack("<4I", SCENE_VERSION, H, W, n),
        np.ascontiguousarray(scene.gt_depth, "<f4").tobytes(),
        np.ascontiguousarray(scene.gt_valid, "u1").tobytes(),
        np.ascontiguousarray(scene.image, "<f4").tobytes(),
        np.ascontiguousarray(lm.uv, "<i4").tobytes(),
        np.ascontiguousarray(lm.d_in, "<f4").tobytes(),
        np.ascontiguousarray(lm.valid, "u1").tobytes(),
        np.ascontiguousarray(lm.is_outlier, "u1").tobytes(),
    ]
    _atomic_write(Path(path), b"".join(parts))


def read_scene(path) -> Scene:
    buf = Path(path).read_bytes()
    if buf[:4] != SCENE_MAGIC:
        raise FormatError(f"{path}: not a scene file")
    version, H, W, n = struct.unpack_from("<4I", buf, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"{path}: unsupported scene version {version}")
    off = 20

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    try:
        gt = take("<f4", H * W).reshape(H, W).astype(np.float32)
        valid = take("u1", H * W).reshape(H, W).astype(bool)
        image = take("<f4", H * W * 3).reshape(H, W, 3).astype(np.float32)
        uv = take("<i4", n * 2).reshape(n, 2).astype(np.int32)
        d_in = take("<f4", n).astype(np.float32)
        lvalid = take("u1", n).astype(bool)
        outl = take("u1", n).astype(bool)
    except ValueError as exc:
        raise FormatError(f"{path}: truncated scene file") from exc
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    return Scene(image, gt, valid, LandmarkSet(uv, d_in, lvalid, outl))


def parse_kv(text: str) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def write_manifest(directory, cfg: SceneConfig, filenames, seed: int) -> Path:
    path = Path(directory) / "manifest.txt"
    lines = ["# sparseformer scene dataset", f"seed={seed}"]
    lines += [f"{k}={v}" for k, v in cfg.to_dict().items()]
    lines += [f"scene={name}" for name in filenames]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())
    return path


def read_manifest(path) -> tuple[SceneConfig, list[Path], int]:
    """Return the dataset config, scene paths in manifest order, and seed."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    cfg_items, files, seed = {}, [], 0
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k == "scene":
            files.append(path.parent / v)
        elif k == "seed":
            seed = int(v)
        else:
            cfg_items[k] = v
    return SceneConfig.from_dict(cfg_items), files, seed


def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Config as ``key=value`` text plus named float32 tensors."""
    text = format_kv(config).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode()
        arr = np.asarray(arr)
        parts += [struct.pack("<I", len(raw)), raw,
                  struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape),
                  np.ascontiguousarray(arr, "<f4").tobytes()]
    _atomic_write(Path(path), b"".join(parts))


def read_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, n_text = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = parse_kv(buf[off:off + n_text].decode())
    off += n_text
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n_name].decode()
        off += n_name
        (ndim,) = struct.unpack_from("<I", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 4)
        off += 4 + 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes")
    return config, tensors


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, float) * 255), 0, 255).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary greyscale (P5); ``img`` in [0, 1]."""
    H, W = img.shape
    _atomic_write(Path(path), f"P5\n{W} {H}\n255\n".encode() + _to_u8(img).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    """Binary RGB (P6); ``img`` in [0, 1], shape ``[H, W, 3]``."""
    H, W, _ = img.shape
    _atomic_write(Path(path), f"P6\n{W} {H}\n255\n".encode() + _to_u8(img).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file written by this module back as uint8."""
    buf = Path(path).read_bytes()
    fields, off = [], 0
    while len(fields) < 4:
        while buf[off:off + 1].isspace():
            off += 1
        end = off
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[off:end].decode())
        off = end
    off += 1
    magic, W, H, _ = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    channels = {"P5": 1, "P6": 3}.get(magic)
    if channels is None:
        raise FormatError(f"{path}: not a P5/P6 file")
    data = np.frombuffer(buf, np.uint8, H * W * channels, off)
    return data.reshape((H, W) if channels == 1 else (H, W, 3))
