"""Central finite-difference checks of tape gradients (64-bit only)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .block import BlockConfig, init_block_params, sparseformer_forward
from .model import ModelConfig, forward, init_params, multiscale_loss
from .scenes import LandmarkSet
from .tensor import NonFiniteError, Tape, Tensor

__all__ = ["GradCheckReport", "grad_check", "tensor_suite", "sparseformer_suite",
           "model_suite", "run_suites", "SUITE_TOLERANCES"]

SUITE_TOLERANCES = {"tensor": 1e-5, "sparseformer": 1e-4, "model": 1e-3}


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tol: float
    n_coords: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_coords} coords)"


def _scalar(y: Tensor) -> float:
    if y.size != 1:
        raise ValueError(f"function must return a scalar, got shape {y.shape}")
    v = y.item()
    if not np.isfinite(v):
        raise NonFiniteError("function value is not finite")
    return v


def grad_check(f: Callable, inputs, eps: float = 1e-5, tol: float = 1e-5,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-6,
               name: str = "") -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``inputs`` is an array or a dict of arrays; ``f`` receives Tensors of the
    same structure. The relative error of a coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``; when
    ``max_coords`` is set, at most that many coordinates per input are probed.
    """
    single = not isinstance(inputs, dict)
    arrays = {"x": inputs} if single else dict(inputs)
    for k, v in arrays.items():
        if np.asarray(v).dtype != np.float64:
            raise TypeError(f"grad_check needs float64 inputs ({k} is {np.asarray(v).dtype})")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def call(values):
        return f(values["x"]) if single else f(values)

    with Tape() as tape:
        watched = {k: tape.watch(v) for k, v in arrays.items()}
        y = call(watched)
    _scalar(y)
    grads = tape.backward(y)
    analytic = {k: grads[watched[k]] for k in arrays}

    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for k, base in arrays.items():
        n = base.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else \
            np.sort(rng.choice(n, size=max_coords, replace=False))
        for c in coords:
            vals = {kk: Tensor(vv) for kk, vv in arrays.items()}
            bumped = base.copy().reshape(-1)
            bumped[c] += eps
            vals[k] = Tensor(bumped.reshape(base.shape))
            up = _scalar(call(vals))
            bumped[c] -= 2 * eps
            vals[k] = Tensor(bumped.reshape(base.shape))
            down = _scalar(call(vals))
            num = (up - down) / (2 * eps)
            ana = float(analytic[k].reshape(-1)[c])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            count += 1
    return GradCheckReport(name or "grad_check", worst, tol, count)


def _proj(rng, shape):
    return rng.uniform(-1, 1, shape)


def tensor_suite(n_shapes: int = 20, seed: int = 0, tol: float = 1e-5) -> list[GradCheckReport]:
    """Every differentiable tensor op on ``n_shapes`` random shapes, inputs in [-2, 2]."""
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2, 2, shape)

    def dim(lo=1, hi=5):
        return int(rng.integers(lo, hi + 1))

    cases: dict[str, list] = {k: [] for k in (
        "matmul", "add", "sub", "mul", "relu", "softplus", "transpose", "reshape",
        "concat", "slice_last", "gather_rows", "softmax_masked", "attention_softmax", "layer_norm",
        "conv2d_k1", "conv2d_k3", "conv2d_k3_s2", "upsample_nearest", "sum", "mean",
        "l1_loss", "l2_loss")}
    for _ in range(n_shapes):
        m, k, n = dim(), dim(), dim()
        R = _proj(rng, (m, n))
        cases["matmul"].append(({"a": u(m, k), "b": u(k, n)},
                                lambda v, R=R: T.sum(T.matmul(v["a"], v["b"]) * R)))
        shp = (dim(), dim())
        R = _proj(rng, shp)
        cases["add"].append(({"a": u(*shp), "b": u(shp[1])}, lambda v, R=R: T.sum((v["a"] + v["b"]) * R)))
        cases["sub"].append(({"a": u(*shp), "b": u(*shp)}, lambda v, R=R: T.sum((v["a"] - v["b"]) * R)))
        cases["mul"].append(({"a": u(*shp), "b": u(1, shp[1])}, lambda v, R=R: T.sum(v["a"] * v["b"] * R)))
        cases["relu"].append((u(*shp), lambda x, R=R: T.sum(T.relu(x) * R)))
        cases["softplus"].append((u(*shp), lambda x, R=R: T.sum(T.softplus(x) * R)))
        cases["transpose"].append((u(*shp), lambda x, R=R: T.sum(T.transpose(x) * R.T)))
        cases["reshape"].append((u(*shp), lambda x, R=R: T.sum(T.reshape(x, (-1,)) * R.reshape(-1))))
        c2 = dim()
        R2 = _proj(rng, (shp[0], shp[1] + c2))
        cases["concat"].append(({"a": u(*shp), "b": u(shp[0], c2)},
                                lambda v, R=R2: T.sum(T.concat([v["a"], v["b"]], -1) * R)))
        lo = int(rng.integers(0, shp[1]))
        hi = int(rng.integers(lo + 1, shp[1] + 1))
        Rs = _proj(rng, (shp[0], hi - lo))
        cases["slice_last"].append((u(*shp), lambda x, R=Rs, lo=lo, hi=hi: T.sum(T.slice_last(x, lo, hi) * R)))
        rows, cols, nidx = dim(), dim(), dim(1, 6)
        idx = rng.integers(0, rows, nidx)
        Rg = _proj(rng, (nidx, cols))
        cases["gather_rows"].append((u(rows, cols), lambda x, R=Rg, idx=idx: T.sum(T.gather_rows(x, idx) * R)))
        mask = rng.random(shp) < 0.7
        mask[:, 0] = True
        cases["softmax_masked"].append((u(*shp), lambda x, R=R, mask=mask: T.sum(T.softmax_masked(x, mask) * R)))
        ca = dim()
        Ra = _proj(rng, shp)
        cases["attention_softmax"].append((
            {"k": u(shp[0], ca), "q": u(shp[1], ca)},
            lambda v, R=Ra, mask=mask[:1]: T.sum(T.attention_softmax(v["k"], v["q"], mask, 0.5) * R)))
        # width >= 3: at width 2 the normalised output is +-1 and its tiny
        # gradient is below float64 finite-difference resolution
        ln = shp[1] + 2
        cases["layer_norm"].append(({"x": u(shp[0], ln), "g": u(ln), "b": u(ln)},
                                    lambda v, R=_proj(rng, (shp[0], ln)):
                                    T.sum(T.layer_norm(v["x"], v["g"], v["b"]) * R)))
        H, W, ci, co = dim(1, 5), dim(1, 5), dim(1, 3), dim(1, 3)
        for key, ksz, stride in (("conv2d_k1", 1, 1), ("conv2d_k3", 3, 1), ("conv2d_k3_s2", 3, 2)):
            Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
            Rc = _proj(rng, (Ho, Wo, co))
            cases[key].append(({"x": u(H, W, ci), "w": u(ksz, ksz, ci, co), "b": u(co)},
                               lambda v, R=Rc, s=stride: T.sum(T.conv2d(v["x"], v["w"], v["b"], s) * R)))
        Ru = _proj(rng, (2 * H, 2 * W, ci))
        cases["upsample_nearest"].append((u(H, W, ci), lambda x, R=Ru: T.sum(T.upsample_nearest(x) * R)))
        cases["sum"].append((u(*shp), lambda x, R=_proj(rng, shp[1]): T.sum(T.sum(x, axis=0) * R)))
        cases["mean"].append((u(*shp), lambda x, R=_proj(rng, shp[0]): T.sum(T.mean(x, axis=1) * R)))
        gt = u(*shp)
        lmask = rng.random(shp) < 0.6
        lmask.flat[0] = True
        cases["l1_loss"].append((u(*shp), lambda x, gt=gt, m=lmask: T.l1_loss(x, gt, m)))
        cases["l2_loss"].append((u(*shp), lambda x, gt=gt, m=lmask: T.l2_loss(x, gt, m)))

    reports = []
    for name, items in cases.items():
        worst = GradCheckReport(f"tensor.{name}", 0.0, tol, 0)
        for inputs, fn in items:
            r = grad_check(fn, inputs, tol=tol)
            worst.n_coords += r.n_coords
            worst.max_rel_error = max(worst.max_rel_error, r.max_rel_error)
        reports.append(worst)
    return reports


def _random_landmarks(rng, n, height, width, n_valid=None) -> LandmarkSet:
    n_valid = n if n_valid is None else n_valid
    uv = np.stack([rng.integers(0, width, n), rng.integers(0, height, n)], -1).astype(np.int32)
    valid = np.arange(n) < n_valid
    d_in = np.where(valid, rng.uniform(1, 5, n), 0).astype(np.float32)
    uv[~valid] = 0
    return LandmarkSet(uv, d_in, valid, np.zeros(n, bool))


def sparseformer_suite(seed: int = 0, tol: float = 1e-4, max_coords: int = 40) -> list[GradCheckReport]:
    """Full block at H=W=4, C=2, N=3 w.r.t. input features and every parameter."""
    rng = np.random.default_rng(seed)
    cfg = BlockConfig(pe_bands=6, attention_width=4, refine_layers=2, refine_heads=2)
    params = {k: v.astype(np.float64) for k, v in init_block_params(2, cfg, rng, np.float64).items()}
    for k in params:
        if k.endswith("_g") or k.endswith("_b"):
            params[k] = params[k] + rng.uniform(-0.3, 0.3, params[k].shape)
    lm = _random_landmarks(rng, 3, 4, 4)
    R = [_proj(rng, s) for s in ((4, 4, 2), (4, 4), (4, 4))]

    def fn(v):
        out = sparseformer_forward(v["f"], lm, 1, v, cfg)
        return T.sum(out.features * R[0]) + T.sum(out.d_out * R[1]) + T.sum(out.confidence * R[2])

    inputs = {"f": rng.uniform(-2, 2, (4, 4, 2)), **params}
    return [grad_check(fn, inputs, tol=tol, max_coords=max_coords, name="sparseformer.block")]


MICRO_MODEL = ModelConfig(encoder_channels=(4, 4, 4, 4), decoder_channels=(4, 4, 4, 4),
                          stem_channels=4, pe_bands=1, attention_width=4,
                          refine_layers=1, refine_heads=2, d_max=10.0)


def model_suite(seed: int = 0, tol: float = 1e-3, max_coords: int = 12) -> list[GradCheckReport]:
    """End-to-end multi-scale loss of a micro model on a 16x16 image."""
    rng = np.random.default_rng(seed)
    params = init_params(MICRO_MODEL, seed, np.float64)
    image = rng.uniform(0, 1, (16, 16, 3))
    lm = _random_landmarks(rng, 4, 16, 16, n_valid=3)
    gt = rng.uniform(1, 5, (16, 16))
    valid = rng.random((16, 16)) < 0.8

    def fn(v):
        return multiscale_loss(forward(v, image, lm, MICRO_MODEL), gt, valid)

    return [grad_check(fn, params, tol=tol, max_coords=max_coords, name="model.micro")]


def run_suites(which: str = "all", seed: int = 0) -> list[GradCheckReport]:
    suites = {"tensor": tensor_suite, "sparseformer": sparseformer_suite, "model": model_suite}
    if which != "all" and which not in suites:
        raise ValueError(f"unknown suite {which!r}")
    reports = []
    for name, fn in suites.items():
        if which in ("all", name):
            reports += fn(seed=seed)
    return reports
