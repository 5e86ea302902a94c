"""Timing and memory of the attention path (attention volume + interpolation)."""
from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .block import BlockConfig, attention_volume, interpolate

__all__ = ["BenchRow", "bench_attention", "fit_exponent", "BENCH_HEADER"]

BENCH_HEADER = ["height", "width", "hw", "n_landmarks", "median_s", "peak_bytes"]


@dataclass
class BenchRow:
    height: int
    width: int
    n_landmarks: int
    median_s: float
    peak_bytes: int

    @property
    def hw(self) -> int:
        return self.height * self.width

    def csv(self) -> str:
        return f"{self.height},{self.width},{self.hw},{self.n_landmarks},{self.median_s:.6g},{self.peak_bytes}"


def _inputs(hw, n, channels, cfg, rng, dtype):
    d_f = channels + cfg.pe_channels
    ca = cfg.attention_width
    return dict(
        f_d=rng.normal(size=(hw, d_f)).astype(dtype),
        f_s=rng.normal(size=(n, d_f + 1)).astype(dtype),
        valid=np.ones(n, bool),
        d_in=rng.uniform(1, 10, n).astype(dtype),
        wq=(rng.normal(size=(d_f + 1, ca)) / np.sqrt(d_f)).astype(dtype),
        wk=(rng.normal(size=(d_f, ca)) / np.sqrt(d_f)).astype(dtype),
        wv=rng.normal(size=(d_f + 1, ca)).astype(dtype),
        wo=rng.normal(size=(ca, 1)).astype(dtype),
    )


def _run(x):
    A = attention_volume(x["f_d"], x["f_s"], x["valid"], x["wq"], x["wk"])
    return interpolate(A, x["d_in"], x["f_s"], x["wv"], x["wo"])


def bench_attention(heights, n_landmarks, repeats: int = 5, channels: int = 16,
                    cfg: BlockConfig = BlockConfig(), widths=None, seed: int = 0,
                    dtype=np.float32) -> list[BenchRow]:
    """Median forward wall time and peak extra allocation for each (resolution, N)."""
    heights = list(heights)
    widths = heights if widths is None else list(widths)
    if not heights or not list(n_landmarks):
        raise ValueError("need at least one resolution and one landmark count")
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_landmarks:
        for h, w in zip(heights, widths):
            x = _inputs(h * w, int(n), channels, cfg, rng, dtype)
            _run(x)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                _run(x)
                times.append(time.perf_counter() - t0)
            tracemalloc.start()
            base = tracemalloc.get_traced_memory()[0]
            _run(x)
            peak = tracemalloc.get_traced_memory()[1] - base
            tracemalloc.stop()
            rows.append(BenchRow(h, w, int(n), float(np.median(times)), int(peak)))
    return rows


def fit_exponent(rows: list[BenchRow], n_landmarks: int | None = None) -> float:
    """Least-squares slope of log(time) against log(HW) at one landmark count."""
    pick = [r for r in rows if n_landmarks is None or r.n_landmarks == n_landmarks]
    if len({r.hw for r in pick}) < 2:
        raise ValueError("need at least two resolutions to fit an exponent")
    hw = np.log([r.hw for r in pick])
    t = np.log([r.median_s for r in pick])
    return float(np.polyfit(hw, t, 1)[0])
