"""Latency of the blend stage vs. instance count, against a per-RoI conv head.

Timings are medians of repeated runs after a warmup discard and are only ever
compared relative to each other on the same machine.
"""

from __future__ import annotations

import csv
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import blender as BL
from . import tensor as T
from .roi import BoxProposal, roi_sample

BASE_SIZE = 32  # bases of a 64x64 image at stride 2
STRIDE = 2
HEAD_WIDTH = 16
HEAD_LAYERS = 4


@dataclass
class BenchResult:
    kernel: str
    D: list[int]
    median_us: list[float]
    exponent: float
    marginal_us: float
    machine: dict = field(default_factory=dict)

    def rows(self) -> list[list]:
        return [[self.kernel, d, f"{t:.3f}", f"{self.exponent:.4f}"] for d, t in zip(self.D, self.median_us)]


def machine_descriptor() -> dict:
    return {
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "python": platform.python_version(),
        "numpy": np.__version__,
        "cpus": os.cpu_count(),
    }


def fit_exponent(D, times) -> float:
    """Least-squares slope of log(time) against log(D); 1.0 for a single point."""
    d = np.asarray(D, dtype=float)
    t = np.asarray(times, dtype=float)
    keep = d > 0
    d, t = d[keep], t[keep]
    if len(np.unique(d)) < 2:
        return 1.0
    return float(np.polyfit(np.log(d), np.log(t), 1)[0])


def marginal_cost(D, times) -> float:
    """Least-squares slope of time against D (microseconds per instance)."""
    d = np.asarray(D, dtype=float)
    if len(np.unique(d)) < 2:
        return float(times[0] / max(d[0], 1))
    return float(np.polyfit(d, np.asarray(times, dtype=float), 1)[0])


def median_time_us(fn, repeats: int = 20, warmup: int = 3) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return float(np.median(samples) * 1e6)


# --------------------------------------------------------------------------
# fixed inputs and kernels


@dataclass
class BlendInputs:
    bases: np.ndarray
    att: np.ndarray
    boxes: list[BoxProposal]


def make_inputs(cfg: BL.BlendConfig, D: int, seed: int = 0, dtype=np.float32) -> BlendInputs:
    rng = np.random.default_rng([seed, D])
    bases = rng.standard_normal((1, cfg.K, BASE_SIZE, BASE_SIZE)).astype(dtype)
    att = rng.standard_normal((D, cfg.K, cfg.M, cfg.M)).astype(dtype)
    size = BASE_SIZE * STRIDE
    boxes = []
    for _ in range(D):
        w, h = rng.uniform(8, 32, size=2)
        x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
        boxes.append(BoxProposal(x, y, x + w, y + h))
    return BlendInputs(bases, att, boxes)


def blend_kernel(cfg: BL.BlendConfig, inp: BlendInputs, threads: int = 1) -> np.ndarray:
    """Crop + interpolate + normalize + blend; optional chunked threading over D."""
    if threads <= 1 or len(inp.boxes) < 2:
        return BL.blend_pipeline(inp.bases, inp.att, inp.boxes, cfg, STRIDE)
    chunks = np.array_split(np.arange(len(inp.boxes)), threads)
    chunks = [c for c in chunks if len(c)]

    def run(idx):
        return BL.blend_pipeline(inp.bases, inp.att[idx], [inp.boxes[i] for i in idx], cfg, STRIDE)

    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(run, chunks))
    return np.concatenate(parts)


def head_weights(K: int, seed: int = 0, dtype=np.float32):
    rng = np.random.default_rng([seed, 0x4EAD])
    layers = []
    c_in = K
    for _ in range(HEAD_LAYERS):
        w = (rng.standard_normal((HEAD_WIDTH, c_in, 3, 3)) * np.sqrt(2 / (9 * c_in))).astype(dtype)
        layers.append((w, np.zeros(HEAD_WIDTH, dtype)))
        c_in = HEAD_WIDTH
    return layers


def roi_head_kernel(cfg: BL.BlendConfig, inp: BlendInputs, layers) -> np.ndarray:
    """Stand-in two-stage mask head: four 3x3 convs on every R x R crop."""
    x = roi_sample(inp.bases, inp.boxes, cfg.R, STRIDE, cfg.bottom_sampling)
    if len(x) == 0:
        return np.zeros((0, HEAD_WIDTH, cfg.R, cfg.R), dtype=x.dtype)
    for w, b in layers:
        x = T.relu(T.conv2d(x, w, b, pad=1))
    return x


# --------------------------------------------------------------------------
# FLOP accounting (closed form, per instance)


def blend_flops(R: int, K: int) -> int:
    """Bilinear crop (8), attention interpolation (8), softmax (4), multiply-add (2) per element."""
    return 22 * K * R * R


def head_flops(R: int, K: int, width: int = HEAD_WIDTH, layers: int = HEAD_LAYERS) -> int:
    macs = 9 * R * R * (K * width + (layers - 1) * width * width)
    return 2 * macs


# --------------------------------------------------------------------------
# benchmarks


def _result(kernel, Ds, times) -> BenchResult:
    return BenchResult(kernel, list(Ds), times, fit_exponent(Ds, times), marginal_cost(Ds, times), machine_descriptor())


def bench_blend(cfg: BL.BlendConfig, D_list, repeats: int = 20, warmup: int = 3, threads: int = 1) -> BenchResult:
    if repeats < 20 or warmup < 3:
        raise ValueError("use at least 20 timed repeats and 3 warmup runs")
    times = []
    for D in D_list:
        inp = make_inputs(cfg, D)
        times.append(median_time_us(lambda: blend_kernel(cfg, inp, threads), repeats, warmup))
    label = "blend" if threads <= 1 else f"blend_parallel{threads}"
    return _result(label, D_list, times)


def bench_roi_head_baseline(cfg: BL.BlendConfig, D_list, repeats: int = 20, warmup: int = 3) -> BenchResult:
    if repeats < 20 or warmup < 3:
        raise ValueError("use at least 20 timed repeats and 3 warmup runs")
    layers = head_weights(cfg.K)
    times = []
    for D in D_list:
        inp = make_inputs(cfg, D)
        times.append(median_time_us(lambda: roi_head_kernel(cfg, inp, layers), repeats, warmup))
    return _result("roi_head", D_list, times)


def write_csv(path, results: list[BenchResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kernel", "D", "median_us", "exponent"])
        for r in results:
            w.writerows(r.rows())


def write_svg(path, results: list[BenchResult], width: int = 480, height: int = 320) -> None:
    """Log-log line chart of median time vs D, one polyline per kernel."""
    pts = [(d, t) for r in results for d, t in zip(r.D, r.median_us) if d > 0]
    if not pts:
        return
    lx = np.log10([p[0] for p in pts])
    ly = np.log10([p[1] for p in pts])
    x0, x1 = lx.min(), max(lx.max(), lx.min() + 1e-9)
    y0, y1 = ly.min(), max(ly.max(), ly.min() + 1e-9)
    pad = 40
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

    def xy(d, t):
        x = pad + (np.log10(d) - x0) / (x1 - x0) * (width - 2 * pad)
        y = height - pad - (np.log10(t) - y0) / (y1 - y0) * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" font-size="12">D (log)</text>',
        f'<text x="12" y="{height // 2}" font-size="12" transform="rotate(-90 12 {height // 2})">median us (log)</text>',
    ]
    for i, r in enumerate(results):
        c = colors[i % len(colors)]
        poly = " ".join(xy(d, t) for d, t in zip(r.D, r.median_us) if d > 0)
        lines.append(f'<polyline fill="none" stroke="{c}" stroke-width="2" points="{poly}"/>')
        lines.append(f'<text x="{pad + 4}" y="{pad + 14 * i}" fill="{c}" font-size="12">{r.kernel} (exp {r.exponent:.2f})</text>')
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
