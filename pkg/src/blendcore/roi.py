"""Crop base maps inside box proposals onto a fixed R x R grid.

One sample per output bin, placed at the bin center.  Boxes are given in image
pixels and divided by the base stride; a base cell ``j`` has its center at
``j + 0.5`` in base units.  Samples outside the base map read zeros.

Each crop is separable: ``out = Wy @ bases @ Wx.T`` with per-box sampling
matrices, which makes the backward pass the transposed product.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ShapeError, as_tensor4, nearest_index

MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class BoxProposal:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def validate(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(coords)):
            raise ValueError(f"non-finite box {coords}")
        if self.width <= MIN_EXTENT or self.height <= MIN_EXTENT:
            raise ValueError(f"degenerate box {coords}")


def bin_centers(lo: float, hi: float, R: int, stride: float) -> np.ndarray:
    """Continuous base-map coordinates of the R bin centers along one axis."""
    return lo / stride + (np.arange(R) + 0.5) * ((hi - lo) / stride) / R


def _weights(p: np.ndarray, size: int, mode: str) -> np.ndarray:
    """Interpolation weights of sample positions ``p`` (..., R) over ``size`` cells."""
    cells = np.arange(size)
    if mode == "bilinear":
        # triangle kernel == two-tap linear interpolation with zero padding
        return np.maximum(0.0, 1.0 - np.abs(p[..., None] - cells))
    if mode == "nearest":
        return (nearest_index(p)[..., None] == cells).astype(np.float64)
    raise ValueError(f"unknown sampling mode {mode!r}")


def sampling_matrix(lo: float, hi: float, R: int, stride: float, size: int, mode: str = "bilinear"):
    """(R, size) matrix mapping a base axis onto the R bin samples."""
    return _weights(bin_centers(lo, hi, R, stride) - 0.5, size, mode)


def _matrices(boxes, R, stride, h, w, mode, dtype):
    if R < 1:
        raise ValueError("R must be >= 1")
    for box in boxes:
        box.validate()
    c = np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64).reshape(-1, 4)
    steps = (np.arange(R) + 0.5) / R
    py = (c[:, 1:2] + steps * (c[:, 3:4] - c[:, 1:2])) / stride - 0.5
    px = (c[:, 0:1] + steps * (c[:, 2:3] - c[:, 0:1])) / stride - 0.5
    return _weights(py, h, mode).astype(dtype), _weights(px, w, mode).astype(dtype)


def _batch_index(batch_idx, n_boxes: int, n: int) -> np.ndarray:
    if batch_idx is None:
        batch_idx = np.zeros(n_boxes, dtype=np.int64)
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    if batch_idx.shape != (n_boxes,):
        raise ShapeError("batch_idx must have one entry per box")
    if n_boxes and (batch_idx.min() < 0 or batch_idx.max() >= n):
        raise ShapeError("batch_idx out of range")
    return batch_idx


def roi_sample(bases, boxes, R: int, stride: float, mode: str = "bilinear", batch_idx=None) -> np.ndarray:
    """Crop ``bases`` (N, K, H, W) to a (D, K, R, R) region stack."""
    bases = as_tensor4(bases)
    n, k, h, w = bases.shape
    boxes = list(boxes)
    bidx = _batch_index(batch_idx, len(boxes), n)
    if not boxes:
        return np.zeros((0, k, R, R), dtype=bases.dtype)
    wy, wx = _matrices(boxes, R, stride, h, w, mode, bases.dtype)
    return wy[:, None] @ bases[bidx] @ wx[:, None].transpose(0, 1, 3, 2)


def roi_sample_backward(g, base_shape, boxes, R, stride, mode="bilinear", batch_idx=None):
    n, k, h, w = base_shape
    boxes = list(boxes)
    bidx = _batch_index(batch_idx, len(boxes), n)
    grad = np.zeros(base_shape, dtype=g.dtype)
    if not boxes:
        return grad
    wy, wx = _matrices(boxes, R, stride, h, w, mode, g.dtype)
    per_box = wy[:, None].transpose(0, 1, 3, 2) @ g @ wx[:, None]
    # sequential accumulation keeps summation order fixed
    for d in range(len(boxes)):
        grad[bidx[d]] += per_box[d]
    return grad


def roi_align_bilinear(bases, boxes, R: int, stride: float, batch_idx=None) -> np.ndarray:
    return roi_sample(bases, boxes, R, stride, "bilinear", batch_idx)


def roi_pool_nearest(bases, boxes, R: int, stride: float, batch_idx=None) -> np.ndarray:
    return roi_sample(bases, boxes, R, stride, "nearest", batch_idx)


# --------------------------------------------------------------------------
# box CSV "instance_id,x1,y1,x2,y2"

BOX_HEADER = ["instance_id", "x1", "y1", "x2", "y2"]


def write_boxes_csv(path, boxes) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BOX_HEADER)
        for i, b in enumerate(boxes):
            writer.writerow([i, repr(float(b.x1)), repr(float(b.y1)), repr(float(b.x2)), repr(float(b.y2))])


def read_boxes_csv(path) -> list[BoxProposal]:
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BOX_HEADER:
            raise ValueError(f"{path}: expected header {','.join(BOX_HEADER)}")
        rows = sorted(reader, key=lambda r: int(r["instance_id"]))
    return [BoxProposal(*(float(r[k]) for k in BOX_HEADER[1:])) for r in rows]
