"""Tape-based reverse-mode differentiation over the numpy kernels.

A :class:`Tape` records every op in call order.  :func:`backward` walks the
records in exact reverse order and accumulates vector-Jacobian products
additively into a ``{var id: gradient}`` map.

Box coordinates, strides and sizes are static arguments; they never receive
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import blender as BL
from . import roi as ROI
from . import tensor as T


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "id", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", id: int, name: str = ""):
        self.value = value
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(id={self.id}, name={self.name!r}, shape={self.value.shape})"


@dataclass
class Record:
    op: str
    inputs: tuple[Var, ...]
    output: Var
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    _next_id: int = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def var(self, value, name: str = "") -> Var:
        """Register a leaf value."""
        return Var(np.asarray(value), self, self._new_id(), name)

    def record(self, op: str, inputs, value, vjp) -> Var:
        out = Var(value, self, self._new_id(), op)
        self.records.append(Record(op, tuple(inputs), out, vjp))
        return out


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every value on ``tape``."""
    if loss.tape is not tape:
        raise TapeError("loss was not produced on this tape")
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output.id)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None:
                continue
            if inp.id in grads:
                grads[inp.id] = grads[inp.id] + gi
            else:
                grads[inp.id] = gi
    return grads


def _tape_of(*vs: Var) -> Tape:
    return vs[0].tape


# --------------------------------------------------------------------------
# differentiable ops


def conv2d(x: Var, w: Var, b: Var, stride: int = 1, pad: int = 0) -> Var:
    out = T.conv2d(x.value, w.value, b.value, stride, pad)

    def vjp(g):
        return T.conv2d_backward(g, x.value, w.value, stride, pad)

    return _tape_of(x).record("conv2d", (x, w, b), out, vjp)


def point_conv(x: Var, w: Var, b: Var, batch_idx, ys, xs) -> Var:
    out = T.point_conv(x.value, w.value, b.value, batch_idx, ys, xs)

    def vjp(g):
        return T.point_conv_backward(g, x.value, w.value, batch_idx, ys, xs)

    return _tape_of(x).record("point_conv", (x, w, b), out, vjp)


def relu(x: Var) -> Var:
    return x.tape.record("relu", (x,), T.relu(x.value), lambda g: (T.relu_backward(g, x.value),))


def sigmoid(x: Var) -> Var:
    y = T.sigmoid(x.value)
    return x.tape.record("sigmoid", (x,), y, lambda g: (T.sigmoid_backward(g, y),))


def softmax_channels(x: Var) -> Var:
    y = T.softmax_channels(x.value)
    return x.tape.record("softmax_channels", (x,), y, lambda g: (T.softmax_channels_backward(g, y),))


def resize(x: Var, out_h: int, out_w: int, mode: str = "bilinear") -> Var:
    h, w = x.value.shape[2:]
    out = T.resize(x.value, out_h, out_w, mode)
    return x.tape.record(
        f"{mode}_resize", (x,), out, lambda g: (T.resize_backward(g, h, w, mode),)
    )


def mul(a: Var, b: Var) -> Var:
    out = T.elementwise_mul(a.value, b.value)
    return a.tape.record("elementwise_mul", (a, b), out, lambda g: (g * b.value, g * a.value))


def reduce_sum_channels(a: Var) -> Var:
    out = T.reduce_sum_channels(a.value)
    shape = a.value.shape
    return a.tape.record(
        "reduce_sum_channels", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def roi_sample(bases: Var, boxes, R: int, stride: float, mode: str = "bilinear", batch_idx=None) -> Var:
    boxes = list(boxes)
    out = ROI.roi_sample(bases.value, boxes, R, stride, mode, batch_idx)
    shape = bases.value.shape

    def vjp(g):
        return (ROI.roi_sample_backward(g, shape, boxes, R, stride, mode, batch_idx),)

    name = "roi_align_bilinear" if mode == "bilinear" else "roi_pool_nearest"
    return bases.tape.record(name, (bases,), out, vjp)


def mask_logit(m: Var, mode: str = "blender", eps: float = 1e-6) -> Var:
    if mode != "single_basis_sigmoid":
        return m
    p = m.value
    out = BL.mask_logit(p, mode, eps)
    inside = (p > eps) & (p < 1 - eps)

    def vjp(g):
        safe = np.clip(p, eps, 1 - eps)
        return (g * inside / (safe * (1 - safe)),)

    return m.tape.record("mask_logit", (m,), out, vjp)


def bce_with_logits(logits: Var, target) -> Var:
    """Mean per-pixel binary cross-entropy of sigmoid(logits) against ``target``."""
    m = logits.value
    t = np.asarray(target, dtype=m.dtype)
    if t.shape != m.shape:
        raise T.ShapeError(f"target {t.shape} does not match logits {m.shape}")
    per = np.maximum(m, 0) - m * t + np.log1p(np.exp(-np.abs(m)))
    count = max(m.size, 1)
    out = np.asarray(per.sum() / count, dtype=m.dtype).reshape(())

    def vjp(g):
        return (g * (T.sigmoid(m) - t) / count,)

    return logits.tape.record("bce_with_logits", (logits,), out, vjp)


def sum_all(x: Var) -> Var:
    shape = x.value.shape
    out = np.asarray(x.value.sum(), dtype=x.value.dtype).reshape(())
    return x.tape.record("sum", (x,), out, lambda g: (np.full(shape, g, dtype=x.value.dtype),))


def dot_const(x: Var, c) -> Var:
    """Scalar <x, c> for a constant array ``c`` (projection used by grad checks)."""
    c = np.asarray(c, dtype=x.value.dtype)
    out = np.asarray((x.value * c).sum(), dtype=x.value.dtype).reshape(())
    return x.tape.record("dot_const", (x,), out, lambda g: (g * c,))


# --------------------------------------------------------------------------
# blender path on the tape


def interpolate_attention(att: Var, R: int, mode: str = "bilinear") -> Var:
    M = att.value.shape[2]
    if R < M:
        raise BL.ConfigError(f"cannot interpolate attention {M}x{M} down to R={R}")
    return resize(att, R, R, mode)


def normalize_scores(att_up: Var, mode: str = "blender") -> Var:
    if mode == "single_basis_sigmoid":
        return sigmoid(att_up)
    return softmax_channels(att_up)


def blend(regions: Var, scores: Var, mode: str = "blender") -> Var:
    if regions.value.shape != scores.value.shape:
        raise T.ShapeError(f"regions {regions.value.shape} and scores {scores.value.shape} differ")
    if mode == "single_basis_sigmoid":
        regions = sigmoid(regions)
    return reduce_sum_channels(mul(scores, regions))


def blend_pipeline(bases: Var, att: Var | None, boxes, cfg: BL.BlendConfig, stride: float, batch_idx=None) -> Var:
    """Crop, interpolate, normalize and blend; returns (D, 1, R, R) outputs."""
    regions = roi_sample(bases, boxes, cfg.R, stride, cfg.bottom_sampling, batch_idx)
    if cfg.merge_mode == "assembler":
        fixed = BL.one_hot_scores(len(regions.value), cfg.R, cfg.M, regions.value.dtype)
        scores = bases.tape.var(fixed, "one_hot_scores")
    else:
        scores = normalize_scores(interpolate_attention(att, cfg.R, cfg.top_interp), cfg.merge_mode)
    return blend(regions, scores, cfg.merge_mode)
