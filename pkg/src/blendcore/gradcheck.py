"""Central finite-difference checks for every differentiable op.

Each registered case builds double-precision inputs from a seeded uniform(-1, 1)
draw and a function mapping tape variables to an output.  The output is
projected onto a fixed random direction so a single backward pass yields the
full vector-Jacobian product, which is compared element by element against
central differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as AD
from .blender import BlendConfig
from .roi import BoxProposal

EPS = 1e-5
TOL = 1e-4


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    max_rel_err: float
    tol: float
    passed: bool

    def csv_row(self) -> str:
        return f"{self.op},{self.max_rel_err:.3e},{self.tol:g},{int(self.passed)}"


@dataclass
class Case:
    shapes: dict[str, tuple]
    fn: Callable  # (tape, {name: Var}) -> Var
    nudge: bool = False  # keep |x| >= 1e-3 away from relu kinks
    low: float = -1.0
    high: float = 1.0


REGISTRY: dict[str, Case] = {}


def register(name: str, case: Case) -> None:
    REGISTRY[name] = case


def relative_error(ga: np.ndarray, gf: np.ndarray) -> float:
    """max |ga - gf| scaled by max(|ga| + |gf|), floored at 1e-8."""
    diff = np.abs(ga - gf).max(initial=0.0)
    scale = (np.abs(ga) + np.abs(gf)).max(initial=0.0)
    return float(diff / max(1e-8, scale))


def _draw(case: Case, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in case.shapes.items():
        x = rng.uniform(case.low, case.high, size=shape)
        if case.nudge:
            x = np.where(np.abs(x) < 1e-3, np.copysign(1e-3, x) + np.sign(x) * 1e-3, x)
            x = np.where(x == 0, 2e-3, x)
        out[name] = x
    return out


def _evaluate(case: Case, inputs, direction=None):
    tape = AD.Tape()
    vs = {k: tape.var(v, k) for k, v in inputs.items()}
    out = case.fn(tape, vs)
    if direction is None:
        return tape, vs, out
    return tape, vs, AD.dot_const(out, direction)


def grad_check(name: str, seed: int = 0, eps: float = EPS, tol: float = TOL) -> GradCheckReport:
    case = REGISTRY[name]
    inputs = _draw(case, seed)
    _, _, out = _evaluate(case, inputs)
    direction = np.random.default_rng(seed + 1).uniform(-1, 1, size=out.value.shape)
    tape, vs, loss = _evaluate(case, inputs, direction)
    grads = AD.backward(tape, loss)

    worst = 0.0
    for key, x0 in inputs.items():
        ga = grads.get(vs[key].id, np.zeros_like(x0))
        gf = np.zeros_like(x0)
        flat = x0.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += eps
            minus[i] -= eps
            fp = _evaluate(case, {**inputs, key: plus.reshape(x0.shape)}, direction)[2].value
            fm = _evaluate(case, {**inputs, key: minus.reshape(x0.shape)}, direction)[2].value
            gf.reshape(-1)[i] = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error(ga, gf))
    return GradCheckReport(name, worst, tol, worst <= tol)


def run_all(seed: int = 0) -> list[GradCheckReport]:
    return [grad_check(name, seed) for name in REGISTRY]


# --------------------------------------------------------------------------
# registered cases

_BOXES = [BoxProposal(1.3, 0.7, 9.1, 10.2), BoxProposal(-2.0, 3.5, 6.5, 13.0), BoxProposal(4.2, 4.4, 11.0, 8.9)]
_BIDX = [0, 1, 1]


register("conv2d", Case(
    {"x": (2, 2, 5, 5), "w": (3, 2, 3, 3), "b": (3,)},
    lambda t, v: AD.conv2d(v["x"], v["w"], v["b"], stride=1, pad=1),
))
register("conv2d_stride2", Case(
    {"x": (1, 2, 6, 6), "w": (2, 2, 3, 3), "b": (2,)},
    lambda t, v: AD.conv2d(v["x"], v["w"], v["b"], stride=2, pad=1),
))
register("conv2d_1x1", Case(
    {"x": (1, 3, 4, 4), "w": (2, 3, 1, 1), "b": (2,)},
    lambda t, v: AD.conv2d(v["x"], v["w"], v["b"]),
))
register("point_conv", Case(
    {"x": (2, 2, 5, 5), "w": (6, 2, 3, 3), "b": (6,)},
    lambda t, v: AD.point_conv(v["x"], v["w"], v["b"], [0, 1, 1, 0], [0, 4, 2, 2], [3, 0, 2, 2]),
))
register("relu", Case({"x": (1, 3, 4, 4)}, lambda t, v: AD.relu(v["x"]), nudge=True))
register("sigmoid", Case({"x": (1, 3, 4, 4)}, lambda t, v: AD.sigmoid(v["x"])))
register("softmax_channels", Case({"x": (1, 4, 2, 2)}, lambda t, v: AD.softmax_channels(v["x"])))
register("bilinear_resize", Case({"x": (1, 2, 3, 4)}, lambda t, v: AD.resize(v["x"], 7, 5, "bilinear")))
register("nearest_resize", Case({"x": (1, 2, 3, 4)}, lambda t, v: AD.resize(v["x"], 7, 5, "nearest")))
register("elementwise_mul", Case(
    {"a": (2, 3, 3, 3), "b": (2, 3, 3, 3)}, lambda t, v: AD.mul(v["a"], v["b"])
))
register("reduce_sum_channels", Case({"x": (2, 4, 3, 3)}, lambda t, v: AD.reduce_sum_channels(v["x"])))
register("reshape", Case({"x": (3, 8, 1, 1)}, lambda t, v: AD.reshape(v["x"], (3, 2, 2, 2))))
register("roi_align_bilinear", Case(
    {"bases": (2, 3, 6, 6)},
    lambda t, v: AD.roi_sample(v["bases"], _BOXES, 4, 2.0, "bilinear", _BIDX),
))
register("roi_pool_nearest", Case(
    {"bases": (2, 3, 6, 6)},
    lambda t, v: AD.roi_sample(v["bases"], _BOXES, 4, 2.0, "nearest", _BIDX),
))
register("blend", Case(
    {"regions": (2, 4, 5, 5), "scores": (2, 4, 5, 5)},
    lambda t, v: AD.blend(v["regions"], v["scores"]),
))
register("blend_single_basis_sigmoid", Case(
    {"regions": (2, 1, 5, 5), "scores": (2, 1, 5, 5)},
    lambda t, v: AD.blend(v["regions"], v["scores"], "single_basis_sigmoid"),
))
register("mask_logit", Case(
    {"m": (2, 1, 4, 4)}, lambda t, v: AD.mask_logit(v["m"], "single_basis_sigmoid"), low=0.05, high=0.95
))
register("bce_with_logits", Case(
    {"m": (2, 1, 4, 4)},
    lambda t, v: AD.bce_with_logits(v["m"], (np.arange(32).reshape(2, 1, 4, 4) % 3 == 0)),
))


def _pipeline(cfg: BlendConfig):
    def fn(t, v):
        return AD.blend_pipeline(v["bases"], v.get("att"), _BOXES, cfg, 2.0, _BIDX)

    shapes = {"bases": (2, cfg.K, 6, 6)}
    if cfg.learns_attention:
        shapes["att"] = (len(_BOXES), cfg.K, cfg.M, cfg.M)
    return Case(shapes, fn)


register("blend_pipeline", _pipeline(BlendConfig(R=6, K=3, M=3)))
register("blend_pipeline_nearest", _pipeline(
    BlendConfig(R=6, K=2, M=2, top_interp="nearest", bottom_sampling="nearest")
))
register("blend_pipeline_weighted_sum", _pipeline(BlendConfig(R=5, K=3, M=1, merge_mode="weighted_sum")))
register("blend_pipeline_assembler", _pipeline(BlendConfig(R=4, K=4, M=2, merge_mode="assembler")))
register("blend_pipeline_single_basis", _pipeline(
    BlendConfig(R=5, K=1, M=2, merge_mode="single_basis_sigmoid")
))


def _composed(t, v):
    # conv -> relu -> bases / attention -> blend -> BCE
    cfg = BlendConfig(R=4, K=2, M=2)
    feat = AD.relu(AD.conv2d(v["x"], v["w1"], v["b1"], stride=2, pad=1))
    bases = AD.conv2d(feat, v["wb"], v["bb"])
    att = AD.reshape(AD.point_conv(feat, v["wt"], v["bt"], [0, 0], [1, 2], [2, 1]), (2, 2, 2, 2))
    boxes = [BoxProposal(0.5, 1.0, 7.0, 6.5), BoxProposal(2.0, 2.5, 8.0, 8.0)]
    m = AD.blend_pipeline(bases, att, boxes, cfg, 2.0)
    target = np.zeros((2, 1, 4, 4))
    target[:, :, 1:3, :2] = 1
    return AD.bce_with_logits(m, target)


register("composed_conv_relu_blend_bce", Case(
    {
        "x": (1, 1, 8, 8), "w1": (3, 1, 3, 3), "b1": (3,), "wb": (2, 3, 1, 1),
        "bb": (2,), "wt": (8, 3, 3, 3), "bt": (8,),
    },
    _composed,
))
