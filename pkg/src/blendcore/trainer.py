"""Desk-scale bottom module + top head trained end to end on toy scenes.

Bottom module: three 3x3 width-16 ReLU convs (the second one strided, giving
base stride 2) followed by a 1x1 conv to K bases.  The top head is a single
3x3 conv to K*M*M attention logits, evaluated only at the feature cell holding
each ground-truth box center.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as AD
from . import blender as BL
from .blender import BlendConfig
from .synthdata import Scene, rasterize_gt
from .tensor import load_bt4, save_bt4

log = logging.getLogger(__name__)

WIDTH = 16
STRIDE = 2
LAYERS = (  # name, c_out, kernel, stride
    ("conv1", WIDTH, 3, 1),
    ("conv2", WIDTH, 3, STRIDE),
    ("conv3", WIDTH, 3, 1),
)

# feature locations clamped into the map while reading attentions
clamp_counter: Counter = Counter()


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    blend: BlendConfig = field(default_factory=BlendConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def lr_at(self, it: int) -> float:
        """Step schedule: x0.1 at 2/3 and again at 8/9 of the run."""
        lr = self.lr
        if it >= (2 * self.iterations) // 3:
            lr *= 0.1
        if it >= (8 * self.iterations) // 9:
            lr *= 0.1
        return lr


@dataclass
class ModelParams:
    cfg: BlendConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def init_params(cfg: BlendConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Kaiming fan-in init, zero biases, zero attention head."""
    rng = np.random.default_rng([seed, 0xB1E])
    tensors: dict[str, np.ndarray] = {}
    c_in = 1
    for name, c_out, k, _ in LAYERS:
        std = np.sqrt(2.0 / (c_in * k * k))
        tensors[f"{name}.w"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        tensors[f"{name}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    std = np.sqrt(1.0 / WIDTH)
    tensors["basis.w"] = (rng.standard_normal((cfg.K, WIDTH, 1, 1)) * std).astype(dtype)
    tensors["basis.b"] = np.zeros(cfg.K, dtype=dtype)
    if cfg.learns_attention:
        tensors["top.w"] = np.zeros((cfg.attention_channels, WIDTH, 3, 3), dtype=dtype)
        tensors["top.b"] = np.zeros(cfg.attention_channels, dtype=dtype)
    return ModelParams(cfg, tensors)


def feature_location(box, fh: int, fw: int) -> tuple[int, int]:
    cx, cy = box.center
    x, y = int(np.floor(cx / STRIDE)), int(np.floor(cy / STRIDE))
    cx_c, cy_c = min(max(x, 0), fw - 1), min(max(y, 0), fh - 1)
    if (cx_c, cy_c) != (x, y):
        clamp_counter["box_center"] += 1
    return cy_c, cx_c


@dataclass
class Forward:
    tape: AD.Tape
    vars: dict[str, AD.Var]
    bases: AD.Var
    features: AD.Var
    blended: AD.Var  # (D, 1, R, R); probabilities in sigmoid mode
    logits: AD.Var   # true logits
    scores: np.ndarray | None = None
    regions: np.ndarray | None = None


def forward(params: ModelParams, scenes: list[Scene]) -> Forward:
    """Record the whole batch forward pass on a fresh tape."""
    cfg = params.cfg
    tape = AD.Tape()
    v = {k: tape.var(a, k) for k, a in params.tensors.items()}
    dtype = params.tensors["conv1.w"].dtype
    images = np.concatenate([s.image for s in scenes]).astype(dtype) - 0.5
    x = tape.var(images, "images")
    for name, _, k, s in LAYERS:
        x = AD.relu(AD.conv2d(x, v[f"{name}.w"], v[f"{name}.b"], stride=s, pad=k // 2))
    features = x
    bases = AD.conv2d(features, v["basis.w"], v["basis.b"])

    boxes, bidx, ys, xs = [], [], [], []
    fh, fw = features.value.shape[2:]
    for n, scene in enumerate(scenes):
        for inst in scene.instances:
            boxes.append(inst.box)
            bidx.append(n)
            y, xx = feature_location(inst.box, fh, fw)
            ys.append(y)
            xs.append(xx)

    att = None
    if cfg.learns_attention:
        a = AD.point_conv(features, v["top.w"], v["top.b"], bidx, ys, xs)
        att = AD.reshape(a, (len(boxes), cfg.K, cfg.M, cfg.M))

    regions = AD.roi_sample(bases, boxes, cfg.R, STRIDE, cfg.bottom_sampling, bidx)
    if cfg.merge_mode == "assembler":
        scores = tape.var(BL.one_hot_scores(len(boxes), cfg.R, cfg.M, dtype), "one_hot_scores")
    else:
        up = AD.interpolate_attention(att, cfg.R, cfg.top_interp)
        scores = AD.normalize_scores(up, cfg.merge_mode)
    m = AD.blend(regions, scores, cfg.merge_mode)
    logits = AD.mask_logit(m, cfg.merge_mode)
    return Forward(tape, v, bases, features, m, logits, scores.value, regions.value)


def forward_instance(params: ModelParams, scene: Scene, cfg: BlendConfig | None = None) -> np.ndarray:
    """Blended (D, 1, R, R) output for one scene using its ground-truth boxes."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    if cfg is not None and cfg != params.cfg:
        raise BL.ConfigError(f"params were built for {params.cfg.label}, not {cfg.label}")
    return forward(params, [scene]).blended.value


def instance_logits(params: ModelParams, scene: Scene) -> np.ndarray:
    return forward(params, [scene]).logits.value


def loss_bce(logits, target) -> float:
    """Mean per-pixel BCE of sigmoid(logits) against a binary target."""
    m = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError(f"logits {m.shape} and target {t.shape} differ")
    per = np.maximum(m, 0) - m * t + np.log1p(np.exp(-np.abs(m)))
    return float(per.mean())


class TargetCache:
    """Training targets per scene at a fixed R, computed once."""

    def __init__(self, R: int):
        self.R = R
        self._cache: dict[int, np.ndarray] = {}

    def get(self, scene: Scene) -> np.ndarray:
        key = id(scene)
        if key not in self._cache:
            self._cache[key] = np.concatenate(
                [rasterize_gt(inst.mask, inst.box, self.R) for inst in scene.instances]
            )
        return self._cache[key]


def loss_and_grads(params: ModelParams, scenes: list[Scene], targets: TargetCache):
    fwd = forward(params, scenes)
    target = np.concatenate([targets.get(s) for s in scenes]).astype(fwd.logits.value.dtype)
    loss = AD.bce_with_logits(fwd.logits, target)
    grads = AD.backward(fwd.tape, loss)
    out = {}
    for k, var in fwd.vars.items():
        out[k] = grads.get(var.id, np.zeros_like(var.value)).astype(var.value.dtype, copy=False)
    return float(loss.value), out


def _batches(n: int, batch: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch + 1 if n >= batch else 1, batch):
            yield perm[i : i + batch]


def train(train_scenes: list[Scene], tcfg: TrainConfig, log_every: int = 0):
    """SGD with momentum; returns (final params, curve rows of (iter, loss, lr))."""
    params = init_params(tcfg.blend, tcfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    targets = TargetCache(tcfg.blend.R)
    rng = np.random.default_rng([tcfg.seed, 0xDA7A])
    batches = _batches(len(train_scenes), min(tcfg.batch_size, len(train_scenes)), rng)
    curve = []
    for it in range(tcfg.iterations):
        lr = tcfg.lr_at(it)
        batch = [train_scenes[i] for i in next(batches)]
        loss, grads = loss_and_grads(params, batch, targets)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        for k, p in params.tensors.items():
            vel = velocity[k]
            vel *= tcfg.momentum
            vel += grads[k]
            p -= np.asarray(lr, dtype=p.dtype) * vel
        curve.append((it, loss, lr))
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.4f lr %g", it, loss, lr)
    return params, curve


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "lr"])
        for it, loss, lr in curve:
            w.writerow([it, repr(float(loss)), repr(float(lr))])


# --------------------------------------------------------------------------
# checkpoints: BT4 tensors + params.csv "name,file,n,c,h,w"


def _as4(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (4 - a.ndim)) if a.ndim < 4 else a


def save_checkpoint(params: ModelParams, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "params.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "file", "n", "c", "h", "w"])
        for name, arr in params.tensors.items():
            fname = f"{name}.bt4"
            save_bt4(out / fname, _as4(arr))
            w.writerow([name, fname, *_as4(arr).shape])
    (out / "blend.json").write_text(json.dumps(asdict(params.cfg), sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not (path / "params.csv").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    cfg = BlendConfig(**json.loads((path / "blend.json").read_text()))
    tensors = {}
    with open(path / "params.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            arr = load_bt4(path / row["file"])
            if row["name"].endswith(".b"):
                arr = arr.reshape(-1)
            tensors[row["name"]] = arr
    return ModelParams(cfg, tensors)
