"""PGM renderings of bases, attentions, products and masks for one scene."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .blender import paste_map
from .metrics import predict_masks
from .synthdata import Scene
from .trainer import ModelParams, forward


def write_pgm(path, img: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Binary P5 greyscale; values map linearly from [lo, hi] to [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def _panels(maps: list[np.ndarray], gap: int = 2) -> np.ndarray:
    h, w = maps[0].shape
    out = np.zeros((h, len(maps) * (w + gap) - gap))
    for k, m in enumerate(maps):
        out[:, k * (w + gap) : k * (w + gap) + w] = m
    return out


def render(params: ModelParams, scene: Scene, out_dir) -> list[Path]:
    """Write the blending decomposition of ``scene``; returns the files written.

    basis_k.pgm         base map k upsampled to image size
    inst_d_attention.pgm  K panels of normalized scores pasted into the box (0..1)
    inst_d_products.pgm   K panels of score * cropped base pasted into the box
    inst_d_mask.pgm       final pasted mask
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fwd = forward(params, [scene])
    h, w = scene.image.shape[2:]
    K = params.cfg.K
    written = []

    def emit(name, img, lo=None, hi=None):
        write_pgm(out / name, img, lo, hi)
        written.append(out / name)

    emit("image.pgm", scene.image[0, 0], 0.0, 1.0)
    bases = T.nearest_resize(fwd.bases.value.astype(np.float64), h, w)
    for k in range(K):
        emit(f"basis_{k}.pgm", bases[0, k])

    scores, regions = fwd.scores, fwd.regions
    products = scores * regions
    plo, phi = float(products.min()), float(products.max())
    masks = predict_masks(params, scene)
    for d, inst in enumerate(scene.instances):
        att = [paste_map(scores[d, k], inst.box, h, w) for k in range(K)]
        emit(f"inst_{d}_attention.pgm", _panels(att), 0.0, 1.0)
        prod = [paste_map(products[d, k], inst.box, h, w) for k in range(K)]
        emit(f"inst_{d}_products.pgm", _panels(prod), plo, phi)
        emit(f"inst_{d}_mask.pgm", masks[d].astype(float), 0.0, 1.0)
    return written
