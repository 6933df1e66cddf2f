"""Per-instance mask logits from cropped bases and attention maps.

The pipeline per instance ``d``::

    r_d = roi_sample(bases, box_d)              # K x R x R
    a'_d = interpolate(a_d, M -> R)             # K x R x R
    s_d = softmax over K of a'_d
    m_d = sum_k s_d[k] * r_d[k]                 # 1 x R x R

``weighted_sum`` is the M=1 special case, ``assembler`` replaces the learned
scores by fixed one-hot tiles, and ``single_basis_sigmoid`` (K=1) multiplies
sigmoid(attention) with sigmoid(base), so its "logit" is actually a probability.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .roi import BoxProposal

MERGE_MODES = ("blender", "weighted_sum", "assembler", "single_basis_sigmoid")
INTERP_MODES = ("nearest", "bilinear")


class ConfigError(ValueError):
    """Raised for an inconsistent blend configuration."""


@dataclass(frozen=True)
class BlendConfig:
    R: int = 56
    K: int = 4
    M: int = 14
    top_interp: str = "bilinear"
    bottom_sampling: str = "bilinear"
    merge_mode: str = "blender"

    def __post_init__(self):
        for key in ("R", "K", "M"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        if self.top_interp not in INTERP_MODES:
            raise ConfigError(f"top_interp must be one of {INTERP_MODES}, got {self.top_interp!r}")
        if self.bottom_sampling not in INTERP_MODES:
            raise ConfigError(f"bottom_sampling must be one of {INTERP_MODES}, got {self.bottom_sampling!r}")
        if self.merge_mode not in MERGE_MODES:
            raise ConfigError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.M > self.R:
            raise ConfigError(f"M={self.M} exceeds R={self.R}")
        if self.merge_mode == "single_basis_sigmoid" and self.K != 1:
            raise ConfigError("single_basis_sigmoid requires K=1")
        if self.merge_mode == "weighted_sum" and self.M != 1:
            raise ConfigError("weighted_sum requires M=1")
        if self.merge_mode == "assembler":
            if self.K != self.M * self.M:
                raise ConfigError(f"assembler requires K == M*M, got K={self.K}, M={self.M}")
            if self.R % self.M:
                raise ConfigError(f"assembler requires R divisible by M, got R={self.R}, M={self.M}")

    @property
    def abbrev(self) -> str:
        return f"{self.R}_{self.K}_{self.M}"

    @property
    def label(self) -> str:
        return f"{self.abbrev}/{self.merge_mode}"

    @property
    def learns_attention(self) -> bool:
        return self.merge_mode != "assembler"

    @property
    def attention_channels(self) -> int:
        return self.K * self.M * self.M if self.learns_attention else 0

    def with_(self, **kw) -> "BlendConfig":
        return replace(self, **kw)


def parse_abbrev(text: str) -> tuple[int, int, int]:
    """``"56_4_14"`` -> (R, K, M)."""
    parts = str(text).split("_")
    if len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise ConfigError(f"expected an R_K_M abbreviation like '56_4_14', got {text!r}")
    R, K, M = (int(p) for p in parts)
    return R, K, M


def config_from_abbrev(text: str, **kw) -> BlendConfig:
    R, K, M = parse_abbrev(text)
    return BlendConfig(R=R, K=K, M=M, **kw)


# --------------------------------------------------------------------------
# crop -> interpolate -> normalize -> blend, numpy level


def interpolate_attention(att, R: int, mode: str = "bilinear") -> np.ndarray:
    att = T.as_tensor4(att)
    M = att.shape[2]
    if att.shape[2] != att.shape[3]:
        raise T.ShapeError(f"attention maps must be square, got {att.shape[2:]}")
    if R < M:
        raise ConfigError(f"cannot interpolate attention {M}x{M} down to R={R}")
    return T.resize(att, R, R, mode)


def normalize_scores(att_up, mode: str = "blender") -> np.ndarray:
    if mode == "single_basis_sigmoid":
        return T.sigmoid(att_up)
    return T.softmax_channels(att_up)


def blend(regions, scores, mode: str = "blender") -> np.ndarray:
    regions = T.as_tensor4(regions)
    scores = T.as_tensor4(scores)
    if regions.shape != scores.shape:
        raise T.ShapeError(f"regions {regions.shape} and scores {scores.shape} differ")
    if mode == "single_basis_sigmoid":
        regions = T.sigmoid(regions)
    return T.reduce_sum_channels(T.elementwise_mul(scores, regions))


def one_hot_scores(D: int, R: int, M: int, dtype=np.float64) -> np.ndarray:
    """Fixed assembler scores: channel i*M+j is 1 on tile (i, j) of an M x M grid."""
    eye = np.eye(M * M, dtype=dtype).reshape(M * M, M, M)
    tiles = T.nearest_resize(eye[None], R, R)
    return np.broadcast_to(tiles, (D, M * M, R, R)).copy()


def assemble_fcis(regions, R: int, M: int) -> np.ndarray:
    """Direct tile copy: pixel in tile (i, j) comes from channel i*M + j."""
    regions = T.as_tensor4(regions)
    D, K = regions.shape[:2]
    if K != M * M:
        raise ConfigError(f"assembler requires K == M*M, got K={K}, M={M}")
    if R % M:
        raise ConfigError(f"assembler requires R divisible by M, got R={R}, M={M}")
    out = np.empty((D, 1, R, R), dtype=regions.dtype)
    t = R // M
    for i in range(M):
        for j in range(M):
            out[:, 0, i * t : (i + 1) * t, j * t : (j + 1) * t] = regions[
                :, i * M + j, i * t : (i + 1) * t, j * t : (j + 1) * t
            ]
    return out


def weighted_sum_yolact(regions, coeffs) -> np.ndarray:
    """Per-pixel sum_k coeffs[d, k] * regions[d, k]."""
    regions = T.as_tensor4(regions)
    coeffs = np.asarray(coeffs)
    if coeffs.shape != regions.shape[:2]:
        raise T.ShapeError(f"coeffs {coeffs.shape} do not match regions {regions.shape[:2]}")
    scores = np.broadcast_to(coeffs[:, :, None, None], regions.shape)
    return T.reduce_sum_channels(T.elementwise_mul(scores, regions))


def blend_pipeline(bases, att, boxes, cfg: BlendConfig, stride: float, batch_idx=None) -> np.ndarray:
    """Full crop -> interpolate -> normalize -> blend path without a tape."""
    from .roi import roi_sample

    regions = roi_sample(bases, boxes, cfg.R, stride, cfg.bottom_sampling, batch_idx)
    if cfg.merge_mode == "assembler":
        scores = one_hot_scores(len(regions), cfg.R, cfg.M, regions.dtype)
    else:
        up = interpolate_attention(att, cfg.R, cfg.top_interp)
        scores = normalize_scores(up, cfg.merge_mode)
    return blend(regions, scores, cfg.merge_mode)


def mask_logit(m, mode: str = "blender", eps: float = 1e-6) -> np.ndarray:
    """Convert blended output to a true logit (identity except for sigmoid mode)."""
    if mode != "single_basis_sigmoid":
        return m
    p = np.clip(m, eps, 1 - eps)
    return np.log(p) - np.log1p(-p)


# --------------------------------------------------------------------------
# pasting


def paste_map(values, box: BoxProposal, image_h: int, image_w: int) -> np.ndarray:
    """Resample an R x R map into the box on a float (image_h, image_w) canvas.

    Pixels whose centers fall inside the box are sampled bilinearly with the
    half-pixel convention; everything else is zero.
    """
    if image_h < 1 or image_w < 1:
        raise ValueError("image dimensions must be positive")
    values = np.asarray(values, dtype=np.float64)
    values = values.reshape(values.shape[-2:])
    R_h, R_w = values.shape
    canvas = np.zeros((image_h, image_w))

    def axis(lo, hi, size, R):
        centers = np.arange(size) + 0.5
        inside = np.nonzero((centers >= lo) & (centers < hi))[0]
        p = (centers[inside] - lo) / (hi - lo) * R - 0.5
        p = np.clip(p, 0, R - 1)
        i0 = np.floor(p).astype(np.int64)
        i1 = np.minimum(i0 + 1, R - 1)
        return inside, i0, i1, p - i0

    ys, y0, y1, fy = axis(box.y1, box.y2, image_h, R_h)
    xs, x0, x1, fx = axis(box.x1, box.x2, image_w, R_w)
    if len(ys) == 0 or len(xs) == 0:
        return canvas
    fy, fx = fy[:, None], fx[None, :]
    canvas[np.ix_(ys, xs)] = (
        values[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + values[np.ix_(y0, x1)] * (1 - fy) * fx
        + values[np.ix_(y1, x0)] * fy * (1 - fx)
        + values[np.ix_(y1, x1)] * fy * fx
    )
    return canvas


def paste_mask(logits, box: BoxProposal, image_h: int, image_w: int, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask: pasted sigmoid(logits) above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    prob = T.sigmoid(np.asarray(logits, dtype=np.float64))
    return paste_map(prob, box, image_h, image_w) > threshold
