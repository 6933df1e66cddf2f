"""Seeded toy instance-segmentation scenes of rectangles, discs and rings.

Every scene is a pure function of ``(spec, split, index)``.  In overlap scenes
every instance after the first overlaps an earlier one.  Instance masks are
amodal (overlapping shapes both own the shared pixels); the image is the
per-pixel max of class intensities plus Gaussian noise, clamped to [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .roi import BoxProposal, roi_align_bilinear, write_boxes_csv
from .tensor import save_bt4

SHAPE_CLASSES = ("rectangle", "disc", "ring")
CLASS_INTENSITY = {"rectangle": 0.4, "disc": 0.7, "ring": 1.0}
OVERLAP_MIN = 0.10  # intersection / smaller mask area
OVERLAP_MAX = 0.60
MAX_INSTANCES = 6
_SPLIT_ID = {"train": 0, "val": 1}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 0
    n_train: int = 200
    n_val: int = 50
    overlap_fraction: float = 0.5
    classes: tuple[str, ...] = SHAPE_CLASSES
    size: int = 64
    noise: float = 0.05

    def __post_init__(self):
        if self.n_train < 1 or self.n_val < 1:
            raise ValueError("n_train and n_val must be >= 1")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise ValueError(f"overlap_fraction must lie in [0, 1], got {self.overlap_fraction}")
        unknown = set(self.classes) - set(SHAPE_CLASSES)
        if not self.classes or unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")
        if self.size < 16:
            raise ValueError("scene size must be >= 16")


@dataclass
class Instance:
    box: BoxProposal
    mask: np.ndarray  # bool (H, W)
    shape_class: str


@dataclass
class Scene:
    image: np.ndarray  # float32 (1, 1, H, W)
    instances: list[Instance] = field(default_factory=list)
    overlap: bool = False

    @property
    def boxes(self) -> list[BoxProposal]:
        return [inst.box for inst in self.instances]


def _draw_shape(rng: np.random.Generator, cls: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if cls == "rectangle":
        h, w = rng.integers(8, 23, size=2)
        y0 = rng.integers(0, size - h + 1)
        x0 = rng.integers(0, size - w + 1)
        mask = np.zeros((size, size), dtype=bool)
        mask[y0 : y0 + h, x0 : x0 + w] = True
        return mask
    r = rng.uniform(5.0, 11.0) if cls == "disc" else rng.uniform(7.0, 12.0)
    cy, cx = rng.uniform(r, size - r, size=2)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if cls == "disc":
        return d2 <= r * r
    return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)


def mask_box(mask: np.ndarray) -> BoxProposal:
    ys, xs = np.nonzero(mask)
    return BoxProposal(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def overlap_ratio(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    return float(inter / min(a.sum(), b.sum()))


def overlap_pairs(scene: Scene, min_ratio: float = OVERLAP_MIN) -> list[tuple[int, int]]:
    """Instance index pairs whose mask intersection is >= min_ratio of the smaller mask."""
    inst = scene.instances
    return [
        (i, j)
        for i in range(len(inst))
        for j in range(i + 1, len(inst))
        if overlap_ratio(inst[i].mask, inst[j].mask) >= min_ratio
    ]


def _place(rng, cls, size, existing, overlap: bool, attempts=400):
    """Draw a mask that is disjoint from ``existing`` or, with ``overlap``,
    overlaps at least one of them by OVERLAP_MIN..OVERLAP_MAX and none by more."""
    for _ in range(attempts):
        mask = _draw_shape(rng, cls, size)
        if not overlap:
            if not any(np.logical_and(mask, m).any() for m in existing):
                return mask
            continue
        ratios = [overlap_ratio(mask, m) for m in existing]
        if max(ratios) <= OVERLAP_MAX and max(ratios) >= OVERLAP_MIN:
            return mask
    return None


def make_scene(spec: DatasetSpec, split: str, index: int, overlap: bool) -> Scene:
    rng = np.random.default_rng([spec.seed, _SPLIT_ID[split], index])
    size = spec.size
    lo = 2 if overlap else 1
    n = int(rng.integers(lo, MAX_INSTANCES + 1))
    classes = [spec.classes[i] for i in rng.integers(0, len(spec.classes), size=n)]

    masks: list[np.ndarray] = []
    while True:
        masks = [_place(rng, classes[0], size, [], overlap=False)]
        if not overlap:
            break
        second = _place(rng, classes[1], size, masks, overlap=True)
        if second is not None:
            masks.append(second)
            break
    for cls in classes[len(masks) :]:
        m = _place(rng, cls, size, masks, overlap=overlap)
        if m is None:
            break
        masks.append(m)
    classes = classes[: len(masks)]

    image = np.zeros((size, size))
    for cls, m in zip(classes, masks):
        image = np.maximum(image, CLASS_INTENSITY[cls] * m)
    image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)
    instances = [Instance(mask_box(m), m, c) for m, c in zip(masks, classes)]
    return Scene(image.astype(np.float32)[None, None], instances, overlap)


def overlap_indices(spec: DatasetSpec, split: str, n: int) -> set[int]:
    k = int(round(spec.overlap_fraction * n))
    perm = np.random.default_rng([spec.seed, _SPLIT_ID[split], 1 << 30]).permutation(n)
    return set(int(i) for i in perm[:k])


def make_split(spec: DatasetSpec, split: str) -> list[Scene]:
    n = spec.n_train if split == "train" else spec.n_val
    chosen = overlap_indices(spec, split, n)
    return [make_scene(spec, split, i, i in chosen) for i in range(n)]


def generate(spec: DatasetSpec) -> tuple[list[Scene], list[Scene]]:
    return make_split(spec, "train"), make_split(spec, "val")


def rasterize_gt(mask: np.ndarray, box: BoxProposal, R: int) -> np.ndarray:
    """Resample the mask inside ``box`` to R x R and threshold at 0.5."""
    h, w = mask.shape
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= w or box.y1 >= h:
        raise ValueError(f"box {box} does not intersect the {h}x{w} image")
    src = np.asarray(mask, dtype=np.float64)[None, None]
    crop = roi_align_bilinear(src, [box], R, stride=1.0)
    return (crop >= 0.5).astype(np.float32)


def scene_bytes(scene: Scene) -> bytes:
    """Canonical byte serialization used for determinism checks."""
    parts = [scene.image.tobytes()]
    for inst in scene.instances:
        b = inst.box
        parts.append(np.array([b.x1, b.y1, b.x2, b.y2]).tobytes())
        parts.append(np.packbits(inst.mask).tobytes())
        parts.append(inst.shape_class.encode())
    return b"".join(parts)


def export(scenes: list[Scene], out_dir) -> Path:
    """Write one split: BT4 images and masks, box CSVs and ``manifest.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene_id", "n_instances", "classes"])
        for i, scene in enumerate(scenes):
            sid = f"{i:05d}"
            save_bt4(out / f"{sid}_image.bt4", scene.image)
            masks = np.stack([inst.mask for inst in scene.instances]).astype(np.float32)[:, None]
            save_bt4(out / f"{sid}_masks.bt4", masks)
            write_boxes_csv(out / f"{sid}_boxes.csv", scene.boxes)
            writer.writerow([sid, len(scene.instances), ";".join(x.shape_class for x in scene.instances)])
    return out
