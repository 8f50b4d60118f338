"""Datasets and episode sampling.

A ClassDataset is an ordered list of (class id, image stack) pairs; images
are single-channel float arrays in [0, 1], all the same size.  Datasets are
immutable after construction and safe to share; samplers own their seeded
generators.

Three sources:

* a directory tree of grayscale PNGs, one leaf directory per class
  (`<root>/<alphabet>/<character>/<image>.png` or any depth),
* a deterministic synthetic glyph generator (seeded stroke programs) used
  as the desk-scale stand-in, also exportable to the same PNG layout,
* ad-hoc arrays via the constructor (tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class ClassDataset:
    classes: tuple  # of (class_id: str, images: np.ndarray (n, H, W))
    source: str
    image_hw: tuple

    def __post_init__(self):
        for cid, imgs in self.classes:
            if imgs.ndim != 3 or imgs.shape[1:] != self.image_hw:
                raise ValueError(f"class {cid}: images {imgs.shape} != {self.image_hw}")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_ids(self):
        return [cid for cid, _ in self.classes]

    def check_episode_capacity(self, k_shot: int, q_query: int):
        need = k_shot + q_query
        for cid, imgs in self.classes:
            if imgs.shape[0] < need:
                raise ConfigError(
                    f"class {cid} has {imgs.shape[0]} images; needs >= {need} "
                    f"for {k_shot}-shot with {q_query} queries"
                )


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint class-index partitions; training never sees val/test classes."""

    train: tuple
    val: tuple
    test: tuple
    seed: int

    def __post_init__(self):
        all_idx = list(self.train) + list(self.val) + list(self.test)
        if len(set(all_idx)) != len(all_idx):
            raise ValueError("split partitions overlap")


def make_splits(n_classes: int, n_train: int, n_val: int, n_test: int, seed: int) -> SplitSpec:
    if n_train + n_val + n_test > n_classes:
        raise ConfigError(
            f"split sizes {n_train}+{n_val}+{n_test} exceed {n_classes} classes"
        )
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(n_classes)
    train = tuple(int(i) for i in perm[:n_train])
    val = tuple(int(i) for i in perm[n_train : n_train + n_val])
    test = tuple(int(i) for i in perm[n_train + n_val : n_train + n_val + n_test])
    return SplitSpec(train=train, val=val, test=test, seed=seed)


@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.  Arrays are class-major: K support then q query
    images per drawn class, labels relabeled 0..N-1 in draw order."""

    n_way: int
    k_shot: int
    q_query: int
    support_x: np.ndarray  # (N*K, H, W)
    support_y: np.ndarray  # (N*K,)
    query_x: np.ndarray  # (N*q, H, W)
    query_y: np.ndarray
    # provenance (class index, image index) rows, for disjointness checks
    support_src: np.ndarray = field(default=None, repr=False)
    query_src: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.support_x.shape[0] != self.n_way * self.k_shot:
            raise ValueError("support size != n_way * k_shot")
        if self.query_x.shape[0] != self.n_way * self.q_query:
            raise ValueError("query size != n_way * q_query")


def sample_episode(
    ds: ClassDataset,
    split: tuple,
    n_way: int,
    k_shot: int,
    q_query: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw an episode: n_way classes without replacement from `split`, then
    k_shot + q_query distinct images per class (first k_shot go to support)."""
    split = np.asarray(split)
    if split.size < n_way:
        raise ValueError(f"split has {split.size} classes, need {n_way}")
    chosen = rng.choice(split, size=n_way, replace=False)
    sup_x, sup_y, sup_src = [], [], []
    qry_x, qry_y, qry_src = [], [], []
    need = k_shot + q_query
    for label, cls_idx in enumerate(chosen):
        imgs = ds.classes[cls_idx][1]
        if imgs.shape[0] < need:
            raise ValueError(
                f"class {ds.classes[cls_idx][0]} has {imgs.shape[0]} images, needs {need}"
            )
        pick = rng.choice(imgs.shape[0], size=need, replace=False)
        for i in pick[:k_shot]:
            sup_x.append(imgs[i])
            sup_y.append(label)
            sup_src.append((cls_idx, i))
        for i in pick[k_shot:]:
            qry_x.append(imgs[i])
            qry_y.append(label)
            qry_src.append((cls_idx, i))
    return Episode(
        n_way=n_way,
        k_shot=k_shot,
        q_query=q_query,
        support_x=np.stack(sup_x),
        support_y=np.array(sup_y, dtype=np.int64),
        query_x=np.stack(qry_x),
        query_y=np.array(qry_y, dtype=np.int64),
        support_src=np.array(sup_src, dtype=np.int64),
        query_src=np.array(qry_src, dtype=np.int64),
    )


# ------------------------------------------------------------- synthetic


def _segment_distance(px, py, a, b):
    """Distance from every pixel (px, py) to segment a->b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros_like(px)
    else:
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    cx = a[0] + t * ab[0]
    cy = a[1] + t * ab[1]
    return np.hypot(px - cx, py - cy)


def _render_strokes(points: np.ndarray, size: int, sigma: float = 0.7) -> np.ndarray:
    jj, ii = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    img = np.zeros((size, size))
    for a, b in zip(points[:-1], points[1:]):
        d = _segment_distance(jj, ii, a, b)
        img += np.exp(-0.5 * (d / sigma) ** 2)
    return np.clip(img, 0.0, 1.0)


def _class_program(seed: int, cls: int, size: int) -> np.ndarray:
    """Seeded stroke program: a connected chain of 3-6 segments whose
    endpoints sit on a coarse lattice inside the image margins."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, cls, 0xC1A5]))
    grid = 4
    margin = max(2.0, size * 0.15)
    lattice = np.linspace(margin, size - 1 - margin, grid)
    n_seg = int(rng.integers(3, 7))
    cells = [tuple(rng.integers(0, grid, size=2))]
    while len(cells) < n_seg + 1:
        nxt = tuple(rng.integers(0, grid, size=2))
        if nxt != cells[-1]:
            cells.append(nxt)
    return np.array([[lattice[cx], lattice[cy]] for cx, cy in cells])


def _instance_points(base: np.ndarray, seed: int, cls: int, inst: int, size: int) -> np.ndarray:
    """Per-instance jitter: rotation up to +-10 degrees about the image
    center plus +-1 px endpoint noise."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, cls, inst, 0x1257]))
    angle = rng.uniform(-math.pi / 18.0, math.pi / 18.0)
    c, s = math.cos(angle), math.sin(angle)
    center = (size - 1) / 2.0
    rel = base - center
    rot = np.stack([c * rel[:, 0] - s * rel[:, 1], s * rel[:, 0] + c * rel[:, 1]], axis=1)
    return rot + center + rng.uniform(-1.0, 1.0, size=base.shape)


def make_synthetic(n_classes: int, images_per_class: int, size: int = 16, seed: int = 0) -> ClassDataset:
    """Deterministic glyph dataset: one stroke program per class, rendered
    with small per-instance jitter.  Bit-identical for identical arguments."""
    if n_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {n_classes}")
    classes = []
    for cls in range(n_classes):
        base = _class_program(seed, cls, size)
        imgs = np.stack(
            [
                _render_strokes(_instance_points(base, seed, cls, inst, size), size)
                for inst in range(images_per_class)
            ]
        )
        classes.append((f"synthetic/class_{cls:03d}", imgs))
    return ClassDataset(
        classes=tuple(classes),
        source=f"synthetic(n={n_classes},per={images_per_class},size={size},seed={seed})",
        image_hw=(size, size),
    )


# ----------------------------------------------------------- directories


def load_image_directory(
    path,
    target_hw=(28, 28),
    invert: bool = False,
    min_images: int = 1,
    rotate_classes: bool = False,
) -> ClassDataset:
    """Load a class-per-leaf-directory tree of grayscale images.

    Images are resized to `target_hw` with bilinear resampling, scaled to
    [0, 1]; `invert` maps v -> 1 - v (ink-on-paper sources).  Classes are
    ordered lexicographically by relative path, so loading is deterministic.
    `rotate_classes` appends the classic 90/180/270-degree rotations of each
    class as new classes.
    """
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    leaf_dirs = sorted(
        d for d in root.rglob("*") if d.is_dir() and any(
            f.suffix.lower() in IMAGE_EXTENSIONS for f in d.iterdir() if f.is_file()
        )
    )
    if not leaf_dirs and any(
        f.suffix.lower() in IMAGE_EXTENSIONS for f in root.iterdir() if f.is_file()
    ):
        leaf_dirs = [root]
    if not leaf_dirs:
        raise ConfigError(f"no image class directories under {root}")
    h, w = target_hw
    classes = []
    for d in leaf_dirs:
        files = sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_EXTENSIONS)
        imgs = []
        for f in files:
            try:
                with PILImage.open(f) as im:
                    im = im.convert("L").resize((w, h), PILImage.BILINEAR)
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as exc:
                raise ConfigError(f"unreadable image file {f}: {exc}") from exc
            imgs.append(1.0 - arr if invert else arr)
        if len(imgs) < min_images:
            raise ConfigError(f"class {d} has {len(imgs)} images, below minimum {min_images}")
        cid = str(d.relative_to(root)) if d != root else d.name
        classes.append((cid, np.stack(imgs)))
    if rotate_classes:
        if h != w:
            raise ConfigError("rotate_classes requires square images")
        rotated = []
        for cid, imgs in classes:
            for k in (1, 2, 3):
                rotated.append((f"{cid}/rot{90 * k:03d}", np.rot90(imgs, k=k, axes=(1, 2)).copy()))
        classes.extend(rotated)
        classes.sort(key=lambda c: c[0])
    return ClassDataset(classes=tuple(classes), source=str(root), image_hw=(h, w))


def export_image_tree(ds: ClassDataset, out_root) -> int:
    """Write the dataset as the standard PNG directory layout; returns the
    number of files written."""
    out_root = Path(out_root)
    n = 0
    for cid, imgs in ds.classes:
        d = out_root / cid
        d.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(imgs):
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            PILImage.fromarray(arr, mode="L").save(d / f"{i:04d}.png")
            n += 1
    return n
