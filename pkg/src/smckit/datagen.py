"""Deterministic 12x12 synthetic shape images with masks and boxes.

Domain ``A`` draws a white shape on a black background. Domain ``B`` inverts
the intensities and adds a per-pixel textured background.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smckit.errors import InvalidInput
from smckit.linalg import RngStream

SIZE = 12
TEXTURE_AMPLITUDE = 0.3
CATALOG = ("square", "circle", "triangle", "cross", "bar_h", "bar_v", "L", "T", "diamond", "ring")
DOMAINS = ("A", "B")


def _template(kind: str, s: int) -> np.ndarray:
    """Binary ``s`` x ``s`` glyph."""
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    t = max(1, s // 4)  # stroke thickness
    lo = int(round(c - t / 2.0 + 0.01))
    if kind == "square":
        g = np.ones((s, s), bool)
    elif kind == "circle":
        g = (yy - c) ** 2 + (xx - c) ** 2 <= (s / 2.0) ** 2 - 0.25
    elif kind == "triangle":
        g = np.abs(xx - c) <= (yy + 1) / 2.0
    elif kind == "cross":
        g = ((yy >= lo) & (yy < lo + t)) | ((xx >= lo) & (xx < lo + t))
    elif kind == "bar_h":
        g = (yy >= lo) & (yy < lo + t)
    elif kind == "bar_v":
        g = (xx >= lo) & (xx < lo + t)
    elif kind == "L":
        g = (xx < t) | (yy >= s - t)
    elif kind == "T":
        g = (yy < t) | ((xx >= lo) & (xx < lo + t))
    elif kind == "diamond":
        g = np.abs(yy - c) + np.abs(xx - c) <= (s - 1) / 2.0 + 0.01
    elif kind == "ring":
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        g = (r2 <= (s / 2.0) ** 2 - 0.25) & (r2 >= (s / 2.0 - t) ** 2)
    else:
        raise InvalidInput(f"unknown shape class {kind!r}")
    return g


def class_id(name: str | int) -> int:
    if isinstance(name, (int, np.integer)):
        if not 0 <= int(name) < len(CATALOG):
            raise InvalidInput(f"class id {name} outside catalog of {len(CATALOG)}")
        return int(name)
    try:
        return CATALOG.index(name)
    except ValueError:
        raise InvalidInput(f"unknown shape class {name!r}; catalog is {CATALOG}") from None


def render(cls: int, domain: str, seed: int, index: int):
    """One sample as a pure function of ``(class, domain, seed, index)``.

    Returns ``(image, mask, box)`` with ``box = (cx, cy, w, h)`` in pixel units.
    """
    if domain not in DOMAINS:
        raise InvalidInput(f"unknown domain {domain!r}")
    u = RngStream(seed).child("sample", cls, domain, index).uniform(3 + SIZE * SIZE)
    s = 5 + int(u[0] * 4)  # glyph size 5..8
    oy = int(u[1] * (SIZE - s + 1))
    ox = int(u[2] * (SIZE - s + 1))
    mask = np.zeros((SIZE, SIZE), bool)
    mask[oy : oy + s, ox : ox + s] = _template(CATALOG[cls], s)
    if domain == "A":
        img = mask.astype(np.float64)
    else:
        texture = 1.0 - TEXTURE_AMPLITUDE * u[3:].reshape(SIZE, SIZE)
        img = np.where(mask, 0.0, texture)
    ys, xs = np.nonzero(mask)
    x0, x1, y0, y1 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    box = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0)])
    return img, mask, box


@dataclass
class ShapeDataset:
    images: np.ndarray  # (N, 1, 12, 12) float64
    labels: np.ndarray  # (N,) int64 catalog ids
    masks: np.ndarray  # (N, 12, 12) bool
    boxes: np.ndarray  # (N, 4) float64 (cx, cy, w, h)
    domain: str
    seed: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> list[int]:
        return sorted(set(int(c) for c in self.labels))

    def subset(self, idx) -> ShapeDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return ShapeDataset(self.images[idx], self.labels[idx], self.masks[idx], self.boxes[idx], self.domain, self.seed)

    def concat(self, other: ShapeDataset) -> ShapeDataset:
        domain = self.domain if self.domain == other.domain else "mixed"
        return ShapeDataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.masks, other.masks]),
            np.concatenate([self.boxes, other.boxes]),
            domain,
            self.seed,
        )


def generate(classes, n_per_class: int, domain: str = "A", seed: int = 0, start: int = 0) -> ShapeDataset:
    """``n_per_class`` samples of each class, indices ``start .. start+n-1``.

    Use disjoint ``start`` ranges (or seeds) for train and test splits.
    """
    if n_per_class < 1:
        raise InvalidInput("n_per_class must be >= 1")
    ids = [class_id(c) for c in classes]
    if not ids:
        raise InvalidInput("at least one class is required")
    if len(set(ids)) != len(ids):
        raise InvalidInput(f"duplicate classes in {classes}")
    n = len(ids) * n_per_class
    images = np.empty((n, 1, SIZE, SIZE))
    masks = np.empty((n, SIZE, SIZE), bool)
    boxes = np.empty((n, 4))
    labels = np.repeat(np.array(ids, dtype=np.int64), n_per_class)
    for k, (cls, i) in enumerate((c, start + j) for c in ids for j in range(n_per_class)):
        images[k, 0], masks[k], boxes[k] = render(cls, domain, seed, i)
    return ShapeDataset(images, labels, masks, boxes, domain, seed)


@dataclass
class RehearsalMemory:
    """Bounded stash of old-task samples kept for fine-tuning."""

    samples: ShapeDataset
    capacity: int
    seed: int

    def __len__(self) -> int:
        return len(self.samples)


def split_rehearsal(ds: ShapeDataset, capacity: int, seed: int = 0) -> RehearsalMemory:
    """Per-class uniform sample of ``capacity`` items, balanced to within one per class."""
    classes = ds.classes
    if capacity < len(classes):
        raise InvalidInput(f"capacity {capacity} cannot cover {len(classes)} classes")
    pools = {c: np.flatnonzero(ds.labels == c) for c in classes}
    quota = dict.fromkeys(classes, 0)
    remaining = min(capacity, len(ds))
    while remaining:
        for c in classes:
            if remaining and quota[c] < len(pools[c]):
                quota[c] += 1
                remaining -= 1
    rng = RngStream(seed).child("rehearsal")
    picked = []
    for c in classes:
        order = rng.child(c).permutation(len(pools[c]))
        picked.extend(pools[c][order[: quota[c]]])
    return RehearsalMemory(ds.subset(np.sort(np.array(picked, dtype=np.int64))), capacity, seed)
