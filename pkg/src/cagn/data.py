"""Procedural image datasets and portable-pixmap IO.

Four desk-scale families (blobs, stripes, checkers, rings) with seeded
palettes stand in for perceptually distant real datasets.  Images are
float32, CHW, in [-1, 1], and every handle enumerates deterministically.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, NotFoundError, ValidationError

FAMILIES = ("blobs", "stripes", "checkers", "rings")


@dataclass
class DatasetHandle:
    images: np.ndarray  # [N,3,S,S] float32 in [-1,1]
    labels: np.ndarray  # [N] int64, task-local ids
    family: str = "dir"
    seed: int = 0

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ContractViolationError("DatasetHandle: images must be [N,3,H,W]")
        if len(self.labels) != len(self.images):
            raise ContractViolationError("DatasetHandle: label count mismatch")

    def __len__(self):
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[2]

    def sample(self, rng: np.random.Generator, batch: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self.images), size=batch)
        return self.images[idx], self.labels[idx]

    def split(self, n_first: int) -> tuple["DatasetHandle", "DatasetHandle"]:
        a = DatasetHandle(self.images[:n_first], self.labels[:n_first], self.family, self.seed)
        b = DatasetHandle(self.images[n_first:], self.labels[n_first:], self.family, self.seed)
        return a, b


def _palette(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two well-separated colors in [-1,1]^3."""
    c0 = rng.uniform(-1.0, 1.0, size=3)
    c1 = -c0 + rng.uniform(-0.3, 0.3, size=3)
    return c0.astype(np.float32), np.clip(c1, -1, 1).astype(np.float32)


def _grid(size: int):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    return ys, xs


def _mix(c0, c1, t):
    # t in [0,1], [H,W] -> [3,H,W]
    return (c0[:, None, None] * (1 - t)[None] + c1[:, None, None] * t[None]).astype(np.float32)


def _one_image(
    family: str, rng: np.random.Generator, size: int, palette=None
) -> np.ndarray:
    c0, c1 = _palette(rng) if palette is None else palette
    ys, xs = _grid(size)
    if family == "blobs":
        t = np.zeros((size, size))
        for _ in range(int(rng.integers(2, 5))):
            cy, cx = rng.uniform(0.15, 0.85, size=2)
            r = rng.uniform(0.08, 0.22)
            t += np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2)) / (2 * r * r))
        t = np.clip(t, 0, 1)
    elif family == "stripes":
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 4.5)
        phase = rng.uniform(0, 2 * np.pi)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * xs + np.sin(ang) * ys) + phase)
    elif family == "checkers":
        cells = int(rng.integers(3, 7))
        oy, ox = rng.uniform(0, 1, size=2)
        t = ((np.floor((ys + oy) * cells) + np.floor((xs + ox) * cells)) % 2.0)
    elif family == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        freq = rng.uniform(3.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        t = 0.5 + 0.5 * np.sin(2 * np.pi * freq * r + phase)
    else:
        raise ValidationError([f"unknown dataset family '{family}'"])
    img = _mix(c0, c1, t)
    img += rng.normal(0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, -1, 1)


def synth_dataset(family: str, palette_seed: int, n: int, size: int) -> DatasetHandle:
    """Deterministic procedural dataset; one class (label 0)."""
    if family not in FAMILIES:
        raise ValidationError([f"unknown dataset family '{family}'"])
    if n <= 0:
        raise ContractViolationError("synth_dataset: n must be positive")
    rng = np.random.default_rng([palette_seed, FAMILIES.index(family)])
    images = np.stack([_one_image(family, rng, size) for _ in range(n)])
    return DatasetHandle(images, np.zeros(n, dtype=np.int64), family, palette_seed)


def synth_labeled_dataset(
    family: str,
    palette_seed: int,
    n_per_class: int,
    size: int,
    num_classes: int,
    instance_seed: int = 0,
) -> DatasetHandle:
    """Classes are palette variants of one family: class c uses one fixed
    color palette drawn from palette_seed + 1000*c, so the palette is the
    learnable class signal.  `instance_seed` varies the per-image layout
    only; held-out splits share class palettes but not instances."""
    if family not in FAMILIES:
        raise ValidationError([f"unknown dataset family '{family}'"])
    if n_per_class <= 0:
        raise ContractViolationError("synth_labeled_dataset: n_per_class must be positive")
    fam_idx = FAMILIES.index(family)
    images_parts, labels_parts = [], []
    for c in range(num_classes):
        pal_rng = np.random.default_rng([palette_seed + 1000 * c, fam_idx, 101])
        palette = _palette(pal_rng)
        inst_rng = np.random.default_rng([palette_seed + 1000 * c, fam_idx, instance_seed])
        images_parts.append(
            np.stack([_one_image(family, inst_rng, size, palette) for _ in range(n_per_class)])
        )
        labels_parts.append(np.full(n_per_class, c, dtype=np.int64))
    return DatasetHandle(
        np.concatenate(images_parts), np.concatenate(labels_parts), family, palette_seed
    )


# ---------------------------------------------------------------------------
# portable pixmap IO (binary P6)
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray):
    """img: [3,H,W] float in [-1,1] -> 8-bit binary PPM."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractViolationError("write_ppm: expects [3,H,W]")
    u8 = np.clip(np.rint((img.transpose(1, 2, 0) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(u8.tobytes())


def read_ppm(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"no such image: {path}")
    raw = path.read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValidationError([f"{path}: not a binary PPM"])
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise ValidationError([f"{path}: only maxval 255 supported"])
    pix = np.frombuffer(raw[m.end():], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
    return (pix.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def load_dir(directory, size: int | None = None) -> DatasetHandle:
    """Load a directory of .ppm images; optional labels.txt (one task-local
    id per line, matching sorted filename order)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise NotFoundError(f"no such dataset directory: {directory}")
    files = sorted(directory.glob("*.ppm"))
    if not files:
        raise NotFoundError(f"no .ppm images in {directory}")
    images = np.stack([read_ppm(f) for f in files])
    if size is not None and images.shape[2] != size:
        raise ValidationError(
            [f"{directory}: images are {images.shape[2]}px, config expects {size}px"]
        )
    labels_file = directory / "labels.txt"
    if labels_file.exists():
        # lines are either "<filename> <label>" or a bare label per image
        # in sorted filename order
        lines = [ln.split() for ln in labels_file.read_text().splitlines() if ln.strip()]
        if len(lines) != len(files):
            raise ValidationError([f"{labels_file}: {len(lines)} labels for {len(files)} images"])
        if all(len(t) == 2 for t in lines):
            by_name = {name: int(lab) for name, lab in lines}
            missing = [f.name for f in files if f.name not in by_name]
            if missing:
                raise ValidationError([f"{labels_file}: no label for {n}" for n in missing])
            labels = np.array([by_name[f.name] for f in files], dtype=np.int64)
        else:
            labels = np.array([int(t[0]) for t in lines], dtype=np.int64)
    else:
        labels = np.zeros(len(files), dtype=np.int64)
    return DatasetHandle(images, labels, "dir", 0)
