"""Deterministic synthetic scenes with a vertical perspective gradient.

Scenes mimic the structure counting networks face: object rows get denser
and objects get smaller toward the top of the image (the far end), sparser
and larger toward the bottom. Images are grayscale in [0, 1] with
anti-aliased bright blobs on a noisy dark background.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from .density import PointAnnotation
from .fileio import load_annotation, read_pgm, save_annotation, write_json, write_pgm


@dataclass
class SceneParams:
    size: int = 64
    rows: int = 6
    base_count: int = 4  # objects in the bottom (nearest) row
    density_gradient: float = 0.5  # per-row growth toward the top
    radius_near: float = 4.0  # blob radius at the bottom row
    radius_far: float = 1.2  # blob radius at the top row
    jitter: float = 0.35  # position jitter, fraction of grid spacing
    noise: float = 0.08  # background noise amplitude
    seed: object = 0  # int or tuple accepted by numpy's default_rng

    def __post_init__(self):
        if self.size < 1 or self.rows < 1 or self.base_count < 1:
            raise ValueError("size, rows and base_count must be positive")
        if self.radius_far <= 0 or self.radius_near < self.radius_far:
            raise ValueError("blob radii must be positive and shrink toward the top")
        if self.density_gradient < 0 or self.jitter < 0 or self.noise < 0:
            raise ValueError("gradient, jitter and noise must be non-negative")

    def row_count(self, i):
        """Objects in row i (0 = top row)."""
        return int(round(self.base_count * (1.0 + self.density_gradient * (self.rows - 1 - i))))

    def row_radius(self, i):
        if self.rows == 1:
            return self.radius_near
        return self.radius_far + (self.radius_near - self.radius_far) * i / (self.rows - 1)


@dataclass
class Dataset:
    images: list  # [H, W] float64 arrays in [0, 1]
    annotations: list
    split: str = "train"

    def __len__(self):
        return len(self.images)


def generate_scene(params):
    """Render one scene; returns (image, PointAnnotation).

    Blob centers sit on a jittered grid whose horizontal spacing shrinks
    and per-row count grows toward the top. Deterministic per seed.
    """
    S = params.size
    if params.rows > S:
        raise ValueError(f"{params.rows} rows cannot fit in a {S}px image")
    if max(params.row_count(i) for i in range(params.rows)) > S:
        raise ValueError("row object count exceeds image width; rows would overlap")

    rng = np.random.default_rng(params.seed)
    img = params.noise * rng.random((S, S))

    band = S / params.rows
    points = []
    radii = []
    for i in range(params.rows):
        count = params.row_count(i)
        spacing = S / count
        y_center = (i + 0.5) * band
        for j in range(count):
            x = (j + 0.5) * spacing + params.jitter * spacing * (2.0 * rng.random() - 1.0)
            y = y_center + params.jitter * band * (2.0 * rng.random() - 1.0)
            points.append((float(np.clip(x, 0.0, S - 0.01)), float(np.clip(y, 0.0, S - 0.01))))
            radii.append(params.row_radius(i))

    for (px, py), radius in zip(points, radii):
        r_ext = int(np.ceil(radius)) + 1
        x0, x1 = max(int(px) - r_ext, 0), min(int(px) + r_ext + 1, S)
        y0, y1 = max(int(py) - r_ext, 0), min(int(py) + r_ext + 1, S)
        ys = np.arange(y0, y1) - py
        xs = np.arange(x0, x1) - px
        dist = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)
        blob = np.clip(radius + 0.5 - dist, 0.0, 1.0)
        img[y0:y1, x0:x1] = np.maximum(img[y0:y1, x0:x1], blob)

    ann = PointAnnotation(image_width=S, image_height=S, points=points)
    return np.clip(img, 0.0, 1.0), ann


def make_benchmark(n_train, n_test, params, seed, out_dir=None):
    """Generate disjoint train/test splits; optionally write them to disk.

    Each image gets its own seed derived from (master seed, split, index),
    so the directory tree is byte-identical across runs. On-disk layout:
    ``train/img_0000.pgm`` + ``.json`` per image plus a ``manifest.json``.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test image")
    splits = {}
    for split_id, (split, n) in enumerate((("train", n_train), ("test", n_test))):
        images, anns = [], []
        for i in range(n):
            img, ann = generate_scene(replace(params, seed=(seed, split_id, i)))
            images.append(img)
            anns.append(ann)
        splits[split] = Dataset(images, anns, split=split)

    if out_dir is not None:
        manifest = {"seed": seed, "splits": {}}
        for split, ds in splits.items():
            split_dir = os.path.join(out_dir, split)
            os.makedirs(split_dir, exist_ok=True)
            ids = []
            for i, (img, ann) in enumerate(zip(ds.images, ds.annotations)):
                stem = f"img_{i:04d}"
                write_pgm(os.path.join(split_dir, stem + ".pgm"), img)
                save_annotation(os.path.join(split_dir, stem + ".json"), ann)
                ids.append(stem)
            manifest["splits"][split] = ids
        write_json(os.path.join(out_dir, "manifest.json"), manifest)

    return splits["train"], splits["test"]


def load_benchmark(data_dir):
    """Read a benchmark directory written by make_benchmark."""
    import json

    with open(os.path.join(data_dir, "manifest.json")) as f:
        manifest = json.load(f)
    out = []
    for split in ("train", "test"):
        ids = manifest["splits"][split]
        images, anns = [], []
        for stem in ids:
            img = read_pgm(os.path.join(data_dir, split, stem + ".pgm"))
            images.append(img.astype(np.float64) / 255.0)
            anns.append(load_annotation(os.path.join(data_dir, split, stem + ".json")))
        out.append(Dataset(images, anns, split=split))
    return tuple(out)
