"""Ground-truth density maps from point annotations.

Each annotated point becomes a truncated, renormalized 2-D Gaussian, so the
map always sums to the point count no matter how close points sit to the
image border. Downsampling pools by block sum, which is the only reading
that keeps the total count constant.
"""

from dataclasses import dataclass, field

import numpy as np

# Spread used for a single isolated point when the KNN rule has no neighbors.
DEFAULT_PRECISE_SIGMA = 15.0


@dataclass
class PointAnnotation:
    """Head positions (x, y) in pixel coordinates plus image extent."""

    image_width: int
    image_height: int
    points: list = field(default_factory=list)

    def __post_init__(self):
        for x, y in self.points:
            if not (0 <= x < self.image_width and 0 <= y < self.image_height):
                raise ValueError(
                    f"point ({x}, {y}) outside image "
                    f"{self.image_width}x{self.image_height}"
                )

    def count(self):
        return len(self.points)


@dataclass
class DensityMap:
    """Non-negative 2-D grid whose sum is an object count.

    ``scale`` is the ratio of grid resolution to source image resolution
    (1.0 for full resolution, 0.125 after the usual 8x downsample).
    """

    values: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"density map must be 2-D, got shape {self.values.shape}")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    def total(self):
        return float(self.values.sum())


def gaussian_density(ann, sigma_per_point):
    """Render a full-resolution density map from point annotations.

    Each point contributes an isotropic Gaussian evaluated on the integer
    pixel grid, truncated at radius ceil(4*sigma) and renormalized so the
    mass that lands inside the image is exactly 1. Border clipping therefore
    never loses count.
    """
    if len(sigma_per_point) != len(ann.points):
        raise ValueError(
            f"need one sigma per point: {len(sigma_per_point)} sigmas, {len(ann.points)} points"
        )
    H, W = ann.image_height, ann.image_width
    out = np.zeros((H, W))
    for (px, py), sigma in zip(ann.points, sigma_per_point):
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        r = int(np.ceil(4.0 * sigma))
        x0 = max(int(np.floor(px)) - r, 0)
        x1 = min(int(np.floor(px)) + r + 1, W)
        y0 = max(int(np.floor(py)) - r, 0)
        y1 = min(int(np.floor(py)) + r + 1, H)
        xs = np.arange(x0, x1) - px
        ys = np.arange(y0, y1) - py
        kern = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma * sigma))
        out[y0:y1, x0:x1] += kern / kern.sum()
    return DensityMap(out, scale=1.0)


def adaptive_sigmas(ann, k=3, beta=0.3):
    """Per-point Gaussian spreads from mean distance to the k nearest points.

    With fewer than k other points, all available neighbors are used; a
    single isolated point falls back to the fixed precise spread.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pts = np.asarray(ann.points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return []
    if n == 1:
        return [DEFAULT_PRECISE_SIGMA]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, np.inf)
    dist.sort(axis=1)
    kk = min(k, n - 1)
    return [beta * float(np.sum(row[:kk]) / kk) for row in dist]


def downsample_preserve_count(dmap, factor):
    """Block-sum pooling by ``factor``, zero-padding right/bottom if needed."""
    if factor <= 0:
        raise ValueError(f"downsample factor must be positive, got {factor}")
    if factor == 1:
        return DensityMap(dmap.values.copy(), scale=dmap.scale)
    v = dmap.values
    H, W = v.shape
    ph = (-H) % factor
    pw = (-W) % factor
    if ph or pw:
        v = np.pad(v, ((0, ph), (0, pw)))
    h, w = v.shape[0] // factor, v.shape[1] // factor
    pooled = v.reshape(h, factor, w, factor).sum(axis=(1, 3))
    return DensityMap(pooled, scale=dmap.scale / factor)
