"""Dynamic-dilation convolution driven by a per-position rate map.

A rough density estimate is mapped through a negative linear ramp into a
dilation map; a 3x3 convolution then samples its taps at continuous offsets
``rate * (i, j)`` for (i, j) in {-1, 0, 1}^2, using bilinear interpolation
for fractional positions. Taps falling outside the input contribute zero.

Gradients flow to the input and the kernel through the bilinear weights.
The dilation map enters as data: the rough network is trained separately
and its prediction is not differentiated through.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _make, as_tensor


@dataclass
class TransformParams:
    """Negative linear ramp: rate = clamp(max_rate - gamma * density, 0, max_rate)."""

    max_rate: float = 2.0
    gamma: float = 10.0

    def __post_init__(self):
        if self.max_rate <= 0:
            raise ValueError(f"max_rate must be positive, got {self.max_rate}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass
class DilationMap:
    """Per-position dilation rates aligned with a feature grid."""

    rates: np.ndarray

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=np.float64)
        if self.rates.ndim != 2:
            raise ValueError(f"dilation map must be 2-D, got shape {self.rates.shape}")
        if not np.all(np.isfinite(self.rates)):
            raise ValueError("dilation map contains non-finite rates")
        if np.any(self.rates < 0):
            raise ValueError("dilation rates must be non-negative")

    @property
    def height(self):
        return self.rates.shape[0]

    @property
    def width(self):
        return self.rates.shape[1]

    @classmethod
    def constant(cls, rate, shape):
        return cls(np.full(shape, float(rate)))


def linear_transform(rough, params):
    """Map a rough density estimate to a dilation map.

    Denser cells get smaller rates; the output is clamped to
    [0, max_rate], hitting max_rate at zero density and 0 at
    density >= max_rate / gamma.
    """
    x = rough.values
    if not np.all(np.isfinite(x)):
        raise ValueError("rough density contains non-finite values")
    rates = np.clip(params.max_rate - params.gamma * x, 0.0, params.max_rate)
    return DilationMap(rates)


def _corners(py, px, H, W):
    """Bilinear corner geometry for fractional positions.

    Returns four (row_index, col_index, weight) triples; weights are zeroed
    where the corner falls outside the [0, H) x [0, W) grid.
    """
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    wy1 = py - y0
    wx1 = px - x0
    out = []
    for yc, wy in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        for xc, wx in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            valid = (yc >= 0) & (yc < H) & (xc >= 0) & (xc < W)
            out.append((np.clip(yc, 0, H - 1), np.clip(xc, 0, W - 1), wy * wx * valid))
    return out


def bilinear_sample(feature_map, x, y):
    """Bilinearly interpolate a [..., H, W] map at continuous (x, y).

    Integer coordinates return the exact grid value; neighbors outside the
    grid contribute zero. For a [C, H, W] map the result is a length-C vector.
    """
    fmap = feature_map.data if isinstance(feature_map, Tensor) else np.asarray(feature_map, dtype=np.float64)
    H, W = fmap.shape[-2:]
    corners = _corners(np.asarray(float(y)), np.asarray(float(x)), H, W)
    return sum(fmap[..., iy, ix] * w for iy, ix, w in corners)


def _as_rates(dmap, B, H, W):
    """Normalize a dilation map argument to a [B or 1, H, W] rate array."""
    rates = dmap.rates if isinstance(dmap, DilationMap) else np.asarray(dmap, dtype=np.float64)
    if rates.ndim == 2:
        rates = rates[None]
    if rates.ndim != 3 or rates.shape[1:] != (H, W) or rates.shape[0] not in (1, B):
        raise ValueError(
            f"dilation map shape {rates.shape} does not match input spatial shape {(H, W)}"
        )
    return rates


def refined_dilated_conv(x, weight, bias, dmap):
    """3x3 convolution whose tap spacing varies per output position.

    Output position (h, w) reads the input at (h, w) + rate(h, w) * (i, j)
    for each kernel tap (i, j) in {-1, 0, 1}^2, bilinearly interpolated.
    Stride 1, output resolution equals input resolution. A constant integer
    rate map degenerates to a standard dilated convolution.

    ``dmap`` is a DilationMap shared across the batch, or an [B, H, W]
    array of per-sample rates.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if bias is not None:
        bias = as_tensor(bias)
    B, Cin, H, W = x.data.shape
    Cout, Cin_w, kh, kw = weight.data.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"refined dilated conv requires a 3x3 kernel, got {(kh, kw)}")
    if Cin != Cin_w:
        raise ValueError(
            f"refined dilated conv: input has {Cin} channels but weight expects {Cin_w}"
        )
    rates = _as_rates(dmap, B, H, W)

    ys, xs = np.meshgrid(
        np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij"
    )
    bidx = np.arange(B)[:, None, None, None]
    cidx = np.arange(Cin)[None, :, None, None]

    out = np.zeros((B, Cout, H, W))
    taps = []  # (ki, kj, sampled, corners) per kernel tap
    for ki, di in enumerate((-1, 0, 1)):
        for kj, dj in enumerate((-1, 0, 1)):
            corners = _corners(ys[None] + rates * di, xs[None] + rates * dj, H, W)
            sampled = np.zeros((B, Cin, H, W))
            for iy, ix, w in corners:
                sampled += x.data[bidx, cidx, iy[:, None], ix[:, None]] * w[:, None]
            out += np.einsum("bchw,oc->bohw", sampled, weight.data[:, :, ki, kj])
            taps.append((ki, kj, sampled, corners))
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(up):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(weight.data) if weight.requires_grad else None
        for ki, kj, sampled, corners in taps:
            if gw is not None:
                gw[:, :, ki, kj] = np.einsum("bchw,bohw->oc", sampled, up)
            if gx is not None:
                g_tap = np.einsum("bohw,oc->bchw", up, weight.data[:, :, ki, kj])
                for iy, ix, w in corners:
                    np.add.at(gx, (bidx, cidx, iy[:, None], ix[:, None]), g_tap * w[:, None])
        if bias is None:
            return gx, gw
        return gx, gw, up.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)
