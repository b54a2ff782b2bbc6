"""Analytic receptive-field tooling.

Quantifies how much the receptive fields of two nearby output positions
overlap, and computes per-layer field extents for a sequential conv/pool
stack via the standard recurrence.
"""

from dataclasses import dataclass


@dataclass
class RFSpec:
    """Field side length X (input pixels), network downsample ratio k,
    and output-grid separation n (cells)."""

    X: float
    k: int = 1
    n: int = 1

    def __post_init__(self):
        if self.X <= 0 or self.k < 1 or self.n < 1:
            raise ValueError(f"invalid receptive-field spec: X={self.X} k={self.k} n={self.n}")

    @property
    def disjoint(self):
        """True when the two fields do not overlap along the axis."""
        return self.X < self.k * self.n


def rf_iou(spec):
    """Overlap (IoU along one axis) of receptive fields n output cells apart.

    (X - kn) / (X + kn) for X >= kn; disjoint fields return 0.0 rather than
    a negative value so parameter sweeps never abort. Strictly increasing in
    X above the breakpoint, approaching 1 in the limit.
    """
    kn = spec.k * spec.n
    if spec.disjoint:
        return 0.0
    return (spec.X - kn) / (spec.X + kn)


def layer_rf_extent(layers, dmap_rate=1.0):
    """Receptive-field side length after each layer of a sequential stack.

    ``layers`` is a sequence of dicts with keys ``kind`` ("conv", "refined",
    or "pool"), ``kernel``, ``stride``, ``dilation``. Refined layers take
    their dilation from ``dmap_rate``. Recurrence: rf += (kernel-1) *
    dilation * jump; jump *= stride.
    """
    rf = 1.0
    jump = 1.0
    extents = []
    for layer in layers:
        kernel = layer.get("kernel", 1)
        stride = layer.get("stride", 1)
        if layer.get("kind") == "refined":
            dilation = dmap_rate
        else:
            dilation = layer.get("dilation", 1)
        rf += (kernel - 1) * dilation * jump
        jump *= stride
        extents.append(rf)
    return extents
