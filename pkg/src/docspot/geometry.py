"""Axis-aligned bounding-box arithmetic: overlap ratio and aspect filtering.

Everything here is a pure function on immutable values and safe to call
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel rectangle with positive extent.

    (x, y) is the top-left corner in image coordinates (x grows right,
    y grows down); w and h are the width and height in pixels.
    """

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        object.__setattr__(self, "x", int(self.x))
        object.__setattr__(self, "y", int(self.y))
        object.__setattr__(self, "w", int(self.w))
        object.__setattr__(self, "h", int(self.h))
        if self.x < 0 or self.y < 0:
            raise ParameterError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise ParameterError(f"box extent must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    @property
    def ratio(self) -> float:
        """Height over width."""
        return self.h / self.w

    def union_bbox(self, other: BBox) -> BBox:
        """Smallest box enclosing both boxes."""
        x = min(self.x, other.x)
        y = min(self.y, other.y)
        return BBox(x, y, max(self.right, other.right) - x, max(self.bottom, other.bottom) - y)

    def contains(self, other: BBox) -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and other.right <= self.right
            and other.bottom <= self.bottom
        )


@dataclass(frozen=True)
class AspectGate:
    """Height/width ratio filter for candidate boxes.

    A candidate passes when its ratio deviates from the query ratio by
    at most ``tolerance`` (a fraction), endpoints included.
    """

    tolerance: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.tolerance < 1.0:
            raise ParameterError(f"gate tolerance must be in (0, 1), got {self.tolerance}")


def iou(a: BBox, b: BBox) -> float:
    """Intersection-over-union of two boxes, in [0, 1].

    Intersection and union areas are computed in exact integer
    arithmetic; the single floating-point division happens last, so the
    result is the correctly rounded ratio of the two pixel counts.
    """
    iw = min(a.right, b.right) - max(a.x, b.x)
    ih = min(a.bottom, b.bottom) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def aspect_gate(query: BBox, cand: BBox, gate: AspectGate) -> bool:
    """True iff the candidate h/w ratio lies inside the tolerance band
    around the query ratio, both endpoints inclusive."""
    r = query.ratio
    return r * (1.0 - gate.tolerance) <= cand.ratio <= r * (1.0 + gate.tolerance)
