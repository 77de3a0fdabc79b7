"""Rotated bounding boxes and the inter-frame similarity-like transform.

Coordinates are pixel coordinates: pixel ``(row r, col c)`` has its center at
``(x=c, y=r)``. Angles are measured from the +x axis toward the +y axis, and
all rotations use the ordinary rotation matrix in those coordinates.

The transform between frames is

    [x']   [dsx*cos t  -dsy*sin t  t_x] [x]
    [y'] = [dsx*sin t   dsy*cos t  t_y] [y]
    [1 ]   [0           0          1  ] [1]

with ``t_x = dx * w_I`` and ``t_y = dy * h_I``. The normalized translations
live only in :class:`MotionParams`; the matrix always carries pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull

from .errors import EmptyObjectError, InvalidParameterError


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.pi - math.fmod(math.pi - a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


def wrap_half_angle(a: float) -> float:
    """Wrap an angle to (-pi/2, pi/2] (rectangles are symmetric under +pi)."""
    a = 0.5 * math.pi - math.fmod(0.5 * math.pi - a, math.pi)
    if a <= -0.5 * math.pi:
        a += math.pi
    elif a > 0.5 * math.pi:
        a -= math.pi
    return a


@dataclass(frozen=True)
class RBBox:
    cx: float
    cy: float
    w: float
    h: float
    alpha: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InvalidParameterError(f"box sides must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "alpha", wrap_angle(float(self.alpha)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def corners(self) -> np.ndarray:
        """The four corners as a (4, 2) array, counter-clockwise in (x, y)."""
        c, s = math.cos(self.alpha), math.sin(self.alpha)
        u = np.array([c, s]) * (self.w / 2)
        v = np.array([-s, c]) * (self.h / 2)
        ctr = self.center
        return np.array([ctr - u - v, ctr + u - v, ctr + u + v, ctr - u + v])

    def equivalents(self) -> list[RBBox]:
        """The four (w, h, alpha) labelings that describe the same rectangle."""
        a = self.alpha
        return [
            RBBox(self.cx, self.cy, self.w, self.h, a),
            RBBox(self.cx, self.cy, self.h, self.w, a + math.pi / 2),
            RBBox(self.cx, self.cy, self.w, self.h, a + math.pi),
            RBBox(self.cx, self.cy, self.h, self.w, a - math.pi / 2),
        ]

    def canonical(self) -> RBBox:
        """Representation with w >= h and alpha in (-pi/2, pi/2]."""
        w, h, a = self.w, self.h, self.alpha
        if w < h:
            w, h, a = h, w, a + math.pi / 2
        return RBBox(self.cx, self.cy, w, h, wrap_half_angle(a))


@dataclass(frozen=True)
class FrameDims:
    w: int
    h: int

    def __post_init__(self):
        if int(self.w) != self.w or int(self.h) != self.h or self.w <= 0 or self.h <= 0:
            raise InvalidParameterError(f"frame dims must be positive integers, got {self.w}x{self.h}")
        object.__setattr__(self, "w", int(self.w))
        object.__setattr__(self, "h", int(self.h))

    @classmethod
    def parse(cls, text: str) -> FrameDims:
        """Parse ``"WxH"``."""
        try:
            w, h = text.lower().split("x")
            return cls(int(w), int(h))
        except ValueError as exc:
            raise InvalidParameterError(f"expected WxH, got {text!r}") from exc


@dataclass(frozen=True)
class MotionParams:
    dsx: float
    dsy: float
    theta: float
    dx: float
    dy: float

    def __post_init__(self):
        if not (self.dsx > 0 and self.dsy > 0):
            raise InvalidParameterError(f"scale ratios must be positive, got ({self.dsx}, {self.dsy})")

    @classmethod
    def identity(cls) -> MotionParams:
        return cls(1.0, 1.0, 0.0, 0.0, 0.0)

    def latent(self) -> np.ndarray:
        """Latent view ``(dsx, dsy, sin(theta), dx, dy)``."""
        return np.array([self.dsx, self.dsy, math.sin(self.theta), self.dx, self.dy])

    @classmethod
    def from_latent(cls, v) -> MotionParams:
        """Inverse of :meth:`latent`; the rotation is recovered with asin, so |theta| <= pi/2."""
        v = np.asarray(v, dtype=float)
        if abs(v[2]) > 1:
            raise InvalidParameterError(f"sin(theta) out of range: {v[2]}")
        return cls(float(v[0]), float(v[1]), math.asin(v[2]), float(v[3]), float(v[4]))


def compose_transform(p: MotionParams, dims: FrameDims) -> np.ndarray:
    """Homogeneous 3x3 matrix of ``p`` with pixel translations in the last column."""
    if not (p.dsx > 0 and p.dsy > 0):
        raise InvalidParameterError("scale ratios must be positive")
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([
        [p.dsx * c, -p.dsy * s, p.dx * dims.w],
        [p.dsx * s, p.dsy * c, p.dy * dims.h],
        [0.0, 0.0, 1.0],
    ])


def apply_transform(b: RBBox, p: MotionParams, dims: FrameDims) -> RBBox:
    g = compose_transform(p, dims)
    x, y, _ = g @ np.array([b.cx, b.cy, 1.0])
    return RBBox(float(x), float(y), p.dsx * b.w, p.dsy * b.h, b.alpha + p.theta)


def extract_motion(b_t: RBBox, b_t1: RBBox, dims: FrameDims) -> MotionParams:
    """Recover the unique motion parameters taking ``b_t`` to ``b_t1``.

    The translation is the exact inverse of :func:`apply_transform`, i.e.
    ``t_y = y' - x*dsx*sin(theta) - y*dsy*cos(theta)``.
    """
    if b_t.w == 0 or b_t.h == 0:
        raise ZeroDivisionError("source box has zero size")
    dsx = b_t1.w / b_t.w
    dsy = b_t1.h / b_t.h
    theta = wrap_angle(b_t1.alpha - b_t.alpha)
    c, s = math.cos(theta), math.sin(theta)
    tx = b_t1.cx - b_t.cx * dsx * c + b_t.cy * dsy * s
    ty = b_t1.cy - b_t.cx * dsx * s - b_t.cy * dsy * c
    return MotionParams(dsx, dsy, theta, tx / dims.w, ty / dims.h)


def align_to(reference: RBBox, b: RBBox) -> RBBox:
    """Pick the labeling of ``b`` whose angle is closest to ``reference``'s.

    Masks only determine a rectangle up to its 4-fold symmetry; tracking the
    labeling frame to frame keeps ``dsx`` attached to the same object axis.
    """
    return min(b.equivalents(), key=lambda e: abs(wrap_angle(e.alpha - reference.alpha)))


def _foreground_corners(mask: np.ndarray) -> np.ndarray:
    # Hull of the pixel squares only depends on the leftmost/rightmost pixel per row.
    rows = np.flatnonzero(mask.any(axis=1))
    first = mask[rows].argmax(axis=1)
    last = mask.shape[1] - 1 - mask[rows, ::-1].argmax(axis=1)
    pts = []
    for dy in (-0.5, 0.5):
        pts.append(np.column_stack([first - 0.5, rows + dy]))
        pts.append(np.column_stack([last + 0.5, rows + dy]))
    return np.unique(np.concatenate(pts).astype(float), axis=0)


def min_area_rect(points: np.ndarray) -> RBBox:
    """Minimum-area enclosing rectangle of a 2-D point set (rotating calipers)."""
    points = np.asarray(points, dtype=float)
    hull = points[ConvexHull(points).vertices]
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    keep = lengths > 1e-12
    e = edges[keep] / lengths[keep, None]
    n = np.column_stack([-e[:, 1], e[:, 0]])
    pu = hull @ e.T
    pv = hull @ n.T
    du = pu.max(axis=0) - pu.min(axis=0)
    dv = pv.max(axis=0) - pv.min(axis=0)
    k = int(np.argmin(du * dv))
    mu = 0.5 * (pu[:, k].max() + pu[:, k].min())
    mv = 0.5 * (pv[:, k].max() + pv[:, k].min())
    cx, cy = mu * e[k] + mv * n[k]
    return RBBox(float(cx), float(cy), float(du[k]), float(dv[k]), math.atan2(e[k, 1], e[k, 0]))


def mask_to_rbbox(mask) -> RBBox:
    """Minimum-area rotated rectangle covering every foreground pixel square.

    Returned in canonical form (w >= h, alpha in (-pi/2, pi/2]).
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise InvalidParameterError(f"mask must be 2-D, got shape {mask.shape}")
    if not mask.any():
        raise EmptyObjectError("mask has no foreground pixels")
    return min_area_rect(_foreground_corners(mask)).canonical()


def rbbox_contains(b: RBBox, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Boolean array: which (x, y) points lie inside ``b`` (closed, with tolerance)."""
    c, s = math.cos(b.alpha), math.sin(b.alpha)
    d = np.asarray(points, dtype=float) - b.center
    u = d @ np.array([c, s])
    v = d @ np.array([-s, c])
    return (np.abs(u) <= b.w / 2 + tol) & (np.abs(v) <= b.h / 2 + tol)
