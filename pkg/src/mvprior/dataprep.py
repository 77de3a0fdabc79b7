"""Training data: synthetic mask sequences, filtering, patch cropping, prior fitting.

Synthetic sequences follow the motion law of :mod:`mvprior.geometry` exactly.
The rbbox of frame t+1 is ``apply_transform(rbbox_t, p_t)``, with ``p_t`` drawn
from a 5-D motion prior over ``(dsx, dsy, sin(theta), dx, dy)``. Draws are
rejected and redrawn, up to ``max_retries`` times, when a scale is <= 0.05,
|sin(theta)| > 1, a side falls below ``min_side`` pixels, or a corner leaves
the frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import mgd
from .errors import EmptyObjectError, GenerationError, InsufficientDataError, InvalidParameterError
from .geometry import FrameDims, MotionParams, RBBox, align_to, apply_transform, extract_motion, mask_to_rbbox
from .mgd import GaussianND

SHAPE_KINDS = ("rect", "ellipse", "polygon")
SIZE_LIMIT = 0.7
MIN_SCALE = 0.05


@dataclass(eq=False)
class MaskSequence:
    frames: list
    dims: FrameDims
    images: list | None = None
    boxes: list | None = None
    params: list | None = None

    def __post_init__(self):
        for k, f in enumerate(self.frames):
            if f.shape != (self.dims.h, self.dims.w):
                raise InvalidParameterError(f"frame {k} has shape {f.shape}, expected {(self.dims.h, self.dims.w)}")

    def __len__(self):
        return len(self.frames)


@dataclass(eq=False)
class FramePatch:
    image: np.ndarray
    gt_mask: np.ndarray
    source: int = 0
    center: tuple = (0.0, 0.0)
    window: float = 0.0


@dataclass
class ShapeSpec:
    """Object appearance. ``vertices`` are polygon corners in the unit box [-1, 1]^2."""

    kind: str = "rect"
    w: float = 30.0
    h: float = 18.0
    alpha: float = 0.0
    vertices: np.ndarray | None = None
    color: tuple | None = None

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise InvalidParameterError(f"unknown shape kind {self.kind!r}")


def desk_motion_prior() -> GaussianND:
    """Containable motion prior with the published correlation structure.

    The published prior moves objects by a third of the frame per step on
    average, so most draws leave any frame. This one keeps the same
    correlations with small, frame-friendly spreads around the identity.
    """
    pub = mgd.published_prior()
    sd = pub.std
    corr = pub.sigma / np.outer(sd, sd)
    std = np.array([0.05, 0.05, 0.08, 0.02, 0.02])
    return GaussianND(np.array([1.0, 1.0, 0.0, 0.0, 0.0]), corr * np.outer(std, std))


def random_polygon(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Convex polygon in [-1, 1]^2 that touches all four sides."""
    n = n or int(rng.integers(5, 9))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    pts = np.column_stack([np.cos(ang), np.sin(ang)])
    pts = pts[_hull_order(pts)]
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return 2 * (pts - lo) / (hi - lo) - 1


def _hull_order(pts):
    from scipy.spatial import ConvexHull

    return ConvexHull(pts).vertices


def random_shape(rng: np.random.Generator, dims: FrameDims, kinds=SHAPE_KINDS) -> ShapeSpec:
    kind = kinds[int(rng.integers(len(kinds)))]
    w = rng.uniform(0.15, 0.3) * min(dims.w, dims.h)
    h = w * rng.uniform(0.45, 0.75)
    verts = random_polygon(rng) if kind == "polygon" else None
    return ShapeSpec(kind, w, h, rng.uniform(-np.pi / 2, np.pi / 2), verts)


def rasterize(box: RBBox, shape: ShapeSpec, dims: FrameDims) -> np.ndarray:
    """Binary mask: pixel centers inside the shape placed in ``box``."""
    ys, xs = np.mgrid[0:dims.h, 0:dims.w].astype(float)
    c, s = math.cos(box.alpha), math.sin(box.alpha)
    dx, dy = xs - box.cx, ys - box.cy
    u = (c * dx + s * dy) / (box.w / 2)
    v = (-s * dx + c * dy) / (box.h / 2)
    if shape.kind == "rect":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    if shape.kind == "ellipse":
        return u * u + v * v <= 1
    inside = np.ones(u.shape, dtype=bool)
    verts = np.asarray(shape.vertices)
    nxt = np.roll(verts, -1, axis=0)
    for (x0, y0), (x1, y1) in zip(verts, nxt):
        inside &= (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0
    return inside


class _Scene:
    """Static textured background plus an object colour for one sequence."""

    def __init__(self, rng: np.random.Generator, dims: FrameDims, color=None):
        ys, xs = np.mgrid[0:dims.h, 0:dims.w] / max(dims.w, dims.h)
        base = rng.uniform(0.25, 0.75, 3)
        bg = np.repeat(base[None, None, :], dims.h, axis=0).repeat(dims.w, axis=1)
        for ch in range(3):
            for _ in range(3):
                fx, fy = rng.uniform(-12, 12, 2)
                bg[..., ch] += rng.uniform(0.03, 0.08) * np.sin(fx * xs + fy * ys + rng.uniform(0, 2 * np.pi))
        bg += rng.normal(0, 0.03, bg.shape)
        self.background = np.clip(bg, 0, 1)
        if color is None:
            color = base + rng.choice([-1.0, 1.0], 3) * rng.uniform(0.2, 0.4, 3)
        self.color = np.clip(np.asarray(color, dtype=float), 0, 1)
        self.stripe = rng.uniform(0.3, 0.8)

    def render(self, mask: np.ndarray, box: RBBox) -> np.ndarray:
        img = self.background.copy()
        ys, xs = np.nonzero(mask)
        u = math.cos(box.alpha) * (xs - box.cx) + math.sin(box.alpha) * (ys - box.cy)
        tex = 0.06 * np.sin(self.stripe * u)
        img[ys, xs] = np.clip(self.color[None, :] + tex[:, None], 0, 1)
        return img


def _fits(box: RBBox, dims: FrameDims, min_side: float) -> bool:
    if box.w < min_side or box.h < min_side:
        return False
    pts = box.corners()
    return bool(np.all(pts[:, 0] >= 0) and np.all(pts[:, 0] <= dims.w - 1)
                and np.all(pts[:, 1] >= 0) and np.all(pts[:, 1] <= dims.h - 1))


def _draw_motion(prior: GaussianND, box: RBBox, dims, rng, max_retries, min_side):
    for _ in range(max_retries + 1):
        v = mgd.sample(prior, 1, rng)[0]
        if v[0] <= MIN_SCALE or v[1] <= MIN_SCALE or abs(v[2]) > 1:
            continue
        p = MotionParams.from_latent(v)
        nxt = apply_transform(box, p, dims)
        if _fits(nxt, dims, min_side):
            return p, nxt
    raise GenerationError(f"no admissible motion after {max_retries} retries from {box}")


def synthesize_sequence(prior: GaussianND, shape: ShapeSpec | None, length: int, dims: FrameDims,
                        rng: np.random.Generator, *, max_retries: int = 50, min_side: float = 3.0,
                        placement_tries: int = 100) -> MaskSequence:
    """Generate one single-object sequence whose rbbox obeys the motion law."""
    if prior.k != 5:
        raise InvalidParameterError("motion prior must be 5-dimensional")
    if length < 1:
        raise InvalidParameterError("length must be >= 1")
    if shape is None:
        shape = random_shape(rng, dims)
    for _ in range(placement_tries):
        box = RBBox(rng.uniform(0, dims.w - 1), rng.uniform(0, dims.h - 1), shape.w, shape.h, shape.alpha)
        if _fits(box, dims, min_side):
            break
    else:
        raise GenerationError(f"initial box {shape.w:.1f}x{shape.h:.1f} does not fit in {dims.w}x{dims.h}")
    scene = _Scene(rng, dims, shape.color)
    boxes, params = [box], []
    for _ in range(length - 1):
        p, box = _draw_motion(prior, box, dims, rng, max_retries, min_side)
        params.append(p)
        boxes.append(box)
    frames = [rasterize(b, shape, dims) for b in boxes]
    images = [scene.render(m, b) for m, b in zip(frames, boxes)]
    return MaskSequence(frames, dims, images, boxes, params)


def sequence_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent per-sequence stream derived from (master seed, index)."""
    return np.random.default_rng([int(master_seed), int(index)])


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: str = "ok"

    def __bool__(self):
        return self.accepted


def filter_sequence(s: MaskSequence) -> FilterResult:
    """Drop sequences with a fully occluded frame or an object >= 70% of a frame side."""
    occluded = too_large = False
    for f in s.frames:
        f = np.asarray(f, dtype=bool)
        if not f.any():
            occluded = True
            continue
        cols = np.flatnonzero(f.any(axis=0))
        rows = np.flatnonzero(f.any(axis=1))
        if cols[-1] - cols[0] + 1 >= SIZE_LIMIT * s.dims.w or rows[-1] - rows[0] + 1 >= SIZE_LIMIT * s.dims.h:
            too_large = True
    if occluded:
        return FilterResult(False, "occluded")
    if too_large:
        return FilterResult(False, "too_large")
    return FilterResult(True)


def split_multi_object(annotation, images=None) -> list[MaskSequence]:
    """One binary sequence per label that is present in every frame (label 0 is background)."""
    labels = np.asarray(annotation)
    if labels.ndim != 3:
        raise InvalidParameterError(f"annotation must be T x H x W, got {labels.shape}")
    dims = FrameDims(labels.shape[2], labels.shape[1])
    present = None
    for frame in labels:
        ids = set(np.unique(frame).tolist()) - {0}
        present = ids if present is None else present & ids
    return [MaskSequence([f == lab for f in labels], dims, images) for lab in sorted(present or ())]


def crop_patch(frame, mask, P: int = 32, *, context: float = 1.5, window: float | None = None,
               source: int = 0) -> FramePatch:
    """Object-centred P x P patch.

    The square window has side ``window`` (default ``context`` times the
    longer rbbox side). Patch pixel ``(P//2, P//2)`` samples the rbbox center
    exactly. The mask uses nearest-neighbour resampling and the image uses
    bilinear. Anything outside the frame is zero.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise EmptyObjectError("cannot crop around an empty mask")
    frame = np.asarray(frame, dtype=float)
    if frame.ndim == 2:
        frame = frame[..., None]
    box = mask_to_rbbox(mask)
    side = float(window) if window is not None else context * max(box.w, box.h)
    step = side / P
    offs = (np.arange(P) - P // 2) * step
    xs = box.cx + offs
    ys = box.cy + offs
    gy, gx = np.meshgrid(ys, xs, indexing="ij")

    ri = np.floor(gy + 0.5).astype(int)
    ci = np.floor(gx + 0.5).astype(int)
    ok = (ri >= 0) & (ri < mask.shape[0]) & (ci >= 0) & (ci < mask.shape[1])
    gt = np.zeros((P, P), dtype=bool)
    gt[ok] = mask[ri[ok], ci[ok]]
    if not gt.any():
        # object thinner than the sampling step: keep its nearest pixel
        fy, fx = np.nonzero(mask)
        k = int(np.argmin((fx - box.cx) ** 2 + (fy - box.cy) ** 2))
        r = int(np.clip(round((fy[k] - box.cy) / step) + P // 2, 0, P - 1))
        c = int(np.clip(round((fx[k] - box.cx) / step) + P // 2, 0, P - 1))
        gt[r, c] = True

    image = np.stack([
        ndimage.map_coordinates(frame[..., ch], [gy, gx], order=1, mode="constant", cval=0.0)
        for ch in range(frame.shape[2])
    ], axis=-1)
    return FramePatch(np.clip(image, 0, 1), gt, source, (box.cx, box.cy), side)


def sequence_boxes(s: MaskSequence) -> list[RBBox]:
    """Per-frame rbboxes from the masks, with labelings tracked across frames."""
    boxes = []
    for f in s.frames:
        b = mask_to_rbbox(f)
        boxes.append(align_to(boxes[-1], b) if boxes else b)
    return boxes


def motion_latents(sequences) -> np.ndarray:
    """n x 5 latent motion vectors from every consecutive frame pair."""
    rows = []
    for s in sequences:
        boxes = sequence_boxes(s)
        for b0, b1 in zip(boxes, boxes[1:]):
            rows.append(extract_motion(b0, b1, s.dims).latent())
    return np.array(rows).reshape(-1, 5)


def analyze_dataset(sequences) -> GaussianND:
    """Fit the motion prior from mask sequences."""
    v = motion_latents(sequences)
    if len(v) < 1:
        raise InsufficientDataError("no consecutive frame pairs in the dataset")
    if len(v) < 2:
        raise InsufficientDataError("need at least 2 frame pairs to fit a covariance")
    return mgd.fit(v)


def sequence_patches(s: MaskSequence, P: int = 32, *, context: float = 1.5) -> list[FramePatch]:
    """Object-centred patches for every frame of a sequence with images."""
    if s.images is None:
        raise InvalidParameterError("sequence has no images to crop")
    return [crop_patch(img, m, P, context=context, source=k) for k, (img, m) in enumerate(zip(s.images, s.frames))]
