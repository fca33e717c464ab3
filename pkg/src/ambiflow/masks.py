"""Person masks on the 256x256 crop: union protocol, containment tests, an
exact euclidean distance transform, and object-occlusion detection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import CROP_SIZE

OBJECT_OCCLUSION_TAU = 0.9


@dataclass
class PersonMask:
    grid: np.ndarray  # (256, 256) bool, row = y
    provenance: str = "single"  # "single" | "union"
    object_occluded: bool = False

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        if self.grid.shape != (CROP_SIZE, CROP_SIZE):
            raise ValueError(f"mask must be {CROP_SIZE}x{CROP_SIZE}, got {self.grid.shape}")

    @property
    def area(self) -> int:
        return int(self.grid.sum())


@dataclass
class DistanceField:
    """Exact euclidean distances (pixels) to the nearest mask pixel; zero on
    mask pixels. Pixel (iy, ix) is the point (x=ix, y=iy)."""

    values: np.ndarray
    mask_points: np.ndarray = field(repr=False)  # (M, 2) as (x, y), for out-of-grid queries


def union_masks(parts: list[PersonMask]) -> PersonMask:
    if not parts:
        raise ValueError("union of zero masks")
    grid = parts[0].grid.copy()
    for m in parts[1:]:
        if m.grid.shape != grid.shape:
            raise ValueError("mask dimensions differ")
        grid |= m.grid
    return PersonMask(grid, provenance="union")


def inside(points, mask: PersonMask) -> np.ndarray:
    """Floor-to-pixel containment for (..., 2) crop-pixel points; out of
    bounds is False."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    ix = np.floor(pts[..., 0]).astype(np.int64)
    iy = np.floor(pts[..., 1]).astype(np.int64)
    ok = (ix >= 0) & (ix < CROP_SIZE) & (iy >= 0) & (iy < CROP_SIZE)
    out = np.zeros(pts.shape[:-1], dtype=bool)
    out[ok] = mask.grid[iy[ok], ix[ok]]
    return out[0] if squeeze else out


def _rowwise_1d_distance(mask: np.ndarray) -> np.ndarray:
    """Per row: distance (in columns) to the nearest mask pixel; inf if none."""
    h, w = mask.shape
    inf = np.float64(np.inf)
    d = np.where(mask, 0.0, inf)
    for x in range(1, w):
        d[:, x] = np.minimum(d[:, x], d[:, x - 1] + 1.0)
    for x in range(w - 2, -1, -1):
        d[:, x] = np.minimum(d[:, x], d[:, x + 1] + 1.0)
    return d


def distance_transform(mask: PersonMask) -> DistanceField:
    """Exact euclidean distance transform.

    Separable exact method: 1-D column distances per row, then an exact
    min-plus pass over rows of squared distances (O(H^2 W), fine at 256^2).
    """
    grid = mask.grid
    if not grid.any():
        raise ValueError("distance transform of an empty mask")
    g = _rowwise_1d_distance(grid)
    g2 = np.where(np.isinf(g), np.inf, g * g)
    h = grid.shape[0]
    dy = (np.arange(h)[:, None] - np.arange(h)[None, :]).astype(np.float64) ** 2  # (y, y')
    out = np.empty_like(g2)
    for y in range(h):
        out[y] = np.min(g2 + dy[y][:, None], axis=0)
    values = np.sqrt(out)
    ys, xs = np.nonzero(grid)
    return DistanceField(values=values, mask_points=np.stack([xs, ys], axis=1).astype(np.float64))


def mask_distance(points, field: DistanceField) -> np.ndarray:
    """Distance from floored pixel coordinates to the nearest mask pixel.

    In-grid points read the distance field; out-of-grid points are measured
    directly against the mask pixel set (identical to a brute-force scan).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ix = np.floor(pts[:, 0]).astype(np.int64)
    iy = np.floor(pts[:, 1]).astype(np.int64)
    out = np.empty(len(pts))
    ingrid = (ix >= 0) & (ix < CROP_SIZE) & (iy >= 0) & (iy < CROP_SIZE)
    out[ingrid] = field.values[iy[ingrid], ix[ingrid]]
    if np.any(~ingrid):
        q = np.stack([ix[~ingrid], iy[~ingrid]], axis=1).astype(np.float64)
        diff = q[:, None, :] - field.mask_points[None, :, :]
        out[~ingrid] = np.sqrt((diff**2).sum(axis=2)).min(axis=1)
    return out


def detect_object_occlusion(gt_body_2d: np.ndarray, mask: PersonMask,
                            tau: float = OBJECT_OCCLUSION_TAU) -> bool:
    """True when the mask covers too little of the projected ground-truth
    body: fraction of in-crop points inside the mask below tau."""
    pts = np.asarray(gt_body_2d, dtype=np.float64)
    in_crop = (
        (pts[:, 0] >= 0) & (pts[:, 0] < CROP_SIZE)
        & (pts[:, 1] >= 0) & (pts[:, 1] < CROP_SIZE)
    )
    if not in_crop.any():
        raise ValueError("no projected body point inside the crop")
    frac = inside(pts[in_crop], mask).mean()
    return bool(frac < tau)


def rasterize_capsules(segments_px: np.ndarray, radii_px: np.ndarray) -> np.ndarray:
    """Union of capsules: (B, 2, 2) segment endpoints in crop px with per-
    segment radii -> (256, 256) bool grid."""
    grid = np.zeros((CROP_SIZE, CROP_SIZE), dtype=bool)
    xs = np.arange(CROP_SIZE) + 0.0
    for (a, b), r in zip(segments_px, radii_px):
        lo_x = max(int(np.floor(min(a[0], b[0]) - r - 1)), 0)
        hi_x = min(int(np.ceil(max(a[0], b[0]) + r + 1)), CROP_SIZE - 1)
        lo_y = max(int(np.floor(min(a[1], b[1]) - r - 1)), 0)
        hi_y = min(int(np.ceil(max(a[1], b[1]) + r + 1)), CROP_SIZE - 1)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        px = xs[lo_x:hi_x + 1][None, :]
        py = xs[lo_y:hi_y + 1][:, None]
        ab = b - a
        denom = float(ab @ ab)
        if denom < 1e-12:
            t = np.zeros((hi_y - lo_y + 1, hi_x - lo_x + 1))
        else:
            t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
        dx = px - (a[0] + t * ab[0])
        dy = py - (a[1] + t * ab[1])
        grid[lo_y:hi_y + 1, lo_x:hi_x + 1] |= dx * dx + dy * dy <= r * r
    return grid
