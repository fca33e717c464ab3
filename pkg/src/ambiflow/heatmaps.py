"""Per-joint heatmaps treated as multinomial distributions over a 48x64 grid:
argmax decoding, confidence-gated joint status, and cell sampling with the
low-confidence discard rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import CROP_SIZE

GRID_W = 48
GRID_H = 64
CELL_W = CROP_SIZE / GRID_W
CELL_H = CROP_SIZE / GRID_H

# cells below this confidence are discarded before sampling
SAMPLE_DISCARD_THRESHOLD = 0.05
VISIBLE_CONF = 0.5
UNCERTAIN_CONF = 0.7


@dataclass
class JointStatus:
    """Per-joint confidence gates; visible/uncertain come from the heatmap
    maximum, inside_crop from the ground-truth 2D position."""

    visible: np.ndarray      # max conf >= 0.5
    uncertain: np.ndarray    # max conf < 0.7
    inside_crop: np.ndarray  # gt2d within [0, 256)^2
    max_conf: np.ndarray


def cell_center_px(ix, iy) -> tuple[np.ndarray, np.ndarray]:
    """Center of grid cell (ix, iy) in crop pixels."""
    return (np.asarray(ix) + 0.5) * CELL_W, (np.asarray(iy) + 0.5) * CELL_H


def argmax_pose(hm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Highest-likelihood 2D pose from (K, H, W) heatmaps.

    Returns (keypoints in crop px (K, 2), confidences (K,), valid (K,)).
    Ties resolve to the lowest linear (row-major) index; an all-zero grid is
    flagged invalid with confidence 0.
    """
    hm = np.asarray(hm, dtype=np.float64)
    k = hm.shape[0]
    flat = hm.reshape(k, -1)
    lin = np.argmax(flat, axis=1)
    conf = flat[np.arange(k), lin]
    iy, ix = np.divmod(lin, GRID_W)
    x, y = cell_center_px(ix, iy)
    kps = np.stack([x, y], axis=1)
    valid = conf > 0.0
    kps[~valid] = 0.0
    return kps, conf, valid


def sample_heatmap(grid: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points from one (H, W) heatmap interpreted as a multinomial.

    Cells with confidence below 0.05 are discarded before normalization;
    samples are jittered uniformly within their cell and returned in
    [-1, 1]^2 together with the source cell confidences.
    """
    grid = np.asarray(grid, dtype=np.float64)
    keep = grid >= SAMPLE_DISCARD_THRESHOLD
    mass = np.where(keep, grid, 0.0).ravel()
    total = mass.sum()
    if total <= 0.0:
        raise ValueError("degenerate heatmap: no cell at or above the discard threshold")
    cdf = np.cumsum(mass) / total
    lin = np.searchsorted(cdf, rng.random(n), side="right")
    lin = np.minimum(lin, mass.size - 1)
    iy, ix = np.divmod(lin, GRID_W)
    jx = rng.random(n)
    jy = rng.random(n)
    x_px = (ix + jx) * CELL_W
    y_px = (iy + jy) * CELL_H
    coords = np.stack([x_px, y_px], axis=1) / (CROP_SIZE / 2.0) - 1.0
    return coords, grid.ravel()[lin]


def classify_joints(hm: np.ndarray, gt2d: np.ndarray) -> JointStatus:
    """Threshold-exact joint gates: visible at >= 0.5 (inclusive), uncertain
    strictly below 0.7, inside_crop over the half-open crop square."""
    hm = np.asarray(hm, dtype=np.float64)
    max_conf = hm.reshape(hm.shape[0], -1).max(axis=1)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    inside = (
        (gt2d[:, 0] >= 0.0) & (gt2d[:, 0] < CROP_SIZE)
        & (gt2d[:, 1] >= 0.0) & (gt2d[:, 1] < CROP_SIZE)
    )
    return JointStatus(
        visible=max_conf >= VISIBLE_CONF,
        uncertain=max_conf < UNCERTAIN_CONF,
        inside_crop=inside,
        max_conf=max_conf,
    )


def render_gaussian(center_px: np.ndarray, sigma_cells: float, amplitude: float,
                    out: np.ndarray | None = None) -> np.ndarray:
    """Accumulate an isotropic Gaussian blob (sigma in cell units) onto a grid."""
    if out is None:
        out = np.zeros((GRID_H, GRID_W))
    cx = center_px[0] / CELL_W
    cy = center_px[1] / CELL_H
    xs = np.arange(GRID_W) + 0.5
    ys = np.arange(GRID_H) + 0.5
    d2 = (xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2
    out += amplitude * np.exp(-d2 / (2.0 * sigma_cells**2))
    return out
