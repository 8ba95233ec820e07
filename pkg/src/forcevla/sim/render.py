"""Supersampled rasterization of the scene into small intensity grids."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import inside

PEG_INTENSITY = 1.0
SOCKET_INTENSITY = 0.5


def sample_points(center, extent: float, grid: int, supersample: int) -> np.ndarray:
    """World coordinates of all sub-pixel samples, shape (grid, grid, ss*ss, 2).

    Row 0 is the top of the image (largest y).
    """
    n = grid * supersample
    step = extent / n
    offs = (np.arange(n) + 0.5) * step - extent / 2
    xs = center[0] + offs
    ys = center[1] - offs
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1)
    pts = pts.reshape(grid, supersample, grid, supersample, 2).transpose(0, 2, 1, 3, 4)
    return pts.reshape(grid, grid, supersample * supersample, 2)


def rasterize(shapes: Sequence[tuple[np.ndarray, float]], center, extent: float, grid: int,
              supersample: int, mask_rect=None) -> np.ndarray:
    """Mean over sub-samples of the brightest shape covering each sample.

    Samples inside ``mask_rect`` (xmin, ymin, xmax, ymax) are forced to 0.
    """
    pts = sample_points(center, extent, grid, supersample)
    flat = pts.reshape(-1, 2)
    val = np.zeros(flat.shape[0])
    for poly, intensity in shapes:
        hit = inside(flat, poly)
        val = np.where(hit, np.maximum(val, intensity), val)
    if mask_rect is not None:
        x0, y0, x1, y1 = mask_rect
        masked = (flat[:, 0] >= x0) & (flat[:, 0] <= x1) & (flat[:, 1] >= y0) & (flat[:, 1] <= y1)
        val[masked] = 0.0
    return val.reshape(grid, grid, -1).mean(axis=-1)


def render_views(state, cfg, mode) -> tuple[np.ndarray, np.ndarray]:
    from .env import PerturbationMode, peg_polygon, socket_polygons

    shapes = [(p, SOCKET_INTENSITY) for p in socket_polygons(state, cfg).values()]
    shapes.append((peg_polygon(state, cfg), PEG_INTENSITY))
    mask = cfg.occlusion_rect if mode is PerturbationMode.OCCLUSION else None
    base = rasterize(shapes, cfg.base_center, cfg.base_extent, cfg.grid, cfg.supersample, mask)
    wrist = rasterize(shapes, (state.x, state.y), cfg.wrist_extent, cfg.grid, cfg.supersample,
                      mask)
    return base, wrist
