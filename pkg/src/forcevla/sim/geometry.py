"""Convex-polygon primitives for planar penalty contact."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def edge_normals(poly: np.ndarray) -> np.ndarray:
    """Outward unit normals of a counter-clockwise polygon (one per edge i -> i+1)."""
    e = np.roll(poly, -1, axis=0) - poly
    n = np.stack([e[:, 1], -e[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def signed_distances(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """(M, n_edges) signed distance of each point to each edge line; < 0 is inside."""
    n = edge_normals(poly)
    return np.einsum("mej,ej->me", points[:, None, :] - poly[None, :, :], n)


def inside(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    px, py = points[:, 0], points[:, 1]
    hit = (px > lo[0]) & (px < hi[0]) & (py > lo[1]) & (py < hi[1])
    if not hit.any():
        return hit
    n = edge_normals(poly)
    c = (n * poly).sum(axis=1)
    sel = np.nonzero(hit)[0]
    ok = np.ones(sel.size, dtype=bool)
    for (nx, ny), ci in zip(n, c):
        ok &= px[sel] * nx + py[sel] * ny - ci < 0.0
    hit[sel] = ok
    return hit


@dataclass(frozen=True)
class Penetration:
    point: np.ndarray
    normal: np.ndarray  # direction of the force on the peg
    depth: float


def deepest_penetration(points: np.ndarray, poly: np.ndarray) -> Penetration | None:
    """Deepest of ``points`` inside ``poly``; normal is the nearest face's outward normal."""
    d = signed_distances(points, poly)
    ins = (d < 0.0).all(axis=1)
    if not ins.any():
        return None
    depth_per_edge = -d[ins]
    face = depth_per_edge.argmin(axis=1)
    depth = depth_per_edge[np.arange(face.size), face]
    k = int(depth.argmax())
    normals = edge_normals(poly)
    return Penetration(points[ins][k], normals[face[k]], float(depth[k]))


def sample_boundary(poly: np.ndarray, per_edge: int) -> np.ndarray:
    """``per_edge`` evenly spaced points on every edge (vertices included once)."""
    pts = []
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        s = np.linspace(0.0, 1.0, per_edge, endpoint=False)[:, None]
        pts.append(a + s * (b - a))
    return np.concatenate(pts, axis=0)
