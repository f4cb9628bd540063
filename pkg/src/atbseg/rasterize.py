"""Contour-to-mask rasterization and cross-resolution resampling.

Rasterization convention (fixed; every consumer relies on it):
  * polylines are implicitly closed last-to-first;
  * a pixel is tissue (1) iff its center lies inside the closed polygon under
    the even-odd rule; centers exactly on the boundary count as inside;
  * pixel (ix, iy) has its center at coordinates (ix, iy) — origin at the
    top-left pixel center, x rightward, y downward.

Frames are resampled bilinearly, masks with nearest-neighbor (round-half-down
on the source coordinate), so masks stay binary and frames stay in [0, 1].

All functions here are pure and safe to call from multiple threads.
"""

from __future__ import annotations

import numpy as np

from .corpus import ContourSet, MaskTriple
from .errors import ConfigError, DataError, DegenerateContourError


def _as_polygon(polyline: np.ndarray, width: int, height: int) -> np.ndarray:
    poly = np.asarray(polyline, dtype=np.float64)
    if poly.ndim != 2 or poly.shape[1] != 2:
        raise DataError("polyline must be an (N, 2) array of (x, y)")
    if poly.shape[0] < 3:
        raise DegenerateContourError(
            f"polyline needs >= 3 vertices to enclose area, got {poly.shape[0]}"
        )
    if (
        poly[:, 0].min() < 0
        or poly[:, 0].max() >= width
        or poly[:, 1].min() < 0
        or poly[:, 1].max() >= height
    ):
        raise DataError("polyline has out-of-bounds vertices")
    return poly


def contour_to_mask(polyline: np.ndarray, width: int, height: int) -> np.ndarray:
    """Rasterize one closed contour to a binary (height, width) uint8 grid."""
    poly = _as_polygon(polyline, width, height)
    x1 = poly[:, 0]
    y1 = poly[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)

    mask = np.zeros((height, width), dtype=np.uint8)

    # Interior pass: scanline parity. For each pixel row, a center at integer
    # x is interior iff an odd number of edge crossings lie strictly to its
    # right. Edges contribute under the half-open rule [min(y), max(y)) so
    # scanlines through vertices are counted once.
    non_horizontal = y1 != y2
    counts = np.zeros((height, width + 1), dtype=np.int64)
    for e in np.nonzero(non_horizontal)[0]:
        ya, yb = y1[e], y2[e]
        lo = int(np.ceil(min(ya, yb)))
        hi = int(np.ceil(max(ya, yb)))  # exclusive
        lo = max(lo, 0)
        hi = min(hi, height)
        if lo >= hi:
            continue
        rows = np.arange(lo, hi, dtype=np.float64)
        t = (rows - ya) / (yb - ya)
        xs = x1[e] + t * (x2[e] - x1[e])
        # pixels with center x < crossing get one crossing to their right
        upto = np.clip(np.ceil(xs), 0, width).astype(np.int64)
        counts[np.arange(lo, hi), 0] += 1
        counts[np.arange(lo, hi), upto] -= 1
    parity = np.cumsum(counts[:, :-1], axis=1) % 2
    mask[parity == 1] = 1

    # Boundary pass: centers exactly on any edge count as inside.
    ys_grid, xs_grid = np.nonzero(_on_boundary_grid(poly, width, height))
    mask[ys_grid, xs_grid] = 1
    return mask


def _on_boundary_grid(poly: np.ndarray, width: int, height: int) -> np.ndarray:
    """Boolean grid of pixel centers lying exactly on a polygon edge."""
    on = np.zeros((height, width), dtype=bool)
    n = poly.shape[0]
    px = np.arange(width, dtype=np.float64)[None, :]
    py = np.arange(height, dtype=np.float64)[:, None]
    for e in range(n):
        ax, ay = poly[e]
        bx, by = poly[(e + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        in_box = (
            (px >= min(ax, bx))
            & (px <= max(ax, bx))
            & (py >= min(ay, by))
            & (py <= max(ay, by))
        )
        on |= (cross == 0.0) & in_box
    return on


def masks_from_contours(cs: ContourSet, width: int, height: int) -> MaskTriple:
    """Rasterize all three contours of an annotation."""
    grids = []
    for name, poly in zip(("c1", "c2", "c3"), cs.contours()):
        try:
            grids.append(contour_to_mask(poly, width, height))
        except DataError as exc:
            raise type(exc)(f"{name}: {exc}") from exc
    return MaskTriple(*grids)


def _check_target_dims(tw: int, th: int) -> None:
    if tw < 16 or th < 16:
        raise ConfigError(f"target dims must be >= 16, got {tw}x{th}")


def resize_frame(frame: np.ndarray, target_width: int, target_height: int) -> np.ndarray:
    """Bilinear resample of an intensity grid; output stays in [0, 1]."""
    _check_target_dims(target_width, target_height)
    src = np.asarray(frame, dtype=np.float64)
    sh, sw = src.shape
    out = _bilinear_axis(_bilinear_axis(src, sw, target_width, axis=1), sh, target_height, axis=0)
    return out.astype(np.float32)


def _bilinear_axis(src: np.ndarray, n_src: int, n_dst: int, axis: int) -> np.ndarray:
    scale = n_src / n_dst
    coords = (np.arange(n_dst, dtype=np.float64) + 0.5) * scale - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo0 = np.clip(lo, 0, n_src - 1)
    lo1 = np.clip(lo + 1, 0, n_src - 1)
    a = np.take(src, lo0, axis=axis)
    b = np.take(src, lo1, axis=axis)
    shape = [1, 1]
    shape[axis] = n_dst
    w = frac.reshape(shape)
    return a * (1.0 - w) + b * w


def nearest_source_index(n_dst: int, n_src: int) -> np.ndarray:
    """Source indices for nearest-neighbor resampling along one axis.

    The source coordinate of output cell d is (d + 0.5) * n_src / n_dst - 0.5;
    it is mapped to an index by round-half-down, i.e. ceil(coord - 0.5).
    """
    scale = n_src / n_dst
    coords = (np.arange(n_dst, dtype=np.float64) + 0.5) * scale - 0.5
    idx = np.ceil(coords - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_src - 1)


def resize_mask(mask: np.ndarray, target_width: int, target_height: int) -> np.ndarray:
    """Nearest-neighbor resample of a binary grid; values stay in {0, 1}."""
    _check_target_dims(target_width, target_height)
    src = np.asarray(mask, dtype=np.uint8)
    sh, sw = src.shape
    rows = nearest_source_index(target_height, sh)
    cols = nearest_source_index(target_width, sw)
    return src[np.ix_(rows, cols)]
