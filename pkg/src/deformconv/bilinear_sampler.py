"""Bilinear sampling of feature planes at fractional locations.

Sampling follows ``x(p) = sum_q G(q, p) x(q)`` with the separable kernel
``G(q, p) = g(q_x, p_x) g(q_y, p_y)`` and ``g(a, b) = max(0, 1 - |a - b|)``,
where ``q`` ranges over the lattice points of the plane only. Points in the
one-pixel band around the plane fade linearly to zero; points further out
sample exactly zero.

Derivatives with respect to the sample location use the floor cell
``floor(p) + frac`` with ``frac`` in ``[0, 1)``, which gives the right-sided
derivative at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class Point2(NamedTuple):
    """Continuous location; ``x`` is the column, ``y`` the row, in pixels."""

    x: float
    y: float


@dataclass(frozen=True)
class SampleGrad:
    d_dx: float
    d_dy: float
    # ((row, col), weight) for every in-plane tap with a non-zero weight
    taps: list[tuple[tuple[int, int], float]] = field(default_factory=list)


def kernel_g(a: float, b: float) -> float:
    return max(0.0, 1.0 - abs(a - b))


def sample(plane: np.ndarray, p: Point2) -> float:
    value, _ = sample_with_grad(plane, p)
    return value


def sample_with_grad(plane: np.ndarray, p: Point2) -> tuple[float, SampleGrad]:
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2 or plane.size == 0:
        raise ValueError(f"expected a non-empty 2-D plane, got shape {plane.shape}")
    height, width = plane.shape
    x0 = math.floor(p.x)
    y0 = math.floor(p.y)
    fx = p.x - x0
    fy = p.y - y0

    def at(r, c):
        if 0 <= r < height and 0 <= c < width:
            return float(plane[r, c])
        return 0.0

    v00, v01 = at(y0, x0), at(y0, x0 + 1)
    v10, v11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    corners = (
        ((y0, x0), (1.0 - fy) * (1.0 - fx), v00),
        ((y0, x0 + 1), (1.0 - fy) * fx, v01),
        ((y0 + 1, x0), fy * (1.0 - fx), v10),
        ((y0 + 1, x0 + 1), fy * fx, v11),
    )
    value = 0.0
    for _, wgt, v in corners:
        value += wgt * v
    taps = [
        (loc, wgt)
        for loc, wgt, _ in corners
        if wgt != 0.0 and 0 <= loc[0] < height and 0 <= loc[1] < width
    ]
    d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    return value, SampleGrad(d_dx=d_dx, d_dy=d_dy, taps=taps)


class Taps(NamedTuple):
    """Floor-cell bilinear taps for an array of sample coordinates.

    ``rows``/``cols`` hold the four corner indices (clipped into the plane),
    ``weights`` the bilinear weights with out-of-plane corners zeroed, and
    ``valid`` marks which corners lie inside the plane. Corner order is
    (top-left, top-right, bottom-left, bottom-right).
    """

    rows: tuple[np.ndarray, ...]
    cols: tuple[np.ndarray, ...]
    weights: tuple[np.ndarray, ...]
    valid: tuple[np.ndarray, ...]
    fy: np.ndarray
    fx: np.ndarray


def compute_taps(ys, xs, height: int, width: int) -> Taps:
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = ys - y0f
    fx = xs - x0f
    # guard the int cast against far-away points; those are invalid anyway
    y0 = np.clip(y0f, -2, height + 1).astype(np.intp)
    x0 = np.clip(x0f, -2, width + 1).astype(np.intp)
    y1 = y0 + 1
    x1 = x0 + 1
    vy0 = (y0 >= 0) & (y0 < height)
    vy1 = (y1 >= 0) & (y1 < height)
    vx0 = (x0 >= 0) & (x0 < width)
    vx1 = (x1 >= 0) & (x1 < width)
    valid = (vy0 & vx0, vy0 & vx1, vy1 & vx0, vy1 & vx1)
    raw = (
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    )
    weights = tuple(np.where(v, wgt, 0.0) for v, wgt in zip(valid, raw))
    cy0 = np.clip(y0, 0, max(height - 1, 0))
    cy1 = np.clip(y1, 0, max(height - 1, 0))
    cx0 = np.clip(x0, 0, max(width - 1, 0))
    cx1 = np.clip(x1, 0, max(width - 1, 0))
    return Taps(
        rows=(cy0, cy0, cy1, cy1),
        cols=(cx0, cx1, cx0, cx1),
        weights=weights,
        valid=valid,
        fy=fy,
        fx=fx,
    )


def gather_corners(planes: np.ndarray, batch_idx, taps: Taps) -> list[np.ndarray]:
    """Corner values ``planes[b, :, r, c]`` with zero outside the plane.

    ``planes`` has shape (n, C, H, W); the result for each corner has the
    tap array's shape with a trailing channel axis.
    """
    hwc = np.moveaxis(planes, 1, -1)
    out = []
    for r, c, v in zip(taps.rows, taps.cols, taps.valid):
        vals = hwc[batch_idx, r, c]
        out.append(np.where(v[..., None], vals, 0.0))
    return out


def interpolate(corners: list[np.ndarray], taps: Taps) -> np.ndarray:
    v00, v01, v10, v11 = corners
    w00, w01, w10, w11 = (w[..., None] for w in taps.weights)
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


def coordinate_grads(corners: list[np.ndarray], taps: Taps) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the interpolated values w.r.t. the row and column coordinate."""
    v00, v01, v10, v11 = corners
    fy = taps.fy[..., None]
    fx = taps.fx[..., None]
    d_dy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01)
    d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    return d_dy, d_dx


def scatter_corners(
    grad_values: np.ndarray, batch_idx, taps: Taps, shape: tuple[int, int, int, int]
) -> np.ndarray:
    """Adjoint of :func:`gather_corners` followed by :func:`interpolate`.

    ``grad_values`` carries a trailing channel axis; the result has ``shape``
    (n, C, H, W).
    """
    n, channels, height, width = shape
    batch_idx = np.broadcast_to(batch_idx, taps.fy.shape)
    flat_parts = []
    weight_parts = []
    for r, c, wgt in zip(taps.rows, taps.cols, taps.weights):
        flat_parts.append(((batch_idx * height + r) * width + c).ravel())
        weight_parts.append((grad_values * wgt[..., None]).reshape(-1, channels))
    flat = np.concatenate(flat_parts)
    vals = np.concatenate(weight_parts, axis=0)
    size = n * height * width
    out = np.empty((channels, size))
    for ch in range(channels):
        out[ch] = np.bincount(flat, weights=vals[:, ch], minlength=size)
    return np.ascontiguousarray(out.reshape(channels, n, height, width).transpose(1, 0, 2, 3))
