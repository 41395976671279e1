"""Effective dilation of deformable filters and sampling-location traces.

Effective dilation is the mean Euclidean distance between sampling locations
that are 4-neighbours in kernel index space (``2k(k-1)`` pairs for a k x k
filter), so an undeformed dilation-d filter scores exactly d.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bilinear_sampler import compute_taps, gather_corners, interpolate
from .conv_ops import ConvSpec, grid_of

SMALL_AREA = 96 ** 2
LARGE_AREA = 224 ** 2
CATEGORIES = ("small", "medium", "large", "background")


@dataclass(frozen=True)
class SampleTrace:
    unit: tuple[int, int, int]  # (layer index, y, x)
    points: np.ndarray  # (N**depth, 2) as (x, y) on the bottom input
    depth: int


@dataclass(frozen=True)
class DilationStats:
    mean: float
    std: float
    count: int


def effective_dilation(sample_points) -> float | np.ndarray:
    """Mean adjacent-pair distance of a (..., kh, kw, 2) grid of sampling points."""
    pts = np.asarray(sample_points, dtype=np.float64)
    if pts.ndim < 3 or pts.shape[-1] != 2:
        raise ValueError(f"expected (..., kh, kw, 2) points, got shape {pts.shape}")
    kh, kw = pts.shape[-3:-1]
    if kh < 2 and kw < 2:
        raise ValueError("effective dilation needs a kernel of at least 2 taps per side")
    horiz = np.linalg.norm(pts[..., :, 1:, :] - pts[..., :, :-1, :], axis=-1)
    vert = np.linalg.norm(pts[..., 1:, :, :] - pts[..., :-1, :, :], axis=-1)
    total = horiz.sum(axis=(-2, -1)) + vert.sum(axis=(-2, -1))
    mean = total / (kh * (kw - 1) + kw * (kh - 1))
    return float(mean) if np.ndim(mean) == 0 else mean


def filter_sample_points(spec: ConvSpec, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Sampling points (n, ho, wo, kh, kw, 2) and filter centers (ho, wo, 2), both as (x, y)."""
    offsets = np.asarray(offsets, dtype=np.float64)
    n, ch, ho, wo = offsets.shape
    if ch != 2 * spec.taps:
        raise ValueError(f"offset field needs {2 * spec.taps} channels, got {ch}")
    kh, kw = spec.kernel
    cy, cx = spec.centers(ho, wo)
    grid = np.array([(p.x, p.y) for p in grid_of(spec)]).reshape(kh, kw, 2)
    centers = np.stack(np.broadcast_arrays(cx[None, :], cy[:, None]), axis=-1)
    off = offsets.reshape(n, kh, kw, 2, ho, wo).transpose(0, 4, 5, 1, 2, 3)
    # offset channels are (row, col); points are (x, y)
    pts = centers[None, :, :, None, None, :] + grid[None, None, None] + off[..., ::-1]
    return pts, centers


def area_category(area: float) -> str:
    if area < SMALL_AREA:
        return "small"
    if area < LARGE_AREA:
        return "medium"
    return "large"


def categorize_filters(centers, boxes) -> list[str]:
    """Label each (x, y) center by the smallest box containing it.

    ``boxes`` holds (x, y, w, h) rows; a center on the box edge counts as inside.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = []
    for cx, cy in centers:
        inside = (
            (boxes[:, 0] <= cx) & (cx <= boxes[:, 0] + boxes[:, 2])
            & (boxes[:, 1] <= cy) & (cy <= boxes[:, 1] + boxes[:, 3])
        )
        if not inside.any():
            labels.append("background")
            continue
        areas = boxes[inside, 2] * boxes[inside, 3]
        labels.append(area_category(float(areas.min())))
    return labels


def aggregate_dilation_stats(values, categories) -> dict[str, DilationStats]:
    """Population mean and std per category; empty categories are left out."""
    values = np.asarray(values, dtype=np.float64).ravel()
    categories = list(categories)
    if len(categories) != values.size:
        raise ValueError("one category per value required")
    labels = np.array(categories, dtype=object)
    out = {}
    for cat in CATEGORIES + tuple(sorted(set(categories) - set(CATEGORIES))):
        vals = values[labels == cat]
        if vals.size:
            out[cat] = DilationStats(float(vals.mean()), float(vals.std()), int(vals.size))
    return out


def trace_sampling(layers, unit: tuple[int, int]) -> SampleTrace:
    """Expand one top-layer output unit into its sampling points on the bottom input.

    ``layers`` runs bottom to top as ``(spec, field)`` pairs, ``field`` being
    the layer's (2N, ho, wo) offset field. Offsets at fractional positions
    are read by bilinear interpolation of the field.
    """
    if not layers:
        raise ValueError("need at least one layer")
    _, top = layers[-1]
    top = np.asarray(top)
    y, x = unit
    if not (0 <= y < top.shape[-2] and 0 <= x < top.shape[-1]):
        raise ValueError(f"unit {unit} outside the top output of size {top.shape[-2:]}")
    pts = np.array([[float(x), float(y)]])
    for spec, fld in reversed(layers):
        fld = np.asarray(fld, dtype=np.float64)
        if fld.ndim == 4:
            fld = fld[0]
        if fld.shape[0] != 2 * spec.taps:
            raise ValueError(f"offset field needs {2 * spec.taps} channels, got {fld.shape[0]}")
        kh, kw = spec.kernel
        taps = compute_taps(pts[:, 1], pts[:, 0], fld.shape[1], fld.shape[2])
        # (M, 2N) offsets at each point
        off = interpolate(gather_corners(fld[None], 0, taps), taps)
        cy = pts[:, 1] * spec.stride[0] - spec.padding[0] + spec.dilation * (kh - 1) / 2
        cx = pts[:, 0] * spec.stride[1] - spec.padding[1] + spec.dilation * (kw - 1) / 2
        grid = np.array([(p.x, p.y) for p in grid_of(spec)])
        new_x = cx[:, None] + grid[None, :, 0] + off[:, 1::2]
        new_y = cy[:, None] + grid[None, :, 1] + off[:, 0::2]
        pts = np.stack([new_x.ravel(), new_y.ravel()], axis=-1)
    return SampleTrace((len(layers) - 1, int(y), int(x)), pts, len(layers))


def write_trace_csv(path, trace: SampleTrace) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["depth", "y", "x"])
        for px, py in trace.points:
            writer.writerow([trace.depth, repr(float(py)), repr(float(px))])


def write_stats_csv(path, stats: dict[str, DilationStats]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "mean", "std", "count"])
        for cat, s in stats.items():
            writer.writerow([cat, repr(s.mean), repr(s.std), s.count])
