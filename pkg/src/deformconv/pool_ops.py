"""Average RoI pooling, deformable RoI pooling and their position-sensitive forms.

Pooled outputs use image layout: ``out[c, j, i]`` is the bin with width-bin
index ``i`` and height-bin index ``j``. Bin offsets are arrays of shape
(2, k, k) in the same layout, channel 0 holding the row offset and channel 1
the column offset.

Position-sensitive score maps put bin ``(i, j)`` of class ``c`` in channel
``c*k*k + i*k + j``. Offset fields for deformable PS pooling use the same
scheme with the two offset components in place of classes: channel
``comp*k*k + i*k + j`` (``comp`` 0 = row, 1 = column); per-class fields use
``(c*2 + comp)*k*k + i*k + j``.

RoIs are given in feature-map pixels. Plain pooling reads the integer
lattice, so its RoI corner must be integral; out-of-map pixels read as zero
and still count towards the bin size.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import _parallel
from .bilinear_sampler import Point2, compute_taps, coordinate_grads
from .tensor_core import as_tensor4

DEFAULT_GAMMA = 0.1


@dataclass(frozen=True)
class Roi:
    batch: int
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"RoI width and height must be >= 1, got {self.w}x{self.h}")
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise ValueError("RoI coordinates must be finite")

    @property
    def p0(self) -> Point2:
        return Point2(self.x, self.y)

    def scaled(self, s: float) -> Roi:
        """Same corner, width and height multiplied by ``s``."""
        return Roi(self.batch, self.x, self.y, self.w * s, self.h * s)


@dataclass(frozen=True)
class BinOffsets:
    pixel: np.ndarray
    normalized: np.ndarray
    gamma: float = DEFAULT_GAMMA

    @classmethod
    def from_normalized(cls, normalized, roi: Roi, gamma: float = DEFAULT_GAMMA) -> BinOffsets:
        normalized = np.asarray(normalized, dtype=np.float64)
        return cls(denormalize(normalized, roi, gamma), normalized, gamma)

    @classmethod
    def zeros(cls, k: int, gamma: float = DEFAULT_GAMMA) -> BinOffsets:
        return cls(np.zeros((2, k, k)), np.zeros((2, k, k)), gamma)


def denormalize(normalized, roi: Roi, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Pixel offsets ``gamma * normalized * (w, h)`` (element-wise per component)."""
    normalized = np.asarray(normalized, dtype=np.float64)
    out = np.empty_like(normalized)
    out[0] = gamma * normalized[0] * roi.h
    out[1] = gamma * normalized[1] * roi.w
    return out


def normalized_offset_grad(d_pixel, roi: Roi, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    d_pixel = np.asarray(d_pixel, dtype=np.float64)
    out = np.empty_like(d_pixel)
    out[0] = d_pixel[0] * (gamma * roi.h)
    out[1] = d_pixel[1] * (gamma * roi.w)
    return out


def _pixel_offsets(offsets, k: int) -> np.ndarray:
    if isinstance(offsets, BinOffsets):
        offsets = offsets.pixel
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != (2, k, k):
        raise ValueError(f"bin offsets must have shape {(2, k, k)}, got {offsets.shape}")
    return offsets


def bin_span(i: int, j: int, roi: Roi, k: int) -> tuple[range, range]:
    """Column and row ranges of bin ``(i, j)``, relative to the RoI corner."""
    if not (0 <= i < k and 0 <= j < k):
        raise ValueError(f"bin ({i}, {j}) outside a {k}x{k} grid")
    xs = range(math.floor(i * roi.w / k), math.ceil((i + 1) * roi.w / k))
    ys = range(math.floor(j * roi.h / k), math.ceil((j + 1) * roi.h / k))
    return xs, ys


class _Bins:
    """Flattened pixel list of all k*k bins of one RoI."""

    def __init__(self, roi: Roi, k: int):
        self.k = k
        self.bin, self.i, self.j, self.rel_y, self.rel_x, self.counts = _bin_layout(
            float(roi.w), float(roi.h), int(k)
        )

    def average(self, vals: np.ndarray) -> np.ndarray:
        """Per-bin means of sample values with a leading channel axis."""
        nb = self.k * self.k
        out = np.empty((vals.shape[0], nb))
        for c in range(vals.shape[0]):
            out[c] = np.bincount(self.bin, weights=vals[c], minlength=nb)
        out /= self.counts
        return out.reshape(-1, self.k, self.k)

    def spread(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`average`: (C, k, k) -> (C, S)."""
        g = grad.reshape(grad.shape[0], -1) / self.counts
        return g[:, self.bin]


@lru_cache(maxsize=256)
def _bin_layout(w: float, h: float, k: int):
    roi = Roi(0, 0.0, 0.0, w, h)
    bins, rel_y, rel_x, ii, jj = [], [], [], [], []
    counts = np.empty(k * k)
    for j in range(k):
        for i in range(k):
            xs, ys = bin_span(i, j, roi, k)
            gy, gx = np.meshgrid(np.array(ys), np.array(xs), indexing="ij")
            counts[j * k + i] = gy.size
            bins.append(np.full(gy.size, j * k + i))
            ii.append(np.full(gy.size, i))
            jj.append(np.full(gy.size, j))
            rel_y.append(gy.ravel())
            rel_x.append(gx.ravel())
    arrays = (
        np.concatenate(bins),
        np.concatenate(ii),
        np.concatenate(jj),
        np.concatenate(rel_y).astype(np.float64),
        np.concatenate(rel_x).astype(np.float64),
        counts,
    )
    for a in arrays:
        a.flags.writeable = False
    return arrays


def _lattice_positions(roi: Roi, bins: _Bins) -> tuple[np.ndarray, np.ndarray]:
    if roi.x != math.floor(roi.x) or roi.y != math.floor(roi.y):
        raise ValueError(f"plain RoI pooling needs an integral corner, got ({roi.x}, {roi.y})")
    return (int(roi.y) + bins.rel_y).astype(np.intp), (int(roi.x) + bins.rel_x).astype(np.intp)


def _check_batch(x: np.ndarray, roi: Roi) -> None:
    if not 0 <= roi.batch < x.shape[0]:
        raise ValueError(f"RoI batch {roi.batch} out of range for {x.shape[0]} images")


def roi_pool(x, roi: Roi, k: int) -> np.ndarray:
    """Average of each bin's lattice pixels, shape (C, k, k)."""
    x = as_tensor4(x)
    _check_batch(x, roi)
    bins = _Bins(roi, k)
    ys, xs = _lattice_positions(roi, bins)
    height, width = x.shape[2:]
    inside = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
    vals = np.where(inside, x[roi.batch][:, ys.clip(0, height - 1), xs.clip(0, width - 1)], 0.0)
    return bins.average(vals)


def _sample_taps(roi: Roi, bins: _Bins, pixel: np.ndarray, height: int, width: int):
    ys = roi.y + bins.rel_y + pixel[0][bins.j, bins.i]
    xs = roi.x + bins.rel_x + pixel[1][bins.j, bins.i]
    return compute_taps(ys, xs, height, width)


def _corner_values(planes: np.ndarray, taps, channel=None) -> list[np.ndarray]:
    """Corner values (C, S) of ``planes`` (C, H, W), or (1, S) read from per-sample channels."""
    out = []
    for r, c, v in zip(taps.rows, taps.cols, taps.valid):
        vals = planes[:, r, c] if channel is None else planes[channel, r, c][None]
        out.append(np.where(v, vals, 0.0))
    return out


def _interp(corners, taps) -> np.ndarray:
    w00, w01, w10, w11 = taps.weights
    v00, v01, v10, v11 = corners
    return w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


def deform_roi_pool(x, roi: Roi, k: int, bin_offsets) -> np.ndarray:
    """RoI pooling with every bin displaced by its own fractional offset."""
    x = as_tensor4(x)
    _check_batch(x, roi)
    pixel = _pixel_offsets(bin_offsets, k)
    bins = _Bins(roi, k)
    taps = _sample_taps(roi, bins, pixel, *x.shape[2:])
    return bins.average(_interp(_corner_values(x[roi.batch], taps), taps))


def _scatter_plane(grad_samples: np.ndarray, taps, shape, channel=None) -> np.ndarray:
    """Accumulate (C, S) sample gradients into a (C, H, W) plane stack."""
    channels, height, width = shape
    size = height * width
    out = np.zeros((channels, size))
    flat = np.concatenate([(r * width + c) for r, c in zip(taps.rows, taps.cols)])
    if channel is None:
        weighted = np.concatenate([grad_samples * w for w in taps.weights], axis=1)
        for ch in range(channels):
            out[ch] = np.bincount(flat, weights=weighted[ch], minlength=size)
    else:
        weighted = np.concatenate([grad_samples[0] * w for w in taps.weights])
        chan = np.tile(channel, 4)
        out = np.bincount(chan * size + flat, weights=weighted, minlength=channels * size)
    return out.reshape(channels, height, width)


def deform_roi_pool_backward(x, roi: Roi, k: int, bin_offsets, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * deform_roi_pool(...))``.

    Returns ``(d_x, d_pixel_offsets)``; chain to normalized offsets with
    :func:`normalized_offset_grad`.
    """
    x = as_tensor4(x)
    _check_batch(x, roi)
    pixel = _pixel_offsets(bin_offsets, k)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (x.shape[1], k, k):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(x.shape[1], k, k)}")
    bins = _Bins(roi, k)
    taps = _sample_taps(roi, bins, pixel, *x.shape[2:])
    corners = _corner_values(x[roi.batch], taps)
    g = bins.spread(grad_out)
    dx = np.zeros_like(x)
    dx[roi.batch] = _scatter_plane(g, taps, x.shape[1:])
    d_dy, d_dx = _coordinate_grads(corners, taps)
    d_pixel = np.empty((2, k, k))
    nb = k * k
    d_pixel[0] = np.bincount(bins.bin, weights=(g * d_dy).sum(axis=0), minlength=nb).reshape(k, k)
    d_pixel[1] = np.bincount(bins.bin, weights=(g * d_dx).sum(axis=0), minlength=nb).reshape(k, k)
    return dx, d_pixel


def _coordinate_grads(corners, taps):
    # coordinate_grads expects a trailing channel axis
    moved = [np.moveaxis(c, 0, -1) for c in corners]
    d_dy, d_dx = coordinate_grads(moved, taps)
    return np.moveaxis(d_dy, -1, 0), np.moveaxis(d_dx, -1, 0)


def roi_offset_branch(pooled, fc_w, roi: Roi, gamma: float = DEFAULT_GAMMA, fc_b=None) -> BinOffsets:
    """Normalized bin offsets from a fully connected layer over pooled features."""
    pooled = np.asarray(pooled, dtype=np.float64)
    fc_w = np.asarray(fc_w, dtype=np.float64)
    k = pooled.shape[-1]
    if fc_w.shape != (2 * k * k, pooled.size):
        raise ValueError(f"fc weights must have shape {(2 * k * k, pooled.size)}, got {fc_w.shape}")
    normalized = fc_w @ pooled.ravel()
    if fc_b is not None:
        normalized = normalized + np.asarray(fc_b, dtype=np.float64)
    return BinOffsets.from_normalized(normalized.reshape(2, k, k), roi, gamma)


def _ps_channels(scores: np.ndarray, k: int, cls: int) -> int:
    if scores.shape[1] % (k * k):
        raise ValueError(f"{scores.shape[1]} score channels not divisible by k^2 = {k * k}")
    n_cls = scores.shape[1] // (k * k)
    if not 0 <= cls < n_cls:
        raise ValueError(f"class {cls} out of range for {n_cls} classes")
    return n_cls


def _ps_sample_channels(bins: _Bins, k: int, cls: int) -> np.ndarray:
    return cls * k * k + bins.i * k + bins.j


def ps_roi_pool(scores, roi: Roi, k: int, cls: int) -> np.ndarray:
    """Position-sensitive average pooling for one class, shape (k, k)."""
    scores = as_tensor4(scores)
    _check_batch(scores, roi)
    _ps_channels(scores, k, cls)
    bins = _Bins(roi, k)
    ys, xs = _lattice_positions(roi, bins)
    height, width = scores.shape[2:]
    inside = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
    ch = _ps_sample_channels(bins, k, cls)
    vals = np.where(inside, scores[roi.batch, ch, ys.clip(0, height - 1), xs.clip(0, width - 1)], 0.0)
    return bins.average(vals[None])[0]


def _offset_field_classes(offset_fields: np.ndarray, k: int, cls: int, per_class: bool) -> int:
    expected_per = 2 * k * k
    if per_class:
        if offset_fields.shape[1] % expected_per:
            raise ValueError(f"per-class offset fields need a multiple of {expected_per} channels")
        return cls * 2
    if offset_fields.shape[1] != expected_per:
        raise ValueError(f"offset fields need {expected_per} channels, got {offset_fields.shape[1]}")
    return 0


def pool_normalized_offsets(offset_fields, roi: Roi, k: int, cls: int = 0, per_class: bool = False) -> np.ndarray:
    """PS-pool the offset fields over the RoI into normalized bin offsets (2, k, k)."""
    offset_fields = as_tensor4(offset_fields)
    base = _offset_field_classes(offset_fields, k, cls, per_class)
    return np.stack([ps_roi_pool(offset_fields, roi, k, base + comp) for comp in (0, 1)])


def ps_pool_at_offsets(scores, roi: Roi, k: int, cls: int, bin_offsets) -> np.ndarray:
    """Position-sensitive pooling of one class with given pixel bin offsets, shape (k, k)."""
    scores = as_tensor4(scores)
    _check_batch(scores, roi)
    _ps_channels(scores, k, cls)
    pixel = _pixel_offsets(bin_offsets, k)
    bins = _Bins(roi, k)
    taps = _sample_taps(roi, bins, pixel, *scores.shape[2:])
    ch = _ps_sample_channels(bins, k, cls)
    vals = _interp(_corner_values(scores[roi.batch], taps, ch), taps)
    return bins.average(vals)[0]


def ps_pool_at_offsets_backward(scores, roi: Roi, k: int, cls: int, bin_offsets, grad_out):
    """Returns ``(d_scores, d_pixel_offsets)`` for :func:`ps_pool_at_offsets`."""
    scores = as_tensor4(scores)
    _check_batch(scores, roi)
    _ps_channels(scores, k, cls)
    pixel = _pixel_offsets(bin_offsets, k)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (k, k):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(k, k)}")
    bins = _Bins(roi, k)
    taps = _sample_taps(roi, bins, pixel, *scores.shape[2:])
    ch = _ps_sample_channels(bins, k, cls)
    corners = _corner_values(scores[roi.batch], taps, ch)
    g = bins.spread(grad_out[None])
    d_scores = np.zeros_like(scores)
    d_scores[roi.batch] = _scatter_plane(g, taps, scores.shape[1:], ch)
    d_dy, d_dx = _coordinate_grads(corners, taps)
    nb = k * k
    d_pixel = np.stack([
        np.bincount(bins.bin, weights=(g * d)[0], minlength=nb).reshape(k, k) for d in (d_dy, d_dx)
    ])
    return d_scores, d_pixel


def deform_ps_roi_pool(
    scores, offset_fields, roi: Roi, k: int, cls: int,
    gamma: float = DEFAULT_GAMMA, per_class: bool = False,
) -> tuple[np.ndarray, BinOffsets]:
    """Deformable PS RoI pooling with offsets pooled from full-resolution fields."""
    normalized = pool_normalized_offsets(offset_fields, roi, k, cls, per_class)
    offsets = BinOffsets.from_normalized(normalized, roi, gamma)
    return ps_pool_at_offsets(scores, roi, k, cls, offsets), offsets


def deform_ps_roi_pool_backward(
    scores, offset_fields, roi: Roi, k: int, cls: int, grad_out,
    gamma: float = DEFAULT_GAMMA, per_class: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * deform_ps_roi_pool(...)[0])``.

    Returns ``(d_scores, d_offset_fields)``.
    """
    scores = as_tensor4(scores)
    offset_fields = as_tensor4(offset_fields)
    _check_batch(scores, roi)
    _ps_channels(scores, k, cls)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (k, k):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(k, k)}")
    base = _offset_field_classes(offset_fields, k, cls, per_class)
    normalized = pool_normalized_offsets(offset_fields, roi, k, cls, per_class)
    pixel = denormalize(normalized, roi, gamma)
    d_scores, d_pixel = ps_pool_at_offsets_backward(scores, roi, k, cls, pixel, grad_out)
    d_norm = normalized_offset_grad(d_pixel, roi, gamma)

    # adjoint of the lattice PS pooling that produced the normalized offsets
    bins = _Bins(roi, k)
    d_fields = np.zeros_like(offset_fields)
    ys, xs = _lattice_positions(roi, bins)
    height, width = offset_fields.shape[2:]
    inside = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
    for comp in (0, 1):
        gs = bins.spread(d_norm[comp][None])[0]
        chan = _ps_sample_channels(bins, k, base + comp)
        np.add.at(d_fields[roi.batch], (chan[inside], ys[inside], xs[inside]), gs[inside])
    return d_scores, d_fields


def pool_rois(fn, rois: list[Roi], threads: int | None = None) -> np.ndarray:
    """Stack ``fn(roi)`` over RoIs, evaluated in parallel chunks."""
    def run(sl):
        return [fn(r) for r in rois[sl]]

    parts = _parallel.map_chunks(run, len(rois), threads)
    return np.stack([y for part in parts for y in part])


def read_roi_csv(path) -> list[Roi]:
    """RoIs from a CSV with header ``batch,x,y,w,h``."""
    rois = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"batch", "x", "y", "w", "h"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rois.append(Roi(int(row["batch"]), float(row["x"]), float(row["y"]),
                                float(row["w"]), float(row["h"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return rois


def write_roi_csv(path, rois: list[Roi]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch", "x", "y", "w", "h"])
        for r in rois:
            writer.writerow([r.batch, repr(float(r.x)), repr(float(r.y)), repr(float(r.w)), repr(float(r.h))])
