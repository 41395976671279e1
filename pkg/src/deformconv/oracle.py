"""Brute-force reference implementations for tests and gradient checks.

Nothing here imports the operator modules: index arithmetic, bin spans and
the interpolation kernel are all re-derived with plain loops so the two
routes can catch each other's mistakes. Everything is slow on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FiniteDiffConfig:
    h: float = 1e-6
    tol: float = 1e-5
    kink_margin: float = 1e-3

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"step must be positive, got {self.h}")
        if self.tol < 0:
            raise ValueError(f"tolerance must be non-negative, got {self.tol}")
        if not 0 <= self.kink_margin < 0.5:
            raise ValueError(f"kink margin must lie in [0, 0.5), got {self.kink_margin}")


def finite_diff_grad(f, x, config: FiniteDiffConfig = FiniteDiffConfig()) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``, element by element."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    h = config.h
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        fp = float(f(x.copy()))
        flat[idx] = orig - h
        fm = float(f(x.copy()))
        flat[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at element {idx}")
        gflat[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric) -> float:
    """max |analytic - numeric| / max(1, |analytic|) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a))))


def away_from_kinks(coords, margin: float) -> bool:
    """True when every coordinate's fractional part is at least ``margin`` from 0 and 1."""
    frac = np.asarray(coords, dtype=np.float64) % 1.0
    return bool(np.all((frac >= margin) & (frac <= 1.0 - margin)))


def _g(a, b):
    return max(0.0, 1.0 - abs(a - b))


def sample_naive(plane, p) -> float:
    """Full summation over every lattice point of the plane; ``p`` is (x, y)."""
    plane = np.asarray(plane, dtype=np.float64)
    px, py = float(p[0]), float(p[1])
    total = 0.0
    for qy in range(plane.shape[0]):
        gy = _g(qy, py)
        if gy == 0.0:
            continue
        for qx in range(plane.shape[1]):
            total += _g(qx, px) * gy * plane[qy, qx]
    return total


def _out_size(size, k, stride, pad, dilation):
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d_naive(x, w, stride=(1, 1), padding=(0, 0), dilation=1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, height, width = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise ValueError("channel mismatch")
    ho = _out_size(height, kh, stride[0], padding[0], dilation)
    wo = _out_size(width, kw, stride[1], padding[1], dilation)
    y = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                r = oy * stride[0] - padding[0] + i * dilation
                                s = ox * stride[1] - padding[1] + j * dilation
                                if 0 <= r < height and 0 <= s < width:
                                    acc += w[o, c, i, j] * x[b, c, r, s]
                    y[b, o, oy, ox] = acc
    return y


def deform_conv2d_naive(x, w, offsets, stride=(1, 1), padding=(0, 0), dilation=1) -> np.ndarray:
    """Offsets channel 2m is the row shift and 2m+1 the column shift of tap m."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    n, c_in, height, width = x.shape
    c_out, _, kh, kw = w.shape
    ho = _out_size(height, kh, stride[0], padding[0], dilation)
    wo = _out_size(width, kw, stride[1], padding[1], dilation)
    y = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for i in range(kh):
                    for j in range(kw):
                        m = i * kw + j
                        py = oy * stride[0] - padding[0] + i * dilation + offsets[b, 2 * m, oy, ox]
                        px = ox * stride[1] - padding[1] + j * dilation + offsets[b, 2 * m + 1, oy, ox]
                        for c in range(c_in):
                            v = sample_naive(x[b, c], (px, py))
                            for o in range(c_out):
                                y[b, o, oy, ox] += w[o, c, i, j] * v
    return y


def bin_pixels(i, j, w, h, k):
    """Relative (px, py) pixels of bin (i, j), enumerated from the floor/ceil spans."""
    x_lo, x_hi = math.floor(i * w / k), math.ceil((i + 1) * w / k)
    y_lo, y_hi = math.floor(j * h / k), math.ceil((j + 1) * h / k)
    return [(px, py) for py in range(y_lo, y_hi) for px in range(x_lo, x_hi)]


def _read(plane, r, c):
    if 0 <= r < plane.shape[0] and 0 <= c < plane.shape[1]:
        return plane[r, c]
    return 0.0


def roi_pool_naive(x, batch, x0, y0, w, h, k) -> np.ndarray:
    """(C, k, k) with ``out[c, j, i]`` the mean of bin (i, j)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[1], k, k))
    for c in range(x.shape[1]):
        for j in range(k):
            for i in range(k):
                pix = bin_pixels(i, j, w, h, k)
                out[c, j, i] = sum(_read(x[batch, c], int(y0) + py, int(x0) + px) for px, py in pix) / len(pix)
    return out


def deform_roi_pool_naive(x, batch, x0, y0, w, h, k, pixel_offsets) -> np.ndarray:
    """``pixel_offsets[0, j, i]`` is the row shift, ``[1, j, i]`` the column shift."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((x.shape[1], k, k))
    for c in range(x.shape[1]):
        for j in range(k):
            for i in range(k):
                dy, dx = pixel_offsets[0][j][i], pixel_offsets[1][j][i]
                pix = bin_pixels(i, j, w, h, k)
                acc = 0.0
                for px, py in pix:
                    acc += sample_naive(x[batch, c], (x0 + px + dx, y0 + py + dy))
                out[c, j, i] = acc / len(pix)
    return out


def ps_roi_pool_naive(scores, batch, x0, y0, w, h, k, cls) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    out = np.zeros((k, k))
    for j in range(k):
        for i in range(k):
            plane = scores[batch, cls * k * k + i * k + j]
            pix = bin_pixels(i, j, w, h, k)
            out[j, i] = sum(_read(plane, int(y0) + py, int(x0) + px) for px, py in pix) / len(pix)
    return out


def deform_ps_roi_pool_naive(scores, offset_fields, batch, x0, y0, w, h, k, cls, gamma=0.1) -> np.ndarray:
    """Shared (class-agnostic) offset fields with 2k^2 channels."""
    scores = np.asarray(scores, dtype=np.float64)
    out = np.zeros((k, k))
    for j in range(k):
        for i in range(k):
            pix = bin_pixels(i, j, w, h, k)
            ny = sum(_read(offset_fields[batch, i * k + j], int(y0) + py, int(x0) + px) for px, py in pix) / len(pix)
            nx = sum(_read(offset_fields[batch, k * k + i * k + j], int(y0) + py, int(x0) + px) for px, py in pix) / len(pix)
            dy, dx = gamma * ny * h, gamma * nx * w
            plane = scores[batch, cls * k * k + i * k + j]
            out[j, i] = sum(sample_naive(plane, (x0 + px + dx, y0 + py + dy)) for px, py in pix) / len(pix)
    return out


def trace_naive(layers, unit):
    """Recursively expand sampling locations down a stack of deformable layers.

    ``layers`` runs bottom to top; each entry is ``(kernel, stride, padding,
    dilation, field)`` with ``field`` a (2N, H_out, W_out) array or None for
    zero offsets. ``unit`` is (y, x) on the top output. Returns (y, x) tuples.
    """
    def expand(level, y, x):
        if level < 0:
            return [(y, x)]
        k, s, pad, d, field = layers[level]
        points = []
        for i in range(k):
            for j in range(k):
                m = i * k + j
                if field is None:
                    dy = dx = 0.0
                else:
                    dy = sample_naive(field[2 * m], (x, y))
                    dx = sample_naive(field[2 * m + 1], (x, y))
                py = y * s - pad + i * d + dy
                px = x * s - pad + j * d + dx
                points.extend(expand(level - 1, py, px))
        return points

    return expand(len(layers) - 1, float(unit[0]), float(unit[1]))


def effective_dilation_naive(points) -> float:
    """``points[i][j]`` = (y, x); mean distance over an explicit list of adjacent pairs."""
    k = len(points)
    pairs = []
    for i in range(k):
        for j in range(k):
            if j + 1 < k:
                pairs.append(((i, j), (i, j + 1)))
            if i + 1 < k:
                pairs.append(((i, j), (i + 1, j)))
    dists = [math.dist(points[a[0]][a[1]], points[b[0]][b[1]]) for a, b in pairs]
    return sum(dists) / len(dists)


def mean_std_two_pass(values) -> tuple[float, float]:
    vals = [float(v) for v in values]
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / len(vals)
    return mean, math.sqrt(var)
