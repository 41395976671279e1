"""Plain, dilated and deformable 2-D convolution with analytic backward passes.

Offset fields have shape (n, 2N, H_out, W_out) with N = k_h * k_w. For kernel
tap ``m`` (row-major over the kernel), channel ``2m`` is the row offset and
channel ``2m + 1`` the column offset, in input pixels. One offset field is
shared by every input and output channel of the layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _parallel
from .bilinear_sampler import (
    Point2,
    compute_taps,
    coordinate_grads,
    gather_corners,
    interpolate,
    scatter_corners,
)
from .tensor_core import as_tensor4


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", int(self.dilation))
        if min(self.kernel) < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if min(self.stride) < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def taps(self) -> int:
        return self.kernel[0] * self.kernel[1]

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sy, sx = self.stride
        py, px = self.padding
        d = self.dilation
        ho = (height + 2 * py - d * (kh - 1) - 1) // sy + 1
        wo = (width + 2 * px - d * (kw - 1) - 1) // sx + 1
        if ho < 1 or wo < 1:
            raise ValueError(
                f"input {height}x{width} too small for {self}: output {ho}x{wo}"
            )
        return ho, wo

    def centers(self, ho: int, wo: int) -> tuple[np.ndarray, np.ndarray]:
        """Input-pixel rows/cols of each output location's kernel center."""
        kh, kw = self.kernel
        cy = np.arange(ho) * self.stride[0] - self.padding[0] + self.dilation * (kh - 1) / 2
        cx = np.arange(wo) * self.stride[1] - self.padding[1] + self.dilation * (kw - 1) / 2
        return cy, cx


def grid_of(spec: ConvSpec) -> list[Point2]:
    """The regular sampling grid, centered on the output location, row-major."""
    kh, kw = spec.kernel
    d = spec.dilation
    return [
        Point2(x=(j - (kw - 1) / 2) * d, y=(i - (kh - 1) / 2) * d)
        for i in range(kh)
        for j in range(kw)
    ]


def _tap_positions(spec: ConvSpec, ho: int, wo: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer sampling rows (N, ho, 1) and cols (N, 1, wo) with zero offsets."""
    kh, kw = spec.kernel
    d = spec.dilation
    ti, tj = np.divmod(np.arange(kh * kw), kw)
    rows = np.arange(ho)[None, :] * spec.stride[0] - spec.padding[0] + ti[:, None] * d
    cols = np.arange(wo)[None, :] * spec.stride[1] - spec.padding[1] + tj[:, None] * d
    return rows[:, :, None].astype(np.float64), cols[:, None, :].astype(np.float64)


def _check_weights(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> None:
    if w.ndim != 4:
        raise ValueError(f"weights must be rank 4, got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"weights expect {w.shape[1]} input channels, x has {x.shape[1]}")
    if tuple(w.shape[2:]) != spec.kernel:
        raise ValueError(f"weight kernel {w.shape[2:]} does not match spec {spec.kernel}")


def _contract(cols: np.ndarray, w: np.ndarray) -> np.ndarray:
    """(n, C, N, ho, wo) columns times (C_out, C, kh, kw) weights."""
    n, c, taps, ho, wo = cols.shape
    out = np.matmul(w.reshape(w.shape[0], c * taps), cols.reshape(n, c * taps, ho * wo))
    return out.reshape(n, w.shape[0], ho, wo)


def _add_bias(y: np.ndarray, bias) -> np.ndarray:
    if bias is None:
        return y
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (y.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match {y.shape[1]} channels")
    return y + bias[None, :, None, None]


def _im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = spec.output_size(h, w)
    kh, kw = spec.kernel
    sy, sx = spec.stride
    py, px = spec.padding
    d = spec.dilation
    xp = np.pad(x, ((0, 0), (0, 0), (py, py), (px, px)))
    cols = np.empty((n, c, kh * kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            r, s = i * d, j * d
            cols[:, :, i * kw + j] = xp[:, :, r : r + sy * (ho - 1) + 1 : sy, s : s + sx * (wo - 1) + 1 : sx]
    return cols


def _col2im(dcols: np.ndarray, shape, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = dcols.shape[-2:]
    kh, kw = spec.kernel
    sy, sx = spec.stride
    py, px = spec.padding
    d = spec.dilation
    dxp = np.zeros((n, c, h + 2 * py, w + 2 * px))
    for i in range(kh):
        for j in range(kw):
            r, s = i * d, j * d
            dxp[:, :, r : r + sy * (ho - 1) + 1 : sy, s : s + sx * (wo - 1) + 1 : sx] += dcols[:, :, i * kw + j]
    return np.ascontiguousarray(dxp[:, :, py : py + h, px : px + w])


def conv2d(x, w, spec: ConvSpec, bias=None) -> np.ndarray:
    """Zero-padded (optionally dilated) convolution, summed over input channels."""
    x = as_tensor4(x)
    w = as_tensor4(w)
    _check_weights(x, w, spec)
    return _add_bias(_contract(_im2col(x, spec), w), bias)


def conv2d_backward(x, w, spec: ConvSpec, grad_out) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x, w))`` w.r.t. ``x`` and ``w``."""
    x = as_tensor4(x)
    w = as_tensor4(w)
    _check_weights(x, w, spec)
    cols = _im2col(x, spec)
    grad_out = as_tensor4(grad_out)
    n, c, taps, ho, wo = cols.shape
    if grad_out.shape != (n, w.shape[0], ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != output {(n, w.shape[0], ho, wo)}")
    g2 = grad_out.reshape(n, w.shape[0], ho * wo)
    c2 = cols.reshape(n, c * taps, ho * wo)
    dw = np.matmul(g2, c2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    w2 = w.reshape(w.shape[0], c * taps)
    dcols = np.matmul(w2.T, g2).reshape(cols.shape)
    return _col2im(dcols, x.shape, spec), dw


def _check_offsets(x: np.ndarray, offsets: np.ndarray, spec: ConvSpec) -> tuple[int, int]:
    ho, wo = spec.output_size(x.shape[2], x.shape[3])
    expected = (x.shape[0], 2 * spec.taps, ho, wo)
    if offsets.shape != expected:
        raise ValueError(f"offset field shape {offsets.shape} != expected {expected}")
    return ho, wo


def _deform_taps(x, offsets, spec, ho, wo):
    rows, cols = _tap_positions(spec, ho, wo)
    ys = rows[None] + offsets[:, 0::2]
    xs = cols[None] + offsets[:, 1::2]
    taps = compute_taps(ys, xs, x.shape[2], x.shape[3])
    batch_idx = np.arange(x.shape[0])[:, None, None, None]
    corners = gather_corners(x, batch_idx, taps)
    return taps, batch_idx, corners


def _deform_cols(corners, taps) -> np.ndarray:
    # (n, N, ho, wo, C) -> (n, C, N, ho, wo)
    return np.ascontiguousarray(np.moveaxis(interpolate(corners, taps), -1, 1))


def deform_conv2d(x, w, offsets, spec: ConvSpec, bias=None, threads: int | None = None) -> np.ndarray:
    """Convolution sampled at ``p0 + p_n + offset_n`` with bilinear interpolation."""
    x = as_tensor4(x)
    w = as_tensor4(w)
    offsets = as_tensor4(offsets)
    _check_weights(x, w, spec)
    ho, wo = _check_offsets(x, offsets, spec)
    if x.shape[0] == 0:
        return np.zeros((0, w.shape[0], ho, wo))

    def run(sl):
        taps, _, corners = _deform_taps(x[sl], offsets[sl], spec, ho, wo)
        return _contract(_deform_cols(corners, taps), w)

    y = np.concatenate(_parallel.map_chunks(run, x.shape[0], threads), axis=0)
    return _add_bias(y, bias)


def deform_conv2d_backward(
    x, w, offsets, spec: ConvSpec, grad_out, threads: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * deform_conv2d(x, w, offsets))``.

    Returns ``(d_x, d_w, d_offsets)``. Offset gradients follow the floor-cell
    convention of the sampler.
    """
    x = as_tensor4(x)
    w = as_tensor4(w)
    offsets = as_tensor4(offsets)
    grad_out = as_tensor4(grad_out)
    _check_weights(x, w, spec)
    ho, wo = _check_offsets(x, offsets, spec)
    expected = (x.shape[0], w.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} != output {expected}")
    if x.shape[0] == 0:
        return np.zeros_like(x), np.zeros_like(w), np.zeros_like(offsets)
    c_out, c_in = w.shape[:2]
    n_taps = spec.taps
    w2 = w.reshape(c_out, c_in * n_taps)

    def run(sl):
        xs = x[sl]
        taps, batch_idx, corners = _deform_taps(xs, offsets[sl], spec, ho, wo)
        cols = _deform_cols(corners, taps)
        n = xs.shape[0]
        g2 = grad_out[sl].reshape(n, c_out, ho * wo)
        dw = np.matmul(g2, cols.reshape(n, c_in * n_taps, ho * wo).transpose(0, 2, 1)).sum(axis=0)
        dcols = np.matmul(w2.T, g2).reshape(n, c_in, n_taps, ho, wo)
        dcols_last = np.moveaxis(dcols, 1, -1)
        dx = scatter_corners(dcols_last, batch_idx, taps, xs.shape)
        d_dy, d_dx = coordinate_grads(corners, taps)
        doff = np.empty((n, 2 * n_taps, ho, wo))
        doff[:, 0::2] = (dcols_last * d_dy).sum(axis=-1)
        doff[:, 1::2] = (dcols_last * d_dx).sum(axis=-1)
        return dx, dw, doff

    parts = _parallel.map_chunks(run, x.shape[0], threads)
    dx = np.concatenate([p[0] for p in parts], axis=0)
    dw = parts[0][1].copy()
    for p in parts[1:]:
        dw += p[1]
    doff = np.concatenate([p[2] for p in parts], axis=0)
    return dx, dw.reshape(w.shape), doff


def offset_branch_forward(x, branch_w, spec: ConvSpec, bias=None) -> np.ndarray:
    """Offset field from a plain conv sharing the main layer's geometry."""
    branch_w = as_tensor4(branch_w)
    if branch_w.shape[0] != 2 * spec.taps:
        raise ValueError(
            f"offset branch needs {2 * spec.taps} output channels, got {branch_w.shape[0]}"
        )
    return conv2d(x, branch_w, spec, bias=bias)


def atrous_offsets(n: int, spec: ConvSpec, dilation: int, ho: int, wo: int) -> np.ndarray:
    """Constant offsets turning a dilation-1 ``spec`` into a dilation-``dilation`` one."""
    if spec.dilation != 1:
        raise ValueError("base spec must have dilation 1")
    out = np.empty((n, 2 * spec.taps, ho, wo))
    for m, p in enumerate(grid_of(spec)):
        out[:, 2 * m] = (dilation - 1) * p.y
        out[:, 2 * m + 1] = (dilation - 1) * p.x
    return out
