"""Randomized analytic-vs-finite-difference gradient checks for the deformable ops.

Every case draws a small random instance, a random upstream gradient ``G``
and compares the analytic gradients of ``L = sum(G * y)`` against central
differences. Offsets are resampled until every sampling coordinate keeps its
fractional part at least ``kink_margin`` away from the kernel's kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import conv_ops, oracle, pool_ops
from .oracle import FiniteDiffConfig, finite_diff_grad, relative_error

OPS = ("deform-conv", "deform-roi", "deform-ps-roi")

_MAX_RESAMPLE = 1000


@dataclass(frozen=True)
class GradResult:
    case: int
    gradient: str
    max_rel_err: float
    passed: bool


def _resample(rng, shape, lo, hi, coords_of, margin):
    """Draw uniform values until ``coords_of(values)`` clears the kinks."""
    for _ in range(_MAX_RESAMPLE):
        vals = rng.uniform(lo, hi, size=shape)
        if oracle.away_from_kinks(coords_of(vals), margin):
            return vals
    raise RuntimeError("could not draw kink-free offsets")


def _kink_free_offsets(rng, shape, margin):
    # element-wise redraw: each offset only moves its own coordinates
    vals = rng.uniform(-1.5, 1.5, size=shape)
    for _ in range(_MAX_RESAMPLE):
        bad = ~((vals % 1.0 >= margin) & (vals % 1.0 <= 1.0 - margin))
        if not bad.any():
            return vals
        vals[bad] = rng.uniform(-1.5, 1.5, size=int(bad.sum()))
    raise RuntimeError("could not draw kink-free offsets")


def _case_rng(seed: int, case: int):
    return np.random.default_rng([seed, case])


def check_deform_conv(case: int, seed: int, config: FiniteDiffConfig) -> list[GradResult]:
    rng = _case_rng(seed, case)
    kh, kw = rng.integers(1, 4, size=2)
    dilation = int(rng.integers(1, 3))
    spec = conv_ops.ConvSpec(
        kernel=(kh, kw),
        stride=tuple(rng.integers(1, 3, size=2)),
        padding=tuple(rng.integers(0, 2, size=2)),
        dilation=dilation,
    )
    n = int(rng.integers(1, 3))
    c_in, c_out = (int(v) for v in rng.integers(1, 3, size=2))
    height = dilation * (kh - 1) + int(rng.integers(1, 5))
    width = dilation * (kw - 1) + int(rng.integers(1, 5))
    ho, wo = spec.output_size(height, width)
    x = rng.normal(size=(n, c_in, height, width))
    w = rng.normal(size=(c_out, c_in, kh, kw))
    # tap positions are integers, so the offsets' own fractional parts decide
    offsets = _kink_free_offsets(rng, (n, 2 * spec.taps, ho, wo), config.kink_margin)
    g = rng.normal(size=(n, c_out, ho, wo))

    dx, dw, doff = conv_ops.deform_conv2d_backward(x, w, offsets, spec, g)
    checks = {
        "input": (dx, lambda v: np.sum(g * conv_ops.deform_conv2d(v, w, offsets, spec)), x),
        "weights": (dw, lambda v: np.sum(g * conv_ops.deform_conv2d(x, v, offsets, spec)), w),
        "offsets": (doff, lambda v: np.sum(g * conv_ops.deform_conv2d(x, w, v, spec)), offsets),
    }
    return _compare(case, checks, config)


def _random_roi(rng, n, height, width, inside=False):
    if inside:
        # every bin then reads real field values; an all-outside bin pools to a
        # zero offset, which sits exactly on a kink
        x0 = int(rng.integers(0, width - 1))
        y0 = int(rng.integers(0, height - 1))
        w = float(rng.integers(1, width - x0 + 1))
        h = float(rng.integers(1, height - y0 + 1))
    else:
        x0 = int(rng.integers(-2, width - 1))
        y0 = int(rng.integers(-2, height - 1))
        w = float(rng.integers(1, 8)) + (0.5 if rng.random() < 0.3 else 0.0)
        h = float(rng.integers(1, 8)) + (0.5 if rng.random() < 0.3 else 0.0)
    return pool_ops.Roi(int(rng.integers(0, n)), float(x0), float(y0), w, h)


def check_deform_roi(case: int, seed: int, config: FiniteDiffConfig) -> list[GradResult]:
    rng = _case_rng(seed, case)
    k = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    channels = int(rng.integers(1, 4))
    height, width = (int(v) for v in rng.integers(4, 9, size=2))
    x = rng.normal(size=(n, channels, height, width))
    roi = _random_roi(rng, n, height, width)
    gamma = pool_ops.DEFAULT_GAMMA
    normalized = _resample(
        rng, (2, k, k), -2.0, 2.0,
        lambda v: pool_ops.denormalize(v, roi, gamma), config.kink_margin,
    )
    pixel = pool_ops.denormalize(normalized, roi, gamma)
    g = rng.normal(size=(channels, k, k))

    dx, dpix = pool_ops.deform_roi_pool_backward(x, roi, k, pixel, g)
    dnorm = pool_ops.normalized_offset_grad(dpix, roi, gamma)
    checks = {
        "input": (dx, lambda v: np.sum(g * pool_ops.deform_roi_pool(v, roi, k, pixel)), x),
        "offsets": (dpix, lambda v: np.sum(g * pool_ops.deform_roi_pool(x, roi, k, v)), pixel),
        "normalized_offsets": (
            dnorm,
            lambda v: np.sum(g * pool_ops.deform_roi_pool(x, roi, k, pool_ops.denormalize(v, roi, gamma))),
            normalized,
        ),
    }
    return _compare(case, checks, config)


def check_deform_ps_roi(case: int, seed: int, config: FiniteDiffConfig) -> list[GradResult]:
    rng = _case_rng(seed, case)
    k = int(rng.integers(1, 4))
    n = int(rng.integers(1, 3))
    n_cls = int(rng.integers(1, 3))
    cls = int(rng.integers(0, n_cls))
    height, width = (int(v) for v in rng.integers(3, 7, size=2))
    scores = rng.normal(size=(n, k * k * n_cls, height, width))
    roi = _random_roi(rng, n, height, width, inside=True)
    gamma = pool_ops.DEFAULT_GAMMA

    def pixel_of(fields):
        normalized = pool_ops.pool_normalized_offsets(fields, roi, k)
        return pool_ops.denormalize(normalized, roi, gamma)

    fields = _resample(rng, (n, 2 * k * k, height, width), -3.0, 3.0, pixel_of, config.kink_margin)
    normalized = pool_ops.pool_normalized_offsets(fields, roi, k)
    g = rng.normal(size=(k, k))

    d_scores, d_fields = pool_ops.deform_ps_roi_pool_backward(scores, fields, roi, k, cls, g, gamma)
    _, dpix = pool_ops.ps_pool_at_offsets_backward(scores, roi, k, cls, pool_ops.denormalize(normalized, roi, gamma), g)
    dnorm = pool_ops.normalized_offset_grad(dpix, roi, gamma)

    def loss(s, f):
        return np.sum(g * pool_ops.deform_ps_roi_pool(s, f, roi, k, cls, gamma)[0])

    checks = {
        "input": (d_scores, lambda v: loss(v, fields), scores),
        "offsets": (d_fields, lambda v: loss(scores, v), fields),
        "normalized_offsets": (
            dnorm,
            lambda v: np.sum(g * pool_ops.ps_pool_at_offsets(scores, roi, k, cls, pool_ops.denormalize(v, roi, gamma))),
            normalized,
        ),
    }
    return _compare(case, checks, config)


def _compare(case, checks, config) -> list[GradResult]:
    results = []
    for name, (analytic, f, at) in checks.items():
        err = relative_error(analytic, finite_diff_grad(f, at, config))
        results.append(GradResult(case, name, err, err < config.tol))
    return results


CHECKERS = {
    "deform-conv": check_deform_conv,
    "deform-roi": check_deform_roi,
    "deform-ps-roi": check_deform_ps_roi,
}


def run(op: str, seed: int, cases: int, config: FiniteDiffConfig) -> list[GradResult]:
    checker = CHECKERS[op]
    results = []
    for case in range(cases):
        results.extend(checker(case, seed, config))
    return results
