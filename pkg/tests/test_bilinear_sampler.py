import math

import numpy as np
import pytest

from deformconv import oracle
from deformconv.bilinear_sampler import (
    Point2,
    compute_taps,
    gather_corners,
    interpolate,
    kernel_g,
    sample,
    sample_with_grad,
)

PLANE = np.array([[1.0, 2.0], [3.0, 4.0]])


def fd_grad(plane, p, h=1e-6):
    dx = (sample(plane, Point2(p.x + h, p.y)) - sample(plane, Point2(p.x - h, p.y))) / (2 * h)
    dy = (sample(plane, Point2(p.x, p.y + h)) - sample(plane, Point2(p.x, p.y - h))) / (2 * h)
    return dx, dy


def test_kernel_g():
    assert kernel_g(0, 0) == 1.0
    assert kernel_g(0, 0.3) == pytest.approx(0.7, abs=1e-15)
    assert kernel_g(2, 0.5) == 0.0
    assert kernel_g(1, 0.0) == 0.0


def test_sample_examples():
    assert sample(PLANE, Point2(0.5, 0.5)) == 2.5
    assert sample(PLANE, Point2(1, 0)) == 2.0
    assert sample(PLANE, Point2(-2, -2)) == 0.0


def test_sample_fades_in_border_band():
    # half a pixel left of column 0 keeps half the weight
    assert sample(PLANE, Point2(-0.5, 0.0)) == 0.5
    assert sample(PLANE, Point2(-1.0, 0.0)) == 0.0


def test_sample_with_grad_linear_ramp():
    plane = np.array([[0.0, 1.0], [0.0, 1.0]])
    p = Point2(0.5, 0.5)
    value, grad = sample_with_grad(plane, p)
    # frozen from the central-difference oracle below
    fdx, fdy = fd_grad(plane, p)
    assert abs(fdx - 1.0) < 1e-9 and abs(fdy) < 1e-9
    assert value == 0.5
    assert grad.d_dx == 1.0 and grad.d_dy == 0.0


def test_lattice_point_gradient_is_right_sided(rng):
    plane = rng.normal(size=(5, 6))
    value, grad = sample_with_grad(plane, Point2(2.0, 3.0))
    assert value == plane[3, 2]
    assert grad.d_dx == plane[3, 3] - plane[3, 2]
    assert grad.d_dy == plane[4, 2] - plane[3, 2]
    h = 1e-7
    right = (sample(plane, Point2(2.0 + h, 3.0)) - value) / h
    assert abs(right - grad.d_dx) < 1e-6


def test_outside_support_is_zero():
    value, grad = sample_with_grad(PLANE, Point2(5.0, -3.5))
    assert value == 0.0 and grad.d_dx == 0.0 and grad.d_dy == 0.0
    assert grad.taps == []


def test_empty_plane_rejected():
    with pytest.raises(ValueError):
        sample(np.zeros((0, 3)), Point2(0, 0))


def test_taps_partition_of_unity(rng):
    plane = rng.normal(size=(4, 7))
    for _ in range(200):
        p = Point2(rng.uniform(0, 6), rng.uniform(0, 3))
        _, grad = sample_with_grad(plane, p)
        assert abs(sum(w for _, w in grad.taps) - 1.0) < 1e-12
        assert all(0.0 <= w <= 1.0 for _, w in grad.taps)


def test_taps_reconstruct_value(rng):
    plane = rng.normal(size=(5, 5))
    for _ in range(100):
        p = Point2(rng.uniform(-1.5, 5.5), rng.uniform(-1.5, 5.5))
        value, grad = sample_with_grad(plane, p)
        recon = sum(w * plane[r, c] for (r, c), w in grad.taps)
        assert abs(recon - value) < 1e-12


def test_gradient_fidelity(rng):
    for _ in range(300):
        plane = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
        frac = rng.uniform(1e-3, 1 - 1e-3, size=2)
        base = rng.integers(-2, 6, size=2)
        p = Point2(base[0] + frac[0], base[1] + frac[1])
        _, grad = sample_with_grad(plane, p)
        fdx, fdy = fd_grad(plane, p)
        assert abs(grad.d_dx - fdx) / max(1, abs(grad.d_dx)) < 1e-6
        assert abs(grad.d_dy - fdy) / max(1, abs(grad.d_dy)) < 1e-6


def test_vectorized_matches_scalar(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    ys = rng.uniform(-2, 7, size=(2, 10))
    xs = rng.uniform(-2, 8, size=(2, 10))
    taps = compute_taps(ys, xs, 5, 6)
    vals = interpolate(gather_corners(x, np.arange(2)[:, None], taps), taps)
    for b in range(2):
        for s in range(10):
            for c in range(3):
                expect = sample(x[b, c], Point2(xs[b, s], ys[b, s]))
                assert abs(vals[b, s, c] - expect) < 1e-12


def test_far_away_points_do_not_overflow():
    taps = compute_taps(np.array([1e300, -1e300]), np.array([0.0, 0.0]), 3, 3)
    assert not any(v.any() for v in taps.valid)


def test_matches_full_summation_oracle(rng):
    plane = rng.normal(size=(6, 5))
    for _ in range(200):
        p = Point2(rng.uniform(-2, 7), rng.uniform(-2, 8))
        assert abs(sample(plane, p) - oracle.sample_naive(plane, p)) < 1e-12


def test_linearity(rng):
    a, b = rng.normal(size=(2, 5, 5))
    alpha, beta = 0.7, -1.3
    p = Point2(1.37, 2.81)
    lhs = sample(alpha * a + beta * b, p)
    rhs = alpha * sample(a, p) + beta * sample(b, p)
    assert math.isclose(lhs, rhs, abs_tol=1e-12)
