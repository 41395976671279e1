import numpy as np
import pytest

from deformconv import oracle
from deformconv.conv_ops import (
    ConvSpec,
    atrous_offsets,
    conv2d,
    conv2d_backward,
    deform_conv2d,
    deform_conv2d_backward,
    grid_of,
    offset_branch_forward,
)
from deformconv.oracle import FiniteDiffConfig, finite_diff_grad, relative_error


def random_case(rng, max_k=3):
    kh, kw = (int(v) for v in rng.integers(1, max_k + 1, size=2))
    spec = ConvSpec((kh, kw), tuple(rng.integers(1, 3, size=2)), tuple(rng.integers(0, 3, size=2)),
                    int(rng.integers(1, 3)))
    d = spec.dilation
    h = d * (kh - 1) + int(rng.integers(1, 6))
    w = d * (kw - 1) + int(rng.integers(1, 6))
    n, c_in, c_out = (int(v) for v in rng.integers(1, 3, size=3))
    x = rng.normal(size=(n, c_in, h, w))
    wt = rng.normal(size=(c_out, c_in, kh, kw))
    return spec, x, wt


def test_spec_validation():
    with pytest.raises(ValueError):
        ConvSpec(0)
    with pytest.raises(ValueError):
        ConvSpec(3, stride=0)
    with pytest.raises(ValueError):
        ConvSpec(3, dilation=0)
    with pytest.raises(ValueError):
        ConvSpec(5).output_size(3, 3)
    assert ConvSpec(3, 2, 1).output_size(7, 8) == (4, 4)


def test_grid_3x3():
    pts = grid_of(ConvSpec(3))
    assert [(p.x, p.y) for p in pts] == [(x, y) for y in (-1, 0, 1) for x in (-1, 0, 1)]


def test_grid_1x1():
    assert [(p.x, p.y) for p in grid_of(ConvSpec(1))] == [(0, 0)]


def test_grid_dilated():
    pts = grid_of(ConvSpec(3, dilation=2))
    assert [(p.x, p.y) for p in pts] == [(x, y) for y in (-2, 0, 2) for x in (-2, 0, 2)]


def test_grid_even_kernel_is_centered():
    pts = grid_of(ConvSpec(2))
    assert sorted((p.x, p.y) for p in pts) == [(-0.5, -0.5), (-0.5, 0.5), (0.5, -0.5), (0.5, 0.5)]


def test_conv_ones():
    y = conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), ConvSpec(3))
    assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 9.0


def test_conv_identity(rng):
    x = rng.normal(size=(2, 3, 4, 5))
    assert np.array_equal(conv2d(x, np.eye(3).reshape(3, 3, 1, 1), ConvSpec(1)), x)


def test_conv_bias(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = np.array([1.0, -2.0, 0.5])
    diff = conv2d(x, w, ConvSpec(3), bias=b) - conv2d(x, w, ConvSpec(3))
    assert np.allclose(diff, b[None, :, None, None], atol=1e-12)


def test_conv_channel_mismatch(rng):
    with pytest.raises(ValueError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), ConvSpec(3))


def test_conv_matches_loop_oracle(rng):
    for _ in range(40):
        spec, x, w = random_case(rng)
        ref = oracle.conv2d_naive(x, w, spec.stride, spec.padding, spec.dilation)
        assert np.max(np.abs(conv2d(x, w, spec) - ref)) < 1e-12


def test_deform_matches_loop_oracle(rng):
    for _ in range(40):
        spec, x, w = random_case(rng)
        ho, wo = spec.output_size(*x.shape[2:])
        off = rng.uniform(-2, 2, size=(x.shape[0], 2 * spec.taps, ho, wo))
        ref = oracle.deform_conv2d_naive(x, w, off, spec.stride, spec.padding, spec.dilation)
        assert np.max(np.abs(deform_conv2d(x, w, off, spec) - ref)) < 1e-12


def test_zero_offsets_reduce_to_conv(rng):
    for _ in range(30):
        spec, x, w = random_case(rng)
        ho, wo = spec.output_size(*x.shape[2:])
        off = np.zeros((x.shape[0], 2 * spec.taps, ho, wo))
        assert np.max(np.abs(deform_conv2d(x, w, off, spec) - conv2d(x, w, spec))) < 1e-12


@pytest.mark.parametrize("d", [2, 4, 6, 8])
def test_atrous_offsets(rng, d):
    x = rng.normal(size=(1, 2, 20, 21))
    w = rng.normal(size=(2, 2, 3, 3))
    base = ConvSpec(3, 1, 1, 1)
    ho, wo = base.output_size(20, 21)
    got = deform_conv2d(x, w, atrous_offsets(1, base, d, ho, wo), base)
    ref = oracle.conv2d_naive(x, w, (1, 1), (d, d), d)
    assert np.max(np.abs(got - ref)) < 1e-12


def test_half_pixel_shift_on_ramp():
    x = np.tile(np.arange(8.0), (8, 1))[None, None]
    off = np.zeros((1, 2, 8, 8))
    off[:, 1] = 0.5
    y = deform_conv2d(x, np.ones((1, 1, 1, 1)), off, ConvSpec(1))
    assert np.array_equal(y[0, 0, :, :7], x[0, 0, :, :7] + 0.5)


def test_offset_shape_checked(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    with pytest.raises(ValueError):
        deform_conv2d(x, np.ones((1, 1, 3, 3)), np.zeros((1, 9, 3, 3)), ConvSpec(3))


def test_channel_permutation(rng):
    x = rng.normal(size=(1, 4, 6, 6))
    w = rng.normal(size=(2, 4, 3, 3))
    off = rng.uniform(-1, 1, size=(1, 18, 4, 4))
    perm = rng.permutation(4)
    a = deform_conv2d(x, w, off, ConvSpec(3))
    b = deform_conv2d(x[:, perm], w[:, perm], off, ConvSpec(3))
    assert np.max(np.abs(a - b)) < 1e-12


def test_locality(rng):
    x = rng.normal(size=(1, 1, 8, 8))
    w = rng.normal(size=(1, 1, 1, 1))
    off = np.zeros((1, 2, 8, 8))
    off[0, :, 2, 2] = (0.25, 0.25)  # unit (2,2) reads rows 2-3, cols 2-3
    before = deform_conv2d(x, w, off, ConvSpec(1))[0, 0, 2, 2]
    x2 = x.copy()
    x2[0, 0, 5:, :] += 10.0
    x2[0, 0, :, 5:] += 10.0
    x2[0, 0, 0, 0] += 10.0
    assert deform_conv2d(x2, w, off, ConvSpec(1))[0, 0, 2, 2] == before


def test_backward_matches_finite_differences(rng):
    cfg = FiniteDiffConfig()
    for _ in range(8):
        spec, x, w = random_case(rng)
        ho, wo = spec.output_size(*x.shape[2:])
        off = rng.uniform(0.01, 0.99, size=(x.shape[0], 2 * spec.taps, ho, wo)) + rng.integers(-2, 2, size=(x.shape[0], 2 * spec.taps, ho, wo))
        g = rng.normal(size=(x.shape[0], w.shape[0], ho, wo))
        dx, dw, doff = deform_conv2d_backward(x, w, off, spec, g)
        assert relative_error(dx, finite_diff_grad(lambda v: np.sum(g * deform_conv2d(v, w, off, spec)), x, cfg)) < 1e-5
        assert relative_error(dw, finite_diff_grad(lambda v: np.sum(g * deform_conv2d(x, v, off, spec)), w, cfg)) < 1e-5
        assert relative_error(doff, finite_diff_grad(lambda v: np.sum(g * deform_conv2d(x, w, v, spec)), off, cfg)) < 1e-5


def test_plain_backward_matches_finite_differences(rng):
    spec, x, w = random_case(rng)
    ho, wo = spec.output_size(*x.shape[2:])
    g = rng.normal(size=(x.shape[0], w.shape[0], ho, wo))
    dx, dw = conv2d_backward(x, w, spec, g)
    assert relative_error(dx, finite_diff_grad(lambda v: np.sum(g * conv2d(v, w, spec)), x)) < 1e-5
    assert relative_error(dw, finite_diff_grad(lambda v: np.sum(g * conv2d(x, v, spec)), w)) < 1e-5


def test_zero_upstream_gives_zero_grads(rng):
    spec, x, w = random_case(rng)
    ho, wo = spec.output_size(*x.shape[2:])
    off = rng.uniform(-1, 1, size=(x.shape[0], 2 * spec.taps, ho, wo))
    for grad in deform_conv2d_backward(x, w, off, spec, np.zeros((x.shape[0], w.shape[0], ho, wo))):
        assert not grad.any()


def test_zero_weights_give_zero_offset_grad(rng):
    spec, x, w = random_case(rng)
    ho, wo = spec.output_size(*x.shape[2:])
    off = rng.uniform(-1, 1, size=(x.shape[0], 2 * spec.taps, ho, wo))
    _, _, doff = deform_conv2d_backward(x, np.zeros_like(w), off, spec, rng.normal(size=(x.shape[0], w.shape[0], ho, wo)))
    assert not doff.any()


def test_offset_branch(rng):
    spec = ConvSpec(3, 2, 1)
    x = rng.normal(size=(2, 3, 9, 7))
    field = offset_branch_forward(x, np.zeros((18, 3, 3, 3)), spec)
    assert field.shape == (2, 18) + spec.output_size(9, 7)
    assert not field.any()
    bw = rng.normal(size=(18, 3, 3, 3))
    ref = oracle.conv2d_naive(x, bw, spec.stride, spec.padding, spec.dilation)
    assert np.max(np.abs(offset_branch_forward(x, bw, spec) - ref)) < 1e-12
    with pytest.raises(ValueError):
        offset_branch_forward(x, np.zeros((9, 3, 3, 3)), spec)


def test_threads_agree(rng):
    spec, x, w = random_case(rng)
    x = np.concatenate([x] * 3)
    ho, wo = spec.output_size(*x.shape[2:])
    off = rng.uniform(-2, 2, size=(x.shape[0], 2 * spec.taps, ho, wo))
    g = rng.normal(size=(x.shape[0], w.shape[0], ho, wo))
    assert np.max(np.abs(deform_conv2d(x, w, off, spec, threads=1) - deform_conv2d(x, w, off, spec, threads=4))) < 1e-12
    for a, b in zip(deform_conv2d_backward(x, w, off, spec, g, threads=1),
                    deform_conv2d_backward(x, w, off, spec, g, threads=4)):
        assert np.max(np.abs(a - b)) < 1e-12
