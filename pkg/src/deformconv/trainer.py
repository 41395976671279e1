"""Small fixed-topology training pipelines around the deformable operators.

Each pipeline is ``offset branch -> deformable op -> mean squared error`` with
a hand-written backward pass. Offset branches start at zero, so a fresh
pipeline behaves exactly like its plain counterpart, and their learning rate
is the base rate times ``beta``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import conv_ops, pool_ops
from .bilinear_sampler import Point2
from .conv_ops import ConvSpec


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerConfig:
    """SGD settings: base rate ``lr`` for ``iters`` steps, dropped 10x for the last third."""

    lr: float
    beta: float = 1.0
    iters: int = 1000

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.iters < 0:
            raise ValueError(f"iters must be non-negative, got {self.iters}")

    def lr_at(self, iteration: int) -> float:
        # integer comparison keeps the 2/3 boundary exact
        return self.lr * 0.1 if 3 * iteration >= 2 * self.iters else self.lr


def mse(pred: np.ndarray, target: np.ndarray, mask=None) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient w.r.t. ``pred``; ``mask`` selects the averaged entries."""
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    if mask is None:
        count = diff.size
        loss = float(np.sum(diff * diff)) / count
        return loss, 2.0 * diff / count
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), diff.shape)
    count = float(mask.sum())
    loss = float(np.sum(mask * diff * diff)) / count
    return loss, 2.0 * mask * diff / count


@dataclass(frozen=True)
class DeformConvPipeline:
    """Offset conv branch feeding a deformable conv.

    The branch reads ``branch_input`` when given (any tensor with the main
    input's spatial size) and the main input otherwise.
    """

    spec: ConvSpec
    params: dict
    frozen: frozenset = frozenset()
    offset_params: tuple = ("offset_weight", "offset_bias")

    @classmethod
    def create(cls, c_in: int, c_out: int, spec: ConvSpec, seed: int = 0,
               branch_channels: int | None = None, frozen=()) -> DeformConvPipeline:
        rng = np.random.default_rng(seed)
        kh, kw = spec.kernel
        fan_in = c_in * kh * kw
        branch_channels = c_in if branch_channels is None else branch_channels
        params = {
            "weight": rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(c_out, c_in, kh, kw)),
            "offset_weight": np.zeros((2 * spec.taps, branch_channels, kh, kw)),
            "offset_bias": np.zeros(2 * spec.taps),
        }
        return cls(spec, params, frozenset(frozen))

    def offsets(self, x, branch_input=None) -> np.ndarray:
        src = x if branch_input is None else branch_input
        return conv_ops.offset_branch_forward(
            src, self.params["offset_weight"], self.spec, bias=self.params["offset_bias"]
        )

    def forward(self, x, branch_input=None) -> np.ndarray:
        return conv_ops.deform_conv2d(x, self.params["weight"], self.offsets(x, branch_input), self.spec)

    def plain_forward(self, x) -> np.ndarray:
        return conv_ops.conv2d(x, self.params["weight"], self.spec)

    def forward_loss(self, x, target, branch_input=None, mask=None):
        offsets = self.offsets(x, branch_input)
        y = conv_ops.deform_conv2d(x, self.params["weight"], offsets, self.spec)
        loss, d_y = mse(y, target, mask)
        cache = {"x": x, "branch_input": x if branch_input is None else branch_input,
                 "offsets": offsets, "d_y": d_y}
        return loss, cache

    def backward(self, cache) -> dict:
        _, d_w, d_off = conv_ops.deform_conv2d_backward(
            cache["x"], self.params["weight"], cache["offsets"], self.spec, cache["d_y"]
        )
        _, d_branch = conv_ops.conv2d_backward(
            cache["branch_input"], self.params["offset_weight"], self.spec, d_off
        )
        return {
            "weight": d_w,
            "offset_weight": d_branch,
            "offset_bias": d_off.sum(axis=(0, 2, 3)),
        }


@dataclass(frozen=True)
class DeformRoiPipeline:
    """Plain RoI pooling -> fc offset branch -> deformable RoI pooling."""

    k: int
    params: dict
    gamma: float = pool_ops.DEFAULT_GAMMA
    frozen: frozenset = frozenset()
    offset_params: tuple = ("fc_weight", "fc_bias")

    @classmethod
    def create(cls, channels: int, k: int, gamma: float = pool_ops.DEFAULT_GAMMA) -> DeformRoiPipeline:
        params = {
            "fc_weight": np.zeros((2 * k * k, channels * k * k)),
            "fc_bias": np.zeros(2 * k * k),
        }
        return cls(k, params, gamma)

    def _offsets(self, pooled, roi):
        return pool_ops.roi_offset_branch(
            pooled, self.params["fc_weight"], roi, self.gamma, self.params["fc_bias"]
        )

    def forward(self, x, rois) -> np.ndarray:
        out = []
        for roi in rois:
            pooled = pool_ops.roi_pool(x, roi, self.k)
            out.append(pool_ops.deform_roi_pool(x, roi, self.k, self._offsets(pooled, roi)))
        return np.stack(out)

    def plain_forward(self, x, rois) -> np.ndarray:
        return np.stack([pool_ops.roi_pool(x, roi, self.k) for roi in rois])

    def forward_loss(self, x, rois, target, mask=None):
        pooled = [pool_ops.roi_pool(x, roi, self.k) for roi in rois]
        offsets = [self._offsets(p, roi) for p, roi in zip(pooled, rois)]
        y = np.stack([pool_ops.deform_roi_pool(x, roi, self.k, o) for roi, o in zip(rois, offsets)])
        loss, d_y = mse(y, target, mask)
        return loss, {"x": x, "rois": rois, "pooled": pooled, "offsets": offsets, "d_y": d_y}

    def backward(self, cache) -> dict:
        d_fc_w = np.zeros_like(self.params["fc_weight"])
        d_fc_b = np.zeros_like(self.params["fc_bias"])
        for r, roi in enumerate(cache["rois"]):
            _, d_pix = pool_ops.deform_roi_pool_backward(
                cache["x"], roi, self.k, cache["offsets"][r], cache["d_y"][r]
            )
            d_norm = pool_ops.normalized_offset_grad(d_pix, roi, self.gamma).ravel()
            d_fc_w += np.outer(d_norm, cache["pooled"][r].ravel())
            d_fc_b += d_norm
        return {"fc_weight": d_fc_w, "fc_bias": d_fc_b}


def sgd_step(pipeline, grads: dict, config: LayerConfig, iteration: int):
    """Plain SGD; offset-branch parameters use ``beta`` times the base rate."""
    lr = config.lr_at(iteration)
    params = dict(pipeline.params)
    for name, g in grads.items():
        if name in pipeline.frozen:
            continue
        if name not in params or np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient for {name!r} does not match the parameters")
        scale = config.beta if name in pipeline.offset_params else 1.0
        params[name] = params[name] - (lr * scale) * g
    return dataclasses.replace(pipeline, params=params)


def smooth_plane(height: int, width: int, rng, components: int = 3):
    """A sum of low-frequency plane waves, returned as ``f(rows, cols)``."""
    amps = rng.uniform(0.5, 1.0, size=components)
    angles = rng.uniform(0.0, 2 * np.pi, size=components)
    periods = rng.uniform(12.0, 24.0, size=components)
    phases = rng.uniform(0.0, 2 * np.pi, size=components)

    def f(rows, cols):
        out = np.zeros(np.broadcast(rows, cols).shape)
        for a, t, p, ph in zip(amps, angles, periods, phases):
            out += a * np.sin(2 * np.pi * (cols * np.cos(t) + rows * np.sin(t)) / p + ph)
        return out

    return f


@dataclass
class ShiftRecovery:
    mean_offset: Point2
    history: list = field(default_factory=list)  # (iteration, loss, mean_x, mean_y)
    pipeline: DeformConvPipeline | None = None

    def error(self, shift: Point2) -> float:
        return math.hypot(self.mean_offset.x - shift.x, self.mean_offset.y - shift.y)


SHIFT_MARGIN = 4


def shift_recovery_problem(shift: Point2, seed: int = 0, size: int = 32, batch: int = 2):
    """Smooth planes, their translated copies and the interior mask."""
    if abs(shift.x) > 3 or abs(shift.y) > 3:
        raise ValueError(f"shift components must lie within 3 px, got {shift}")
    rng = np.random.default_rng(seed)
    rows, cols = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    x = np.empty((batch, 1, size, size))
    target = np.empty_like(x)
    for b in range(batch):
        f = smooth_plane(size, size, rng)
        x[b, 0] = f(rows, cols)
        target[b, 0] = f(rows + shift.y, cols + shift.x)
    mask = np.zeros((1, 1, size, size))
    m = SHIFT_MARGIN
    mask[..., m:size - m, m:size - m] = 1.0
    return x, target, mask


def train_shift_recovery(shift: Point2, iters: int, config: LayerConfig, seed: int = 0,
                         size: int = 32, batch: int = 2) -> ShiftRecovery:
    """Learn the translation between smooth planes with a 1x1 deformable conv.

    The conv weight is fixed to 1 and the offsets come from a zero-initialized
    1x1 branch over a constant input, so every location shares one learned
    offset. Raises :class:`TrainingDiverged` if the loss exceeds ten times the
    best loss seen.
    """
    if config.iters != iters:
        config = dataclasses.replace(config, iters=iters)
    x, target, mask = shift_recovery_problem(shift, seed, size, batch)
    spec = ConvSpec(kernel=1)
    pipe = DeformConvPipeline(
        spec,
        {
            "weight": np.ones((1, 1, 1, 1)),
            "offset_weight": np.zeros((2, 1, 1, 1)),
            "offset_bias": np.zeros(2),
        },
        frozen=frozenset({"weight", "offset_bias"}),
    )
    const = np.ones_like(x)
    interior = mask[0, 0] > 0

    def mean_offset(p):
        off = p.offsets(x, const)
        return Point2(float(off[:, 1][:, interior].mean()), float(off[:, 0][:, interior].mean()))

    history = []
    best = math.inf
    for it in range(iters + 1):
        loss, cache = pipe.forward_loss(x, target, const, mask)
        mo = mean_offset(pipe)
        history.append((it, loss, mo.x, mo.y))
        if not math.isfinite(loss) or loss > 10 * best:
            raise TrainingDiverged(f"loss {loss:.6g} at iteration {it} (best {best:.6g})")
        best = min(best, loss)
        if it == iters:
            break
        pipe = sgd_step(pipe, pipe.backward(cache), config, it)
    return ShiftRecovery(mean_offset(pipe), history, pipe)
