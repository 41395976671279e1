"""Command-line checks, demos and benchmarks.

Exit codes: 0 when every check passes, 1 when a check fails (or training
diverges), 2 for usage errors. Every command writes its CSV output plus a
``<out>.manifest`` file of ``key=value`` lines describing the run.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _parallel, analysis, conv_ops, gradcheck, pool_ops, tensor_core, trainer
from .bilinear_sampler import Point2
from .oracle import FiniteDiffConfig

ATROUS_DILATIONS = (2, 4, 6, 8)
EQUIV_TOL = 1e-12


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    seed: int | None
    params: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, path) -> None:
        lines = [f"command={self.command}", f"seed={self.seed}"]
        lines += [f"{k}={v}" for k, v in sorted(self.params.items())]
        lines.append(f"outputs={','.join(str(o) for o in self.outputs)}")
        lines.append(f"duration_s={self.duration_s:.6f}")
        Path(path).write_text("\n".join(lines) + "\n")


def manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest")


def _int_tuple(text: str, n: int, name: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{name} must be {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{name} must be {n} comma-separated integers, got {text!r}")
    return vals


def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v: float) -> str:
    return repr(float(v))


# -- gradcheck ---------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    try:
        config = FiniteDiffConfig(h=args.eps, tol=args.tol, kink_margin=args.kink_margin)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    results = gradcheck.run(args.op, args.seed, args.cases, config)
    _write_rows(
        args.out,
        ["case", "gradient", "max_rel_err", "passed"],
        [(r.case, r.gradient, _fmt(r.max_rel_err), int(r.passed)) for r in results],
    )
    failures = [r for r in results if not r.passed]
    worst = max(r.max_rel_err for r in results)
    print(f"gradcheck {args.op}: {args.cases} cases, worst relative error {worst:.3e}, "
          f"{len(failures)} failing gradients")
    return 1 if failures else 0


# -- equiv -------------------------------------------------------------------

def _equiv_conv_case(rng, mode: str, dilation: int, threads: int):
    k = int(rng.choice([1, 3, 5])) if mode == "zero-offset" else int(rng.choice([3, 5]))
    n = int(rng.integers(1, 3))
    c_in, c_out = (int(v) for v in rng.integers(1, 4, size=2))
    if mode == "zero-offset":
        d = int(rng.integers(1, 3))
        spec = conv_ops.ConvSpec(k, tuple(rng.integers(1, 3, size=2)), tuple(rng.integers(0, 3, size=2)), d)
        height, width = (d * (k - 1) + int(v) for v in rng.integers(1, 8, size=2))
    else:
        # same padding keeps the dilated and undilated kernels centered alike
        spec = conv_ops.ConvSpec(k, 1, (k - 1) // 2, 1)
        height, width = (int(v) for v in rng.integers(k, 3 * k + 6, size=2))
    x = rng.normal(size=(n, c_in, height, width))
    w = rng.normal(size=(c_out, c_in, k, k))
    ho, wo = spec.output_size(height, width)
    if mode == "zero-offset":
        ref = conv_ops.conv2d(x, w, spec)
        offsets = np.zeros((n, 2 * spec.taps, ho, wo))
    else:
        dil = conv_ops.ConvSpec(k, 1, dilation * (k - 1) // 2, dilation)
        ref = conv_ops.conv2d(x, w, dil)
        offsets = conv_ops.atrous_offsets(n, spec, dilation, ho, wo)
    got = conv_ops.deform_conv2d(x, w, offsets, spec, threads=threads)
    return float(np.max(np.abs(got - ref)))


def _random_pool_case(rng):
    k = int(rng.integers(1, 5))
    n = int(rng.integers(1, 3))
    height, width = (int(v) for v in rng.integers(3, 12, size=2))
    roi = pool_ops.Roi(int(rng.integers(0, n)), float(rng.integers(-2, width)), float(rng.integers(-2, height)),
                       float(rng.integers(1, 10)), float(rng.integers(1, 10)))
    return k, n, height, width, roi


def equiv_pool_deviation(rng, ps: bool) -> float:
    k, n, height, width, roi = _random_pool_case(rng)
    if ps:
        n_cls = int(rng.integers(1, 3))
        scores = rng.normal(size=(n, k * k * n_cls, height, width))
        cls = int(rng.integers(0, n_cls))
        fields = np.zeros((n, 2 * k * k, height, width))
        got, _ = pool_ops.deform_ps_roi_pool(scores, fields, roi, k, cls)
        return float(np.max(np.abs(got - pool_ops.ps_roi_pool(scores, roi, k, cls))))
    x = rng.normal(size=(n, int(rng.integers(1, 4)), height, width))
    got = pool_ops.deform_roi_pool(x, roi, k, pool_ops.BinOffsets.zeros(k))
    return float(np.max(np.abs(got - pool_ops.roi_pool(x, roi, k))))


def cmd_equiv(args) -> int:
    if args.mode == "atrous" and args.dilation not in ATROUS_DILATIONS:
        raise UsageError(f"--dilation must be one of {ATROUS_DILATIONS} in atrous mode")
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    rows = []
    for case in range(args.cases):
        rng = np.random.default_rng([args.seed, case])
        rows.append((case, "deform-conv", _equiv_conv_case(rng, args.mode, args.dilation, args.threads)))
        if args.mode == "zero-offset":
            rows.append((case, "deform-roi", equiv_pool_deviation(rng, ps=False)))
            rows.append((case, "deform-ps-roi", equiv_pool_deviation(rng, ps=True)))
    _write_rows(args.out, ["case", "op", "max_abs_dev"], [(c, op, _fmt(v)) for c, op, v in rows])
    worst = max(v for _, _, v in rows)
    ok = worst < EQUIV_TOL
    print(f"equiv {args.mode}: {len(rows)} comparisons, max abs deviation {worst:.3e} "
          f"({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


# -- train-shift -------------------------------------------------------------

def cmd_train_shift(args) -> int:
    if abs(args.dx) > 3 or abs(args.dy) > 3:
        raise UsageError("--dx and --dy must lie within [-3, 3]")
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    try:
        config = trainer.LayerConfig(lr=args.lr, beta=args.beta, iters=args.iters)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    shift = Point2(args.dx, args.dy)
    try:
        result = trainer.train_shift_recovery(shift, args.iters, config, seed=args.seed)
    except trainer.TrainingDiverged as exc:
        print(f"train-shift: diverged: {exc}")
        return 1
    _write_rows(
        args.out,
        ["iteration", "loss", "mean_offset_x", "mean_offset_y"],
        [(it, _fmt(loss), _fmt(mx), _fmt(my)) for it, loss, mx, my in result.history],
    )
    mo = result.mean_offset
    print(f"train-shift: final mean offset x={mo.x:.6f} y={mo.y:.6f} "
          f"abs error={result.error(shift):.6f} px")
    return 0


# -- trace -------------------------------------------------------------------

def cmd_trace(args) -> int:
    if args.layers < 1 or args.kernel < 1 or args.kernel % 2 == 0 or args.dilation < 1:
        raise UsageError("--layers >= 1 and an odd --kernel >= 1 are required")
    spec = conv_ops.ConvSpec(args.kernel, 1, args.dilation * (args.kernel - 1) // 2, args.dilation)
    if args.offsets == "zero":
        height, width = _int_tuple(args.size, 2, "--size")
        fields = np.zeros((args.layers, 2 * spec.taps, height, width))
    else:
        try:
            fields = tensor_core.load_tensor(args.offsets)
        except (OSError, tensor_core.TensorFormatError) as exc:
            raise UsageError(f"cannot read offsets: {exc}") from None
        if fields.shape[:2] != (args.layers, 2 * spec.taps):
            raise UsageError(f"offsets file must have dims ({args.layers}, {2 * spec.taps}, H, W)")
    height, width = fields.shape[2:]
    unit = _int_tuple(args.unit, 2, "--unit") if args.unit else (height // 2, width // 2)
    try:
        trace = analysis.trace_sampling([(spec, f) for f in fields], unit)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    analysis.write_trace_csv(args.out, trace)
    distinct = len({(float(x), float(y)) for x, y in trace.points})
    print(f"trace: {len(trace.points)} points ({distinct} distinct) for unit {unit}")
    return 0


# -- stats -------------------------------------------------------------------

def cmd_stats(args) -> int:
    spec = conv_ops.ConvSpec(args.kernel, args.stride, args.padding, args.dilation)
    try:
        offsets = tensor_core.load_tensor(args.offsets)
    except (OSError, tensor_core.TensorFormatError) as exc:
        raise UsageError(f"cannot read offsets: {exc}") from None
    if offsets.shape[1] != 2 * spec.taps:
        raise UsageError(f"offsets need {2 * spec.taps} channels for a {spec.kernel} kernel")
    boxes = []
    if args.boxes:
        try:
            boxes = pool_ops.read_roi_csv(args.boxes)
        except (OSError, ValueError) as exc:
            raise UsageError(f"malformed boxes CSV: {exc}") from None
    try:
        pts, centers = analysis.filter_sample_points(spec, offsets)
        dil = analysis.effective_dilation(pts)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    values, cats = [], []
    for b in range(offsets.shape[0]):
        img_boxes = [(r.x, r.y, r.w, r.h) for r in boxes if r.batch == b]
        values.append(dil[b].ravel())
        cats += analysis.categorize_filters(centers.reshape(-1, 2), img_boxes)
    stats = analysis.aggregate_dilation_stats(np.concatenate(values), cats)
    analysis.write_stats_csv(args.out, stats)
    for cat, s in stats.items():
        print(f"stats: {cat}: {s.mean:.4f} +- {s.std:.4f} over {s.count} filters")
    return 0


# -- bench -------------------------------------------------------------------

def _time(fn, reps: int) -> list[float]:
    out = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def cmd_bench(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    n, c, h, w = _int_tuple(args.size, 4, "--size")
    if min(n, c, h, w) < 1:
        raise UsageError("--size entries must be >= 1")
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=(n, c, h, w))
    if args.op == "conv":
        spec = conv_ops.ConvSpec(3, 1, 1, 1)
        wts = rng.normal(size=(c, c, 3, 3))
        offsets = rng.uniform(-2, 2, size=(n, 18, h, w))
        variants = {
            "plain": lambda: conv_ops.conv2d(x, wts, spec),
            "deformable": lambda: conv_ops.deform_conv2d(x, wts, offsets, spec, threads=args.threads),
        }
    else:
        k = 7
        rois = [pool_ops.Roi(int(rng.integers(0, n)), float(rng.integers(0, w)), float(rng.integers(0, h)),
                             float(rng.integers(1, w + 1)), float(rng.integers(1, h + 1))) for _ in range(16)]
        offsets = pool_ops.BinOffsets.from_normalized(rng.normal(size=(2, k, k)), rois[0])
        variants = {
            "plain": lambda: pool_ops.pool_rois(lambda r: pool_ops.roi_pool(x, r, k), rois, args.threads),
            "deformable": lambda: pool_ops.pool_rois(
                lambda r: pool_ops.deform_roi_pool(x, r, k, offsets.pixel), rois, args.threads),
        }
    rows = []
    for name, fn in variants.items():
        fn()  # warm-up
        times = _time(fn, args.reps)
        rows.append((args.op, name, args.reps, f"{statistics.median(times):.6e}", f"{min(times):.6e}"))
        print(f"bench {args.op} {name}: median {statistics.median(times):.3e} s over {args.reps} reps")
    _write_rows(args.out, ["op", "variant", "reps", "median_s", "min_s"], rows)
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformconv", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for operator internals (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    p.add_argument("--op", choices=gradcheck.OPS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--kink-margin", type=float, default=1e-3)
    p.add_argument("--out", default="gradcheck.csv")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equiv", help="zero-offset and atrous equivalences")
    p.add_argument("--mode", choices=("zero-offset", "atrous"), required=True)
    p.add_argument("--dilation", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--out", default="equiv.csv")
    p.set_defaults(func=cmd_equiv)

    p = sub.add_parser("train-shift", help="learn a global translation with a deformable conv")
    p.add_argument("--dx", type=float, required=True)
    p.add_argument("--dy", type=float, required=True)
    p.add_argument("--iters", type=int, default=600)
    p.add_argument("--lr", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="train_shift.csv")
    p.set_defaults(func=cmd_train_shift)

    p = sub.add_parser("trace", help="sampling locations through stacked deformable layers")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--offsets", default="zero",
                   help="'zero' or a tensor file with dims (layers, 2N, H, W), bottom layer first")
    p.add_argument("--size", default="16,16", help="H,W for zero offsets")
    p.add_argument("--unit", default=None, help="y,x on the top output (default: center)")
    p.add_argument("--out", default="trace.csv")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("stats", help="effective dilation statistics per object category")
    p.add_argument("--offsets", required=True, help="tensor file (n, 2N, H_out, W_out)")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--padding", type=int, default=1)
    p.add_argument("--dilation", type=int, default=1)
    p.add_argument("--boxes", default=None, help="CSV batch,x,y,w,h of ground-truth boxes")
    p.add_argument("--out", default="stats.csv")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("bench", help="plain vs deformable timings")
    p.add_argument("--op", choices=("conv", "roi"), default="conv")
    p.add_argument("--size", default="1,8,32,32", help="n,c,h,w")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    args.threads = args.threads or _parallel.max_threads()
    _parallel.set_default_threads(args.threads)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    params = {k: v for k, v in vars(args).items() if k not in ("func", "command", "seed", "out")}
    RunManifest(
        command=args.command,
        seed=getattr(args, "seed", None),
        params=params,
        outputs=[args.out],
        duration_s=time.perf_counter() - start,
    ).write(manifest_path(args.out))
    return code


if __name__ == "__main__":
    sys.exit(main())
