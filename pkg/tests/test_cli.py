import csv
import subprocess
import sys

import numpy as np
import pytest

from deformconv import gradcheck, tensor_core
from deformconv.cli import main
from deformconv.oracle import FiniteDiffConfig


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(tmp_path, *argv, out="out.csv"):
    path = tmp_path / out
    return main([*argv, "--out", str(path)]), path


def usage_exit(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    return exc.value.code


@pytest.mark.parametrize("op", gradcheck.OPS)
def test_gradcheck_small(tmp_path, op):
    code, path = run(tmp_path, "gradcheck", "--op", op, "--cases", "3")
    assert code == 0
    got = rows(path)
    assert {r["gradient"] for r in got} >= {"input", "offsets"}
    assert all(r["passed"] == "1" for r in got)
    assert (tmp_path / "out.csv.manifest").exists()


def test_gradcheck_zero_tolerance_fails(tmp_path):
    code, _ = run(tmp_path, "gradcheck", "--op", "deform-conv", "--cases", "2", "--tol", "0")
    assert code == 1


def test_gradcheck_unknown_op():
    assert usage_exit(["gradcheck", "--op", "deform-max"]) == 2


def test_gradcheck_results_direct():
    results = gradcheck.run("deform-roi", seed=3, cases=4, config=FiniteDiffConfig())
    assert {r.gradient for r in results} == {"input", "offsets", "normalized_offsets"}
    assert all(r.passed for r in results)


def test_equiv_zero_offset(tmp_path):
    code, path = run(tmp_path, "equiv", "--mode", "zero-offset", "--cases", "10")
    assert code == 0
    got = rows(path)
    assert {r["op"] for r in got} == {"deform-conv", "deform-roi", "deform-ps-roi"}
    assert max(float(r["max_abs_dev"]) for r in got) < 1e-12


def test_equiv_atrous(tmp_path):
    assert run(tmp_path, "equiv", "--mode", "atrous", "--dilation", "4", "--cases", "5")[0] == 0


def test_equiv_bad_dilation():
    assert usage_exit(["equiv", "--mode", "atrous", "--dilation", "3"]) == 2


def test_train_shift(tmp_path, capsys):
    code, path = run(tmp_path, "train-shift", "--dx", "1.5", "--dy", "-0.5", "--iters", "300")
    assert code == 0
    last = rows(path)[-1]
    assert abs(float(last["mean_offset_x"]) - 1.5) < 0.1
    assert abs(float(last["mean_offset_y"]) + 0.5) < 0.1
    assert "abs error" in capsys.readouterr().out


def test_train_shift_zero(tmp_path):
    code, path = run(tmp_path, "train-shift", "--dx", "0", "--dy", "0", "--iters", "20")
    last = rows(path)[-1]
    assert code == 0 and np.hypot(float(last["mean_offset_x"]), float(last["mean_offset_y"])) < 0.01


def test_train_shift_no_iterations(tmp_path):
    code, path = run(tmp_path, "train-shift", "--dx", "1.5", "--dy", "-0.5", "--iters", "0")
    got = rows(path)
    assert code == 0 and len(got) == 1
    assert float(got[0]["mean_offset_x"]) == 0.0 and float(got[0]["mean_offset_y"]) == 0.0


def test_train_shift_out_of_range():
    assert usage_exit(["train-shift", "--dx", "4", "--dy", "0"]) == 2


@pytest.mark.parametrize("layers, total, distinct", [(1, 9, 9), (2, 81, 25), (3, 729, 49)])
def test_trace_zero(tmp_path, layers, total, distinct):
    code, path = run(tmp_path, "trace", "--layers", str(layers), "--kernel", "3")
    got = rows(path)
    assert code == 0 and len(got) == total
    assert len({(r["y"], r["x"]) for r in got}) == distinct


def test_trace_single_layer_neighbourhood(tmp_path):
    code, path = run(tmp_path, "trace", "--layers", "1", "--unit", "3,4")
    pts = sorted((float(r["y"]), float(r["x"])) for r in rows(path))
    assert pts == sorted((3.0 + dy, 4.0 + dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def test_trace_from_file(tmp_path):
    fields = np.random.default_rng(0).uniform(-1, 1, size=(2, 18, 8, 8))
    tensor_core.save_tensor(tmp_path / "f.dten", fields)
    code, path = run(tmp_path, "trace", "--layers", "2", "--offsets", str(tmp_path / "f.dten"))
    assert code == 0 and len(rows(path)) == 81


def test_trace_unit_out_of_range():
    assert usage_exit(["trace", "--unit", "99,0"]) == 2


def write_offsets(tmp_path, shape):
    path = tmp_path / "off.dten"
    tensor_core.save_tensor(path, np.zeros(shape))
    return str(path)


def test_stats_dilation_two(tmp_path):
    off = write_offsets(tmp_path, (1, 18, 6, 6))
    code, path = run(tmp_path, "stats", "--offsets", off, "--dilation", "2", "--padding", "2")
    got = rows(path)
    assert code == 0 and [r["category"] for r in got] == ["background"]
    assert float(got[0]["mean"]) == 2.0 and float(got[0]["std"]) == 0.0 and got[0]["count"] == "36"


def test_stats_with_boxes(tmp_path):
    off = write_offsets(tmp_path, (1, 18, 300, 300))
    boxes = tmp_path / "boxes.csv"
    boxes.write_text("batch,x,y,w,h\n0,0,0,10,10\n0,0,100,299,199\n")
    code, path = run(tmp_path, "stats", "--offsets", off, "--boxes", str(boxes))
    counts = {r["category"]: int(r["count"]) for r in rows(path)}
    assert code == 0
    assert counts["small"] == 11 * 11
    assert counts["large"] == 300 * 200
    assert sum(counts.values()) == 300 * 300


def test_stats_malformed_boxes(tmp_path):
    off = write_offsets(tmp_path, (1, 18, 4, 4))
    boxes = tmp_path / "boxes.csv"
    boxes.write_text("batch,x,y\n0,1,2\n")
    assert usage_exit(["stats", "--offsets", off, "--boxes", str(boxes), "--out", str(tmp_path / "s.csv")]) == 2


def test_bench(tmp_path):
    code, path = run(tmp_path, "bench", "--size", "1,2,12,12", "--reps", "1")
    got = rows(path)
    assert code == 0 and [r["variant"] for r in got] == ["plain", "deformable"]
    assert all(r["reps"] == "1" for r in got)


def test_bench_roi(tmp_path):
    code, path = run(tmp_path, "bench", "--op", "roi", "--size", "1,2,12,12", "--reps", "2")
    assert code == 0 and len(rows(path)) == 2


def test_manifest_contents(tmp_path):
    run(tmp_path, "equiv", "--mode", "zero-offset", "--cases", "1", "--seed", "7")
    manifest = dict(line.split("=", 1) for line in (tmp_path / "out.csv.manifest").read_text().splitlines())
    assert manifest["command"] == "equiv" and manifest["seed"] == "7"
    assert manifest["outputs"] == str(tmp_path / "out.csv")
    assert "duration_s" in manifest and manifest["mode"] == "zero-offset"


def test_module_entry_point(tmp_path):
    out = tmp_path / "t.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "deformconv", "trace", "--layers", "1", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "9 points" in proc.stdout
