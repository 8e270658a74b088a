"""Acceptance criteria AC-1 .. AC-9, one verdict line each in the terminal summary.

The training-based criteria (AC-4, AC-5, AC-9) share one CLI training run on a
small corpus of bicubic-downsampled crops from scikit-image's bundled photos.
AC-8 needs the DIV2K 3x validation set; point ``NCSR_DIV2K`` at a directory
containing ``DIV2K_valid_HR/`` and ``DIV2K_valid_LR_bicubic/X3/``.
"""
from __future__ import annotations

import contextlib
import math
import os
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from acceptance_log import RESULTS
from corpus import HELDOUT_SOURCES, SCALE, TRAIN_SOURCES, make_pairs, write_corpus
from gradcheck import check_forward_backward, float64_model
from ncsr import bench, fileio, ops, quant
from ncsr.cli import main as cli_main
from ncsr.image import ImageBuffer, img_to_tensor, load_png, save_png, tensor_to_img
from ncsr.metrics import psnr_over_set
from ncsr.model import ModelSpec, upscale, zero_weights
from ncsr.nearest import build_nearest_conv, nearest_conv_forward
from ncsr.tensor import DType
from oracles import central_difference, naive_conv2d, rel_err

pytestmark = pytest.mark.acceptance


class Verdict:
    def __init__(self, key: str):
        self.key = key
        self.detail = ""


@contextlib.contextmanager
def criterion(key: str):
    v = Verdict(key)
    try:
        yield v
    except pytest.skip.Exception:
        RESULTS[key] = ("SKIP", v.detail)
        print(f"{key}: SKIP  {v.detail}")
        raise
    except BaseException:
        RESULTS[key] = ("FAIL", v.detail)
        print(f"{key}: FAIL  {v.detail}")
        raise
    RESULTS[key] = ("PASS", v.detail)
    print(f"{key}: PASS  {v.detail}")


# -- shared desk training run ---------------------------------------------------------

DESK_CONFIG = """\
batch_size = 8
patch_size = 32
patch_size_finetune = 48
iters_phase1 = 1500
iters_phase2 = 500
lr_half_every = 600
log_every = 100
seed = 0
"""


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    train_pairs = make_pairs(TRAIN_SOURCES)
    held_pairs = make_pairs(HELDOUT_SOURCES)
    return {
        "root": root,
        "train": train_pairs,
        "held": held_pairs,
        "train_manifest": write_corpus(root / "train", train_pairs, "t"),
        "held_manifest": write_corpus(root / "held", held_pairs, "h"),
    }


@pytest.fixture(scope="session")
def desk_run(corpus):
    root = corpus["root"]
    (root / "desk.cfg").write_text(DESK_CONFIG)
    weights = root / "desk.bin"
    t0 = time.perf_counter()
    code = cli_main(["train", "--manifest", str(corpus["train_manifest"]), "--config",
                     str(root / "desk.cfg"), "--out", str(weights)])
    return {"code": code, "weights": weights, "seconds": time.perf_counter() - t0}


# -- AC-1 -------------------------------------------------------------------------------


def test_ac1_nearest_conv_exact():
    with criterion("AC-1") as v:
        t0 = time.perf_counter()
        rng = np.random.default_rng(101)
        checked = 0
        for s in (1, 2, 3, 4):
            w = build_nearest_conv(s)
            for _ in range(100):
                h, wd = (int(d) for d in rng.integers(1, 17, 2))
                x = (rng.standard_normal((1, h, wd, 3)) * 100).astype(np.float32)
                ref = ops.nearest_upsample(x, s)
                for fused in (False, True):
                    assert np.array_equal(ops.depth_to_space(nearest_conv_forward(x, w, fused), s), ref)
                checked += 1
        elapsed = time.perf_counter() - t0
        v.detail = f"{checked} tensors bit-exact over s=1..4 in {elapsed:.2f}s"
        assert elapsed < 10


# -- AC-2 -------------------------------------------------------------------------------


def test_ac2_conv_oracle():
    with criterion("AC-2") as v:
        t0 = time.perf_counter()
        rng = np.random.default_rng(202)
        worst = 0.0
        for _ in range(50):
            k = int(rng.choice([1, 3, 5]))
            dil = int(rng.choice([1, 2]))
            padding = str(rng.choice(["same", "valid"]))
            n = int(rng.integers(1, 3))
            cin, cout = (int(c) for c in rng.integers(1, 9, 2))
            lo = dil * (k - 1) + 1 if padding == "valid" else 1
            h, w = (int(d) for d in rng.integers(lo, 17, 2))
            x = rng.standard_normal((n, h, w, cin)).astype(np.float32)
            conv = ops.ConvWeights(rng.standard_normal((k, k, cin, cout)).astype(np.float32),
                                   rng.standard_normal(cout).astype(np.float32), padding=padding, dilation=dil)
            ref = naive_conv2d(x, conv.kernel, conv.bias, 1, padding, dil)
            got = ops.conv2d(x, conv)
            assert got.shape == ref.shape
            worst = max(worst, float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
        elapsed = time.perf_counter() - t0
        v.detail = f"50 configs, worst relative error {worst:.2e} in {elapsed:.1f}s"
        assert worst <= 1e-5
        assert elapsed < 30


# -- AC-3 -------------------------------------------------------------------------------


def _fd_check(f, arr, grad, coords, rng, eps=1e-3, keep=lambda idx: True):
    worst, done, tries = 0.0, 0, 0
    while done < coords and tries < 20 * coords:
        tries += 1
        idx = tuple(int(rng.integers(d)) for d in arr.shape)
        if not keep(idx):
            continue
        worst = max(worst, rel_err(central_difference(f, arr, idx, eps), grad[idx], floor=1e-8))
        done += 1
    return done, worst


def test_ac3_gradient_checks():
    with criterion("AC-3") as v:
        t0 = time.perf_counter()
        rng = np.random.default_rng(303)
        results = {}

        # conv2d_backward: input, kernel and bias
        x = rng.standard_normal((2, 8, 8, 4))
        conv = ops.ConvWeights(rng.standard_normal((3, 3, 4, 5)), rng.standard_normal(5), dilation=2)
        g = rng.standard_normal((2, 8, 8, 5))
        gx, gw, gb = ops.conv2d_backward(x, conv, g)

        def f_conv():
            return float(np.sum(ops.conv2d(x, conv) * g))

        results["conv.x"] = _fd_check(f_conv, x, gx, 100, rng)
        results["conv.w"] = _fd_check(f_conv, conv.kernel, gw, 100, rng)
        results["conv.b"] = _fd_check(f_conv, conv.bias, gb, 5, rng)

        # relu_backward, away from the kink at 0
        xr = rng.standard_normal((1, 10, 10, 4))
        gr = rng.standard_normal(xr.shape)
        results["relu"] = _fd_check(lambda: float(np.sum(ops.relu(xr) * gr)), xr,
                                    ops.relu_backward(xr, gr), 100, rng,
                                    keep=lambda idx: abs(xr[idx]) > 1e-2)

        # depth_to_space: its backward is space_to_depth
        xd = rng.standard_normal((1, 4, 4, 18))
        gd = rng.standard_normal((1, 12, 12, 2))
        results["d2s"] = _fd_check(lambda: float(np.sum(ops.depth_to_space(xd, 3) * gd)), xd,
                                   ops.space_to_depth(gd, 3), 100, rng)

        # full forward_backward through the 7x32 graph
        m = float64_model(ModelSpec(), 7)
        y = rng.uniform(0, 255, (1, 5, 5, 3))
        target = rng.uniform(0, 255, (1, 15, 15, 3))
        checked, skipped, worst = check_forward_backward(m, y, target, 120, rng)
        results["forward_backward"] = (checked, worst)

        elapsed = time.perf_counter() - t0
        worst_all = max(w for _, w in results.values())
        v.detail = (", ".join(f"{k} {n}" for k, (n, _) in results.items())
                    + f" coords; {skipped} kink-adjacent skipped; worst rel {worst_all:.1e}; {elapsed:.1f}s")
        for key, (n, _) in results.items():
            assert n >= (5 if key == "conv.b" else 100), key
        assert results["conv.x"][0] + results["conv.w"][0] + results["conv.b"][0] >= 100
        assert worst_all < 1e-4
        assert elapsed < 60


# -- AC-4 / AC-5 ------------------------------------------------------------------------


def _mean_psnr(m, pairs):
    return psnr_over_set([(upscale(lr, m), hr) for lr, hr in pairs])


def test_ac4_learning_beats_nearest(corpus, desk_run):
    with criterion("AC-4") as v:
        assert desk_run["code"] == 0
        m = fileio.load_weights(desk_run["weights"])
        held = corpus["held"]
        base = _mean_psnr(zero_weights(ModelSpec(scale=SCALE)), held)
        trained = _mean_psnr(m, held)
        curve = (Path(str(desk_run["weights"]) + ".tsv")).read_text().splitlines()[1:]
        iters = int(curve[-1].split("\t")[0])
        v.detail = (f"{len(corpus['train'])} train pairs, {iters} iters in {desk_run['seconds']:.0f}s; "
                    f"held-out nearest {base:.3f} dB, trained {trained:.3f} dB (+{trained - base:.3f})")
        assert len(corpus["train"]) >= 8 and iters <= 2000
        assert trained - base >= 0.3
        assert desk_run["seconds"] < 15 * 60


def test_ac5_quantization_parity(corpus, desk_run):
    with criterion("AC-5") as v:
        t0 = time.perf_counter()
        m = fileio.load_weights(desk_run["weights"])
        calib = [lr for lr, _ in corpus["train"]]
        qm = quant.quantize_model(m, quant.calibrate(m, calib))
        held = corpus["held"]
        rep = quant.parity_report(m, qm, [lr for lr, _ in held], [hr for _, hr in held])

        zm = zero_weights(ModelSpec(scale=SCALE))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            zq = quant.quantize_model(zm, quant.calibrate(zm, calib))
        rng = np.random.default_rng(505)
        inputs = [lr for lr, _ in held + corpus["train"]]
        inputs += [ImageBuffer(rng.integers(0, 256, (int(h), int(w), 3), dtype=np.uint8))
                   for h, w in rng.integers(1, 40, (20, 2))]
        exact = all(np.array_equal(quant.quantized_forward(img, zq).pixels,
                                   ops.nearest_upsample(img_to_tensor(img), SCALE)[0].astype(np.uint8))
                    for img in inputs)
        elapsed = time.perf_counter() - t0
        v.detail = (f"float {rep.psnr_f32:.3f} dB, int8 {rep.psnr_i8:.3f} dB, delta {rep.delta:.3f} dB; "
                    f"zero-backbone int8 bit-exact on {len(inputs)} images: {exact}; {elapsed:.1f}s")
        assert rep.delta <= 0.5
        assert exact
        assert elapsed < 120


# -- AC-6 -------------------------------------------------------------------------------


def test_ac6_requantization():
    with criterion("AC-6") as v:
        t0 = time.perf_counter()
        rng = np.random.default_rng(606)
        multipliers = 10.0 ** rng.uniform(-9, 0, 24)
        worst, total = 0, 0
        for mult in multipliers:
            acc = rng.integers(-2 ** 31, 2 ** 31, 1_000_000, dtype=np.int64)
            r = quant.Rescale.of(float(mult))
            diff = np.abs(r(acc) - quant.requantize_reference(acc, float(mult)))
            worst = max(worst, int(diff.max()))
            total += acc.size
        elapsed = time.perf_counter() - t0
        v.detail = f"{total:,} accumulators over {len(multipliers)} multipliers, max |diff| {worst} LSB, {elapsed:.1f}s"
        assert worst <= 1
        assert elapsed < 30


# -- AC-7 -------------------------------------------------------------------------------

OPERATOR_ROWS = ["Conv3 - f3-16", "w/ dilation", "+ Add", "+ Multiply", "+ Concat", "+ Split",
                 "+ ReLU", "+ LeakyReLU", "+ Global_Avgpool", "+ Global_Maxpool"]
ARCH_ROWS = ["Conv1 - f3-3", "Conv3 - f3-3", "Conv5 - f3-3", "Conv3 - f3-8", "Conv3 - f3-16",
             "Conv3 - f3-32", "Conv3 - f3-8-8", "Conv3 - f3-8-16", "Conv3 - f3-16-16",
             "Conv3 - f3-16-32", "Conv3 - f3-32-32"]


def test_ac7_bench_matrix(tmp_path):
    with criterion("AC-7") as v:
        notes = []
        for dtype in (DType.F32, DType.I8):
            t0 = time.perf_counter()
            report = bench.run_suite(bench.standard_suite((1, 360, 640, 3)), reps=10, warmups=3,
                                     threads=1, dtype=dtype)
            elapsed = time.perf_counter() - t0
            out = tmp_path / f"bench_{dtype.value}.csv"
            bench.write_report(report, out)
            rows = bench.parse_csv(out.read_text())
            names = [r["case"] for r in rows]
            for row in OPERATOR_ROWS + ARCH_ROWS:
                assert names.count(row) == 1, row
            bad = [r["case"] for r in rows if r["status"] != "ok"]
            assert not bad, bad
            assert all(r["reps"] == 10 for r in rows)
            med = {r["case"]: r["median_ms"] for r in rows}
            faster = med["nearest convolution + depth2space"] < med["bilinear"]
            notes.append(f"{dtype.value}: {len(rows)} rows ok in {elapsed:.0f}s "
                         f"(nearest-conv {med['nearest convolution + depth2space']:.1f} ms vs "
                         f"bilinear {med['bilinear']:.1f} ms{'' if faster else ', advisory not met'})")
            v.detail = "; ".join(notes)
            assert elapsed < 600
            assert report.shape == (1, 360, 640, 3)


# -- AC-8 -------------------------------------------------------------------------------


def _div2k_pairs(root: Path):
    hr_dir, lr_dir = root / "DIV2K_valid_HR", root / "DIV2K_valid_LR_bicubic" / "X3"
    pairs = []
    for hr in sorted(hr_dir.glob("*.png")):
        lr = lr_dir / f"{hr.stem}x3.png"
        pairs.append((lr, hr))
    return pairs


def test_ac8_div2k_baselines():
    with criterion("AC-8") as v:
        root = os.environ.get("NCSR_DIV2K")
        if not root or not Path(root).is_dir():
            v.detail = "DIV2K validation set not available (set NCSR_DIV2K)"
            pytest.skip(v.detail)
        pairs = _div2k_pairs(Path(root))
        assert len(pairs) == 100
        near, bil_half, bil_asym = [], [], []
        for lr_path, hr_path in pairs:
            lr, hr = load_png(lr_path), load_png(hr_path)
            y = img_to_tensor(lr)
            # DIV2K HR sides are not always multiples of 3; compare on the covered area
            h, w = 3 * lr.height, 3 * lr.width
            hr = ImageBuffer(np.ascontiguousarray(hr.pixels[:h, :w]))
            near.append((tensor_to_img(ops.nearest_upsample(y, 3)), hr))
            bil_half.append((tensor_to_img(ops.bilinear_upsample(y, 3)), hr))
            bil_asym.append((tensor_to_img(ops.bilinear_upsample(y, 3, "asymmetric")), hr))
        pn, pb, pa = psnr_over_set(near), psnr_over_set(bil_half), psnr_over_set(bil_asym)
        v.detail = f"nearest {pn:.3f} dB, bilinear half-pixel {pb:.3f} dB, asymmetric {pa:.3f} dB"
        assert abs(pn - 26.67) <= 0.15
        assert abs(pb - 27.67) <= 0.25


# -- AC-9 -------------------------------------------------------------------------------


def test_ac9_cli_smoke(corpus, desk_run, tmp_path, capsys):
    with criterion("AC-9") as v:
        t0 = time.perf_counter()
        zero = tmp_path / "zero.bin"
        fileio.save_weights(zero_weights(ModelSpec(scale=SCALE)), zero)
        lr, _ = corpus["held"][0]
        save_png(lr, tmp_path / "in.png")
        assert cli_main(["sr", "--model", str(zero), "--scale", "3", "--input", str(tmp_path / "in.png"),
                         "--output", str(tmp_path / "out.png")]) == 0
        ref = ImageBuffer(ops.nearest_upsample(img_to_tensor(lr), SCALE)[0].astype(np.uint8))
        sr_exact = load_png(tmp_path / "out.png") == ref

        assert desk_run["code"] == 0
        qpath = tmp_path / "desk_q.bin"
        assert cli_main(["quantize", "--model", str(desk_run["weights"]),
                         "--calib-manifest", str(corpus["train_manifest"]), "--out", str(qpath)]) == 0
        capsys.readouterr()
        assert cli_main(["eval", "--model", str(qpath), "--manifest", str(corpus["held_manifest"]),
                         "--int8"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        mean = float(lines[-1].split("\t")[1])
        elapsed = time.perf_counter() - t0 + desk_run["seconds"]
        v.detail = (f"sr zero-model bit-exact: {sr_exact}; train -> quantize -> eval --int8 exit 0, "
                    f"int8 held-out mean {mean:.3f} dB; {elapsed:.0f}s")
        assert sr_exact
        assert math.isfinite(mean) and len(lines) == len(corpus["held"]) + 1
        assert elapsed < 20 * 60
