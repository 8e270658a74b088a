"""Micro-benchmark harness for single operator nodes and small conv graphs.

Case names follow the ``ConvN - fA-B[-C]`` convention: kernel size N, A input
channels, then the output channels of each layer. Operator cases append one
node (``+ ReLU`` ...) to the ``Conv3 - f3-16`` base. Upsampling cases compare
interpolation against the nearest convolution at scale 3.
"""
from __future__ import annotations

import csv
import hashlib
import io
import os
import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import ops, quant
from .image import ImageBuffer
from .model import ModelSpec, forward, init_weights, xavier_bound
from .nearest import build_nearest_conv, nearest_conv_forward
from .tensor import DType, Shape, Tensor

DEFAULT_SHAPE = Shape(1, 360, 640, 3)
UPSCALE = 3

Graph = Callable[[Any], Any]


@dataclass(frozen=True)
class BenchCase:
    name: str
    group: str  # "op", "arch" or "upsample"
    build: Callable[[DType, np.random.Generator, np.ndarray], Graph]
    input_shape: Shape = DEFAULT_SHAPE

    def prepare(self, dtype: DType, seed: int = 0) -> tuple[Graph, Any]:
        """Build weights and input outside the timed region."""
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 256, size=self.input_shape).astype(np.float32)
        graph = self.build(dtype, rng, x)
        if dtype is DType.I8:
            return graph, Tensor(quant.INPUT_QPARAMS.quantize(x), quant.INPUT_QPARAMS)
        return graph, x


@dataclass
class CaseResult:
    name: str
    dtype: str
    samples_ms: list[float] = field(default_factory=list)
    status: str = "ok"
    checksum: str = ""

    @property
    def median_ms(self) -> float:
        return statistics.median(self.samples_ms) if self.samples_ms else float("nan")

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms) if self.samples_ms else float("nan")

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95)) if self.samples_ms else float("nan")


@dataclass
class BenchReport:
    results: list[CaseResult]
    reps: int
    warmups: int
    threads: int
    cpu: str = field(default_factory=lambda: cpu_model())
    shape: tuple = tuple(DEFAULT_SHAPE)


def cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


# -- graph construction ---------------------------------------------------------


def _conv(rng: np.random.Generator, k: int, cin: int, cout: int, dilation: int = 1) -> ops.ConvWeights:
    bound = xavier_bound(k, k, cin, cout)
    kernel = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(np.float32)
    bias = rng.uniform(-1, 1, size=cout).astype(np.float32)
    return ops.ConvWeights(kernel, bias, dilation=dilation)


def _calib(*arrays: np.ndarray) -> quant.QuantParams:
    return quant.activation_qparams(min(float(a.min()) for a in arrays),
                                    max(float(a.max()) for a in arrays))


def _conv_chain(rng, x, dtype, layers: list[tuple[int, int, int, int]]):
    """Float convs plus their int8 twins calibrated on ``x``; returns (graph, float output)."""
    convs = [_conv(rng, k, cin, cout, d) for k, cin, cout, d in layers]
    y = x
    qconvs = []
    in_qp = quant.INPUT_QPARAMS
    for conv in convs:
        y = ops.conv2d(y, conv)
        if dtype is DType.I8:
            out_qp = _calib(y)
            qconvs.append(quant.QConv.from_float(conv, in_qp, out_qp))
            in_qp = out_qp
    if dtype is DType.I8:
        def run(t):
            for qc in qconvs:
                t = quant.qconv2d(t, qc)
            return t
    else:
        def run(a):
            for conv in convs:
                a = ops.conv2d(a, conv)
            return a
    return run, y


def _arch_case(k: int, chans: list[int]) -> BenchCase:
    name = f"Conv{k} - f" + "-".join(str(c) for c in chans)
    layers = [(k, a, b, 1) for a, b in zip(chans[:-1], chans[1:])]

    def build(dtype, rng, x):
        return _conv_chain(rng, x, dtype, layers)[0]
    return BenchCase(name, "arch", build)


def _op_case(name: str, f32_node, i8_node=None, dilation: int = 1) -> BenchCase:
    """Base 3x3, 3->16 conv followed by one extra node.

    ``f32_node(y, ctx)`` / ``i8_node(t, ctx)`` receive the conv output and a
    dict of operands prepared ahead of timing.
    """

    def build(dtype, rng, x):
        conv_run, y = _conv_chain(rng, x, dtype, [(3, 3, 16, dilation)])
        other = rng.uniform(-1, 1, size=y.shape).astype(np.float32) * np.abs(y).max()
        ctx: dict[str, Any] = {"other": other}
        if dtype is DType.I8:
            if i8_node is None:
                raise NotImplementedError(f"{name} has no int8 kernel")
            other_qp = _calib(other)
            ctx["other_q"] = Tensor(other_qp.quantize(other), other_qp)
            ref = f32_node(y, ctx) if f32_node else y
            ctx["out_qp"] = _calib(*(ref if isinstance(ref, tuple) else (ref,)))
            node = i8_node
        else:
            node = f32_node
        if node is None:
            return conv_run
        return lambda a: node(conv_run(a), ctx)
    return BenchCase(name, "op", build)


def _upsample_case(name: str, f32_graph, i8_graph) -> BenchCase:
    def build(dtype, rng, x):
        return (i8_graph if dtype is DType.I8 else f32_graph)(rng, x)
    return BenchCase(name, "upsample", build)


def _nearest_conv_graphs(fused: bool):
    w = build_nearest_conv(UPSCALE)

    def f32(rng, x):
        return lambda a: ops.depth_to_space(nearest_conv_forward(a, w, fused=fused), UPSCALE)

    def i8(rng, x):
        if fused:
            return lambda t: quant.qdepth_to_space(
                Tensor(np.tile(t.data, (1, 1, 1, UPSCALE ** 2)), t.qparams), UPSCALE)
        qc = quant.nearest_qconv(UPSCALE, quant.INPUT_QPARAMS)
        return lambda t: quant.qdepth_to_space(quant.qconv2d(t, qc), UPSCALE)
    return f32, i8


def _conv_d2s_graphs():
    def f32(rng, x):
        run, _ = _conv_chain(rng, x, DType.F32, [(3, 3, 3 * UPSCALE ** 2, 1)])
        return lambda a: ops.depth_to_space(run(a), UPSCALE)

    def i8(rng, x):
        run, _ = _conv_chain(rng, x, DType.I8, [(3, 3, 3 * UPSCALE ** 2, 1)])
        return lambda t: quant.qdepth_to_space(run(t), UPSCALE)
    return f32, i8


def _ncnet_graphs():
    def f32(rng, x):
        m = init_weights(ModelSpec(scale=UPSCALE), seed=int(rng.integers(2 ** 31)))
        return lambda a: forward(a, m)

    def i8(rng, x):
        m = init_weights(ModelSpec(scale=UPSCALE), seed=int(rng.integers(2 ** 31)))
        img = ImageBuffer(x[0].astype(np.uint8))
        qm = quant.quantize_model(m, quant.calibrate(m, [img]))
        return lambda t: quant.quantized_forward_q(t, qm)
    return f32, i8


def standard_suite(input_shape: Shape | tuple = DEFAULT_SHAPE) -> list[BenchCase]:
    """Operator nodes, conv arrangements, and upsampling variants; names are unique."""
    o = lambda ctx: ctx["out_qp"]  # noqa: E731
    cases = [
        _op_case("Conv3 - f3-16", None, lambda t, c: t),
        _op_case("w/ dilation", None, lambda t, c: t, dilation=2),
        _op_case("+ Add", lambda y, c: y + c["other"], lambda t, c: quant.qadd(t, c["other_q"], o(c))),
        _op_case("+ Multiply", lambda y, c: ops.multiply(y, c["other"]),
                 lambda t, c: quant.qmultiply(t, c["other_q"], o(c))),
        _op_case("+ Concat", lambda y, c: ops.concat_channels(y, y), lambda t, c: quant.qconcat(t, t, o(c))),
        _op_case("+ Split", lambda y, c: ops.split_channels(y, 8), lambda t, c: quant.qsplit(t, 8)),
        _op_case("+ ReLU", lambda y, c: ops.relu(y), lambda t, c: quant.qrelu(t)),
        _op_case("+ LeakyReLU", lambda y, c: ops.leaky_relu(y, 0.2),
                 lambda t, c: quant.qleaky_relu(t, o(c), 0.2)),
        _op_case("+ Global_Avgpool", lambda y, c: ops.global_avgpool(y), lambda t, c: quant.qglobal_avgpool(t)),
        _op_case("+ Global_Maxpool", lambda y, c: ops.global_maxpool(y), lambda t, c: quant.qglobal_maxpool(t)),
        _arch_case(1, [3, 3]),
        _arch_case(3, [3, 3]),
        _arch_case(5, [3, 3]),
        _arch_case(3, [3, 8]),
        # "Conv3 - f3-16" is shared with the operator group above
        _arch_case(3, [3, 32]),
        _arch_case(3, [3, 8, 8]),
        _arch_case(3, [3, 8, 16]),
        _arch_case(3, [3, 16, 16]),
        _arch_case(3, [3, 16, 32]),
        _arch_case(3, [3, 32, 32]),
        _upsample_case("nearest", lambda rng, x: lambda a: ops.nearest_upsample(a, UPSCALE),
                       lambda rng, x: lambda t: quant.qnearest_upsample(t, UPSCALE)),
        _upsample_case("bilinear", lambda rng, x: lambda a: ops.bilinear_upsample(a, UPSCALE),
                       lambda rng, x: lambda t: quant.qbilinear_upsample(t, UPSCALE)),
        _upsample_case("Conv-3 + depth2space", *_conv_d2s_graphs()),
        _upsample_case("nearest convolution + depth2space", *_nearest_conv_graphs(fused=False)),
        _upsample_case("nearest convolution (fused copy) + depth2space", *_nearest_conv_graphs(fused=True)),
        _upsample_case("NCNet", *_ncnet_graphs()),
    ]
    shape = Shape.of(*input_shape)
    return [BenchCase(c.name, c.group, c.build, shape) for c in cases]


# -- timing -------------------------------------------------------------------------


def checksum(out: Any) -> str:
    h = hashlib.sha1()
    for part in out if isinstance(out, tuple) else (out,):
        arr = part.data if isinstance(part, Tensor) else part
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def run(case: BenchCase, reps: int = 10, warmups: int = 3, threads: int = 1,
        dtype: DType = DType.F32, seed: int = 0) -> CaseResult:
    """Time one case; failures are recorded in ``status`` instead of raised."""
    if reps < 1 or warmups < 0:
        raise ValueError("reps must be >= 1 and warmups >= 0")
    result = CaseResult(case.name, dtype.value)
    with threadpool_limits(limits=threads):
        try:
            graph, x = case.prepare(dtype, seed)
            sums = {checksum(graph(x))}
            for _ in range(max(warmups - 1, 0)):
                graph(x)
            for _ in range(reps):
                t0 = time.perf_counter_ns()
                out = graph(x)
                t1 = time.perf_counter_ns()
                result.samples_ms.append((t1 - t0) / 1e6)
                sums.add(checksum(out))
        except NotImplementedError as exc:
            result.status = f"unsupported: {exc}"
            return result
        except Exception as exc:  # a broken case must not stop the suite
            result.status = f"failed: {type(exc).__name__}: {exc}"
            return result
    if len(sums) != 1:
        result.status = "nondeterministic"
    result.checksum = sums.pop() if len(sums) == 1 else ""
    return result


def run_suite(cases: list[BenchCase] | None = None, reps: int = 10, warmups: int = 3,
              threads: int = 1, dtype: DType = DType.F32,
              progress: Callable[[CaseResult], None] | None = None) -> BenchReport:
    if reps < 10 or warmups < 3:
        raise ValueError("reports need reps >= 10 and warmups >= 3")
    cases = standard_suite() if cases is None else cases
    results = []
    for case in cases:
        res = run(case, reps, warmups, threads, dtype)
        results.append(res)
        if progress is not None:
            progress(res)
    shape = tuple(cases[0].input_shape) if cases else tuple(DEFAULT_SHAPE)
    return BenchReport(results, reps, warmups, threads, shape=shape)


# -- reporting --------------------------------------------------------------------

CSV_FIELDS = ["case", "dtype", "median_ms", "mean_ms", "p95_ms", "reps", "status", "checksum"]


def emit_report(report: BenchReport, fmt: str = "markdown") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in report.results:
            w.writerow([r.name, r.dtype, repr(r.median_ms), repr(r.mean_ms), repr(r.p95_ms),
                        len(r.samples_ms), r.status, r.checksum])
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown report format {fmt!r}")
    shape = "x".join(str(d) for d in report.shape)
    lines = [
        f"CPU: {report.cpu}; threads: {report.threads}; input {shape}; "
        f"{report.reps} reps after {report.warmups} warmups",
        "",
        "| case | dtype | median ms | mean ms | p95 ms | status |",
        "|---|---|---:|---:|---:|---|",
    ]
    for r in report.results:
        lines.append(f"| {r.name} | {r.dtype} | {r.median_ms:.3f} | {r.mean_ms:.3f} | {r.p95_ms:.3f} | {r.status} |")
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> list[dict[str, Any]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for row in rows:
        for key in ("median_ms", "mean_ms", "p95_ms"):
            row[key] = float(row[key])
        row["reps"] = int(row["reps"])
    return rows


def write_report(report: BenchReport, path: str | os.PathLike) -> None:
    fmt = "csv" if os.fspath(path).endswith(".csv") else "markdown"
    with open(path, "w") as fh:
        fh.write(emit_report(report, fmt))
