"""Command-line entry point: ``ncsr {sr,eval,train,quantize,bench}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

from threadpoolctl import threadpool_limits

from . import bench, fileio, quant
from .image import load_png, save_png
from .metrics import psnr
from .model import ModelWeights, upscale
from .tensor import DType, Shape
from .train import load_config, train

log = logging.getLogger("ncsr")


def _load_model(path: str, int8: bool, scale: int | None):
    m = fileio.load_quantized(path) if int8 else fileio.load_weights(path)
    model_scale = m.scale if int8 else m.spec.scale
    if scale is not None and scale != model_scale:
        raise ValueError(f"--scale {scale} does not match the model's scale {model_scale}")
    return m, model_scale


def _infer(m, img):
    if isinstance(m, ModelWeights):
        return upscale(img, m)
    return quant.quantized_forward(img, m)


def cmd_sr(args) -> None:
    m, _ = _load_model(args.model, args.int8, args.scale)
    save_png(_infer(m, load_png(args.input)), args.output)


def cmd_eval(args) -> None:
    m, scale = _load_model(args.model, args.int8, args.scale)
    manifest = fileio.load_manifest(args.manifest, scale)
    values = []
    for lr_path, hr_path in manifest.pairs:
        r = psnr(_infer(m, load_png(lr_path)), load_png(hr_path))
        print(f"{lr_path}\t{r.psnr_db:.4f}")
        if not r.is_infinite:
            values.append(r.psnr_db)
    if not values:
        raise ValueError("every image reproduced exactly; mean PSNR undefined")
    print(f"mean\t{sum(values) / len(values):.4f}")


def cmd_train(args) -> None:
    cfg = load_config(args.config, seed=args.seed, scale=args.scale,
                      iters_phase1=args.iters_phase1, iters_phase2=args.iters_phase2,
                      batch_size=args.batch_size, patch_size=args.patch_size,
                      patch_size_finetune=args.patch_size_finetune)
    pairs = fileio.load_manifest(args.manifest, cfg.scale).load()
    val = fileio.load_manifest(args.val_manifest, cfg.scale).load() if args.val_manifest else ()
    m, curve = train(cfg, pairs, val, checkpoint=args.out + ".best" if val else None)
    fileio.save_weights(m, args.out)
    with open(args.out + ".tsv", "w") as fh:
        fh.write("iter\tloss\tlr\tval_psnr\n")
        for row in curve:
            fh.write("\t".join(str(v) for v in row) + "\n")
    if curve:
        print(f"final loss {curve[-1].loss:.4f} after {curve[-1].iter} iterations")


def cmd_quantize(args) -> None:
    m = fileio.load_weights(args.model)
    manifest = fileio.load_manifest(args.calib_manifest, m.spec.scale)
    images = [load_png(lr) for lr, _ in manifest.pairs]
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        qm = quant.quantize_model(m, quant.calibrate(m, images))
    fileio.save_quantized(qm, args.out)


def _shape(text: str) -> Shape:
    try:
        return Shape.of(*(int(v) for v in text.lower().split("x")))
    except (TypeError, ValueError) as exc:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}: expected NxHxWxC") from exc


def cmd_bench(args) -> None:
    cases = bench.standard_suite(args.shape)
    if args.only:
        cases = [c for c in cases if any(s in c.name for s in args.only)]
    dtype = DType(args.dtype)

    def progress(r: bench.CaseResult) -> None:
        log.info("%-48s %8.3f ms  %s", r.name, r.median_ms, r.status)

    report = bench.run_suite(cases, args.reps, args.warmups, args.threads, dtype, progress)
    if args.out:
        bench.write_report(report, args.out)
    else:
        sys.stdout.write(bench.emit_report(report, "markdown"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncsr", description=__doc__)
    p.add_argument("--threads", type=int, default=int(os.environ.get("NCSR_THREADS", "1")),
                   help="BLAS threads (default: $NCSR_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sr", help="super-resolve one PNG")
    s.add_argument("--model", required=True)
    s.add_argument("--scale", type=int)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--int8", action="store_true", help="model is a quantized file")
    s.set_defaults(func=cmd_sr)

    s = sub.add_parser("eval", help="PSNR over a manifest of LR/HR pairs")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--scale", type=int)
    s.add_argument("--int8", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("train", help="train the backbone")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--val-manifest")
    s.add_argument("--seed", type=int)
    s.add_argument("--scale", type=int)
    s.add_argument("--iters-phase1", type=int)
    s.add_argument("--iters-phase2", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--patch-size", type=int)
    s.add_argument("--patch-size-finetune", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("quantize", help="post-training int8 quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--calib-manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("bench", help="operator / architecture micro-benchmarks")
    s.add_argument("--reps", type=int, default=10)
    s.add_argument("--warmups", type=int, default=3)
    s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    s.add_argument("--dtype", choices=["f32", "i8"], default="f32")
    s.add_argument("--out", help="report path; .csv for CSV, anything else for markdown")
    s.add_argument("--shape", type=_shape, default=bench.DEFAULT_SHAPE, help="input NxHxWxC")
    s.add_argument("--only", nargs="*", help="run only cases whose name contains one of these")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (OSError, ValueError, TypeError, FloatingPointError) as exc:
        print(f"ncsr {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
