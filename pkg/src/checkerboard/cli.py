"""Command-line entry point: train, encode, decode, bench, masklab, selftest.

Exit codes: 0 ok, 2 usage or input error, 3 decode integrity failure,
4 training divergence.
"""

import argparse
import dataclasses
import logging
import os
import sys
import time

import numpy as np

from . import bench, codec, data, masklab, ops, trainer
from . import network as net
from .errors import ContractError, DecodeError, TrainingError
from .imageio import ImageBuffer, read_image, write_image
from .tensor import Tensor

log = logging.getLogger("checkerboard")

EXIT_OK, EXIT_USAGE, EXIT_DECODE, EXIT_DIVERGED = 0, 2, 3, 4


# key=value config files ------------------------------------------------------


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def _coerce(value, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {value!r}")
    try:
        return type(default)(value)
    except ValueError:
        raise ContractError(f"cannot read {value!r} as {type(default).__name__}") from None


def build_train_config(settings):
    """TrainConfig from a flat dict; model keys (n_channels, ...) go to ModelConfig."""
    model_fields = {f.name: f.default for f in dataclasses.fields(net.ModelConfig)}
    train_fields = {f.name: f.default for f in dataclasses.fields(trainer.TrainConfig) if f.name != "model"}
    model_kw, train_kw = {}, {}
    for key, value in settings.items():
        if key in model_fields:
            model_kw[key] = _coerce(str(value), model_fields[key])
        elif key in train_fields:
            train_kw[key] = _coerce(str(value), train_fields[key])
        else:
            raise ContractError(f"unknown config key {key!r}")
    return trainer.TrainConfig(model=net.ModelConfig(**model_kw), **train_kw)


def _settings(args):
    settings = read_config_file(args.config) if getattr(args, "config", None) else {}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ContractError(f"--set expects key=value, got {pair!r}")
        k, v = pair.split("=", 1)
        settings[k.strip()] = v.strip()
    return settings


def _load_images(args, channels, size=128):
    if getattr(args, "images", None):
        return data.load_directory(args.images, channels)
    return list(data.synthetic_corpus(args.corpus_size, size=size, channels=channels, seed=args.corpus_seed))


# subcommands -----------------------------------------------------------------


def cmd_train(args):
    cfg = build_train_config(_settings(args))
    images = _load_images(args, cfg.model.image_channels)

    def progress(m):
        log.info("step %d loss %.4f bpp %.4f mse %.6f", m.step, m.loss, m.bpp, m.mse)

    weights, _, history = trainer.train(cfg, images, log_path=args.log, progress=progress)
    weights.save(args.out)
    last = history[-1] if history else None
    print(f"saved {args.out} digest {weights.digest():016x}" + (f" final loss {last.loss:.4f}" if last else ""))
    return EXIT_OK


def _read_input_image(path, channels):
    img = read_image(path).to_float()
    if img.shape[0] != channels:
        raise ContractError(f"{path} has {img.shape[0]} channels, the model expects {channels}")
    return img


def cmd_encode(args):
    weights = net.ModelWeights.load(args.weights)
    x = _read_input_image(args.input, weights.config.image_channels)
    t0 = time.perf_counter()
    res = codec.encode_image(x, weights, details=True)
    blob = res.container.to_bytes()
    seconds = time.perf_counter() - t0
    with open(args.output, "wb") as f:
        f.write(blob)
    pixels = x.shape[-1] * x.shape[-2]
    print(
        f"{args.output}: {len(blob)} bytes, bpp {8 * len(blob) / pixels:.6f}, "
        f"estimated bpp {res.estimated_total_bits / pixels:.6f}, "
        f"psnr {trainer.psnr(x, res.x_hat):.2f} dB, encode {1000 * seconds:.1f} ms"
    )
    return EXIT_OK


def cmd_decode(args):
    weights = net.ModelWeights.load(args.weights)
    with open(args.input, "rb") as f:
        blob = f.read()
    x_hat = codec.decode_image(blob, weights)
    write_image(args.output, ImageBuffer.from_float(x_hat))
    print(f"{args.output}: {x_hat.shape[-1]}x{x_hat.shape[-2]}")
    return EXIT_OK


def _bench_models(args):
    if args.weights:
        return [net.ModelWeights.load(p) for p in args.weights]
    kinds = args.variants.split(",")
    return [net.ModelWeights.init(net.ModelConfig(context_kind=k), seed=args.seed) for k in kinds]


def cmd_bench(args):
    models = _bench_models(args)
    channels = models[0].config.image_channels
    if args.image:
        img, name = _read_input_image(args.image, channels), os.path.basename(args.image)
    else:
        w, h = (int(v) for v in args.size.lower().split("x"))
        rng = np.random.default_rng(args.seed)
        img, name = data.synthetic_image(rng, max(w, h), channels)[:, :h, :w], f"synthetic{w}x{h}"
    timings = []
    for weights in models:
        for threads in args.threads:
            t = bench.bench_decode(weights, img, args.repeats, args.warmup, threads, name)
            timings.append(t)
            log.info("%s threads=%d total %.2f ms", t.variant, threads, t.total_ms)
    rows = bench.report_rows(timings)
    if args.out:
        bench.emit_report(timings, args.out, args.format)
    print(bench.markdown_table(rows), end="")
    return EXIT_OK


def cmd_masklab(args):
    if args.action == "train":
        settings = {"lam": 0.01, "context_kind": "random", "context_kernel": 5}
        settings.update(_settings(args))
        cfg = build_train_config(settings)
        if args.steps is not None:
            cfg = dataclasses.replace(cfg, steps=args.steps)
        elif "steps" not in settings:
            cfg = dataclasses.replace(cfg, steps=20000)
        # desk schedule unless the config says otherwise
        if "learning_rate" not in settings:
            cfg = dataclasses.replace(cfg, learning_rate=1e-3)
        if "lr_decay_step" not in settings:
            cfg = dataclasses.replace(cfg, lr_decay_step=int(0.75 * cfg.steps))
        images = _load_images(args, cfg.model.image_channels)
        weights, _ = masklab.train_random_mask_model(cfg, images, log_path=args.log)
        weights.save(args.out)
        print(f"saved {args.out} digest {weights.digest():016x}")
        return EXIT_OK
    weights = net.ModelWeights.load(args.weights)
    images = _load_images(args, weights.config.image_channels)
    ev = masklab.MaskEvaluator(weights, images)
    if args.action == "table1":
        reports = masklab.table1_protocol(weights, images, ev)
    else:
        reports = masklab.single_reference_sweep(weights, images, ev)
    if args.out:
        masklab.write_csv(reports, args.out)
    for r in reports:
        print(f"{r.description:28s} k_ref={r.k_ref:2d} bpp={r.bpp:.4f} eta={r.eta_percent:6.2f}%")
    return EXIT_OK


def cmd_selftest(args):
    """Fast end-to-end checks on tiny random models."""
    rng = np.random.default_rng(args.seed)
    x = rng.random((1, 64, 128)).astype(np.float32)
    failures = []
    for kind in ("checkerboard", "serial", "none"):
        weights = net.ModelWeights.init(trainer.tiny_config(kind), seed=args.seed)
        enc = codec.encode_image(x, weights, details=True)
        dec = codec.decode_image(enc.container.to_bytes(), weights, details=True)
        ok = np.array_equal(enc.y_hat, dec.y_hat) and np.array_equal(enc.x_hat, dec.x_hat)
        print(f"round trip {kind:12s} {'ok' if ok else 'FAIL'}")
        if not ok:
            failures.append(kind)
    y = rng.integers(-5, 6, size=(1, 4, 8, 8)).astype(np.float32)
    a, b = ops.demux(Tensor(y))
    ok = np.array_equal(ops.merge(a, b).data, y)
    print(f"demux/merge inverse     {'ok' if ok else 'FAIL'}")
    if not ok:
        failures.append("demux")
    report = trainer.verify_gradients(seed=args.seed, coords=4)
    print(f"gradient check          {'ok' if report.passed else 'FAIL'} (max rel err {report.max_error:.2e})")
    if not report.passed:
        failures.append("gradients")
    return EXIT_OK if not failures else EXIT_USAGE


# parser ------------------------------------------------------------------------


def _add_corpus_flags(p):
    p.add_argument("--images", help="directory of PGM/PPM files (default: synthetic corpus)")
    p.add_argument("--corpus-size", type=int, default=64, help="number of synthetic images")
    p.add_argument("--corpus-seed", type=int, default=0, help="seed of the synthetic corpus")


def build_parser():
    parser = argparse.ArgumentParser(prog="checkerboard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save its weights")
    p.add_argument("--config", help="key = value file with TrainConfig/ModelConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--log", help="CSV file for (step, loss, bpp, mse)")
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress a PGM/PPM image")
    p.add_argument("--weights", required=True)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a container to PGM/PPM")
    p.add_argument("--weights", required=True)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("bench", help="per-phase decode timing")
    p.add_argument("--weights", action="append", help="weights file (repeatable); default: random init")
    p.add_argument("--variants", default="serial,checkerboard,none", help="context kinds for random-init models")
    p.add_argument("--image", help="PGM/PPM to decode (default: synthetic)")
    p.add_argument("--size", default="768x512", help="WxH of the synthetic image")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", type=int, nargs="+", default=[1])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")
    p.add_argument("--out", help="report file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("masklab", help="random-mask supernet: train, table1, sweep")
    p.add_argument("action", choices=("train", "table1", "sweep"))
    p.add_argument("--weights", help="trained supernet (table1/sweep)")
    p.add_argument("--config", help="key = value training config (train)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--steps", type=int, help="training steps (train; default 20000)")
    p.add_argument("--out", help="weights (train) or CSV report (table1/sweep)")
    p.add_argument("--log", help="training CSV log")
    _add_corpus_flags(p)
    p.set_defaults(func=cmd_masklab)

    p = sub.add_parser("selftest", help="quick round-trip and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "masklab":
        if args.action == "train" and not args.out:
            parser.error("masklab train needs --out")
        if args.action != "train" and not args.weights:
            parser.error(f"masklab {args.action} needs --weights")
    try:
        return args.func(args)
    except DecodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
