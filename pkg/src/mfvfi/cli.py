"""Command-line entry point: ``mfvfi {interpolate,train-toy,gradcheck,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .io import ConfigError, FrameSizeError, MfvfiError

logger = logging.getLogger("mfvfi")


class UnknownOpError(MfvfiError):
    code = "E_UNKNOWN_OP"


def config_sidecar(weights_path) -> Path:
    return Path(f"{weights_path}.config.json")


def metrics_sidecar(weights_path) -> Path:
    return Path(f"{weights_path}.metrics.csv")


def _load_config(path: Optional[str], weights_path: Optional[str] = None, toy_default: bool = False):
    """Explicit ``--config``, else the sidecar next to the weights, else a default."""
    from .model import ModelConfig

    candidates = [path] if path else []
    if not path and weights_path and config_sidecar(weights_path).exists():
        candidates.append(str(config_sidecar(weights_path)))
    if not candidates:
        return ModelConfig.toy() if toy_default else ModelConfig()
    try:
        return ModelConfig.load(candidates[0])
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot load config {candidates[0]}: {exc}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_interpolate(args) -> int:
    from .model import forward
    from .tensor import Tensor, no_grad

    timings = {}
    t0 = time.perf_counter()
    frames = [io.read_frame(p) for p in args.frames]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FrameSizeError("input frames differ in size: "
                             + ", ".join(f"{p}={f.shape[2]}x{f.shape[1]}" for p, f in zip(args.frames, frames)))
    timings["read"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    config = _load_config(args.config, args.weights)
    weights = io.load_weights(args.weights, config)
    timings["load_weights"] = time.perf_counter() - t0

    stack = np.stack(frames, axis=1)[None]  # [1, 3, 4, H, W]
    padded, (h, w) = io.reflect_pad_to(stack, config.divisor)
    if padded.shape != stack.shape:
        logger.info("padded %dx%d to %dx%d", w, h, padded.shape[-1], padded.shape[-2])
    with no_grad():
        out = forward(Tensor(padded.astype(np.float32)), config, weights, timings).output.data
    out = out[0, :, :h, :w]

    t0 = time.perf_counter()
    io.write_frame(args.out, out)
    timings["write"] = time.perf_counter() - t0
    for stage, sec in timings.items():
        print(f"{stage:>13s} {sec * 1000:9.1f} ms")
    print(f"{'total':>13s} {sum(timings.values()) * 1000:9.1f} ms")
    return 0


def cmd_train_toy(args) -> int:
    from .trainer import METRICS_HEADER, TrainSettings, train_toy

    config = _load_config(args.config, toy_default=True)
    settings = TrainSettings(seed=args.seed)
    if args.epochs is not None:
        settings.epochs = args.epochs
    if args.batches is not None:
        settings.batches_per_epoch = args.batches
    out = Path(args.out)
    if not out.parent.exists():
        raise MfvfiError(f"output directory {out.parent} does not exist")

    print(METRICS_HEADER, flush=True)
    weights, log = train_toy(config, settings, on_epoch=lambda e: print(e.csv(), flush=True))
    io.save_weights(out, weights)
    io.atomic_write(metrics_sidecar(out),
                    "\n".join([METRICS_HEADER] + [e.csv() for e in log]).encode() + b"\n")
    io.atomic_write(config_sidecar(out), json.dumps(config.to_dict(), indent=2).encode())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import OPS, run_check

    names = list(OPS) if args.all or not args.op else args.op
    unknown = [n for n in names if n not in OPS]
    if unknown:
        raise UnknownOpError(f"unknown op {unknown[0]!r}; available: {', '.join(OPS)}")
    failed = 0
    for name in names:
        res = run_check(name, trials=args.trials, seed=args.seed)
        status = "ok" if res.passed else "FAIL"
        print(f"{name:16s} max_rel_error={res.max_rel_error:.3e} tol={res.tolerance:.0e} "
              f"trials={res.trials} time={res.seconds:.1f}s {status}", flush=True)
        failed += not res.passed
    if failed:
        print(f"error[E_GRADCHECK]: {failed} op(s) exceeded tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    from .metrics import psnr, ssim

    pred, ref = io.read_frame(args.pred), io.read_frame(args.ref)
    if pred.shape != ref.shape:
        raise FrameSizeError(f"pred is {pred.shape[2]}x{pred.shape[1]}, ref is {ref.shape[2]}x{ref.shape[1]}")
    print(f"PSNR {psnr(pred, ref):.4f} dB")
    print(f"SSIM {ssim(pred, ref):.6f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfvfi", description="Multi-flow video frame interpolation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("interpolate", help="synthesize the midpoint between frames 1 and 2")
    p.add_argument("--frames", nargs=4, required=True, metavar="PNG")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="model config JSON (default: <weights>.config.json if present)")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("train-toy", help="train the miniature model on synthetic motion")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batches", type=int, help="batches per epoch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="model config JSON (default: the toy config)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--op", action="append", help="operator name (repeatable)")
    group.add_argument("--all", action="store_true")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="PSNR and SSIM between two PNGs")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .tensor import ShapeError
    from .trainer import TrainingDiverged

    try:
        return args.func(args)
    except MfvfiError as exc:
        code = exc.code
        msg = str(exc)
    except TrainingDiverged as exc:
        code, msg = "E_DIVERGED", str(exc)
    except ShapeError as exc:
        code, msg = "E_SHAPE", str(exc)
    except OSError as exc:
        code, msg = "E_IO", str(exc)
    print(f"error[{code}]: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
