"""Command-line interface.

Subcommands: init, fit, reconstruct, eval. Machine-readable output is CSV
with a stable header on stdout; diagnostics go to stderr. Exit codes:
0 success, 2 input/config error, 3 empty edge mask without grid fallback,
4 diverged (non-finite loss).

Option values resolve as: command-line flag, then config file (flat
key=value lines, keys named like the long flags), then built-in default.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time

from .edge_init import InitConfig, edge_init_pipeline, grid_init
from .errors import (
    DimensionMismatch,
    EmptyEdgeMask,
    InvalidThresholds,
    NonFiniteLoss,
    ParseError,
    SmoeError,
    TileTooSmall,
)
from .imaging import load_image, mse, psnr, save_image, ssim
from .model import load_model, reconstruct, save_model
from .optimizer import TrainConfig, fit_pipeline, write_report_csv

_EXIT_OK = 0
_EXIT_INPUT = 2
_EXIT_EMPTY_EDGE = 3
_EXIT_DIVERGED = 4

# name -> (type, default); names double as config-file keys.
_OPTIONS = {
    "mode": (str, "edge"),
    "grid": (int, None),
    "max-pts": (int, 256),
    "delta-mu": (float, 4.0),
    "lambda": (float, 0.1),
    "canny-sigma": (float, 1.4),
    "canny-low": (float, 0.1),
    "canny-high": (float, 0.2),
    "eta": (float, 0.1),
    "expert-iters": (int, 100),
    "tile": (int, 256),
    "lr": (float, 5e-3),
    "reg": (float, 1e-4),
    "prune": (float, 1e-3),
    "iters": (int, 2000),
    "threads": (int, None),
}


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}: expected key=value", line=lineno)
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


class _Options:
    """Flag > config file > default resolution for the shared option table."""

    def __init__(self, args: argparse.Namespace):
        self._args = vars(args)
        self._config = _load_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, name: str):
        typ, default = _OPTIONS[name]
        flag_value = self._args.get(name.replace("-", "_"))
        if flag_value is not None:
            return flag_value
        if name in self._config:
            try:
                return typ(self._config[name])
            except ValueError:
                raise ValueError(f"config key {name!r}: cannot parse {self._config[name]!r}") from None
        return default

    def threads(self) -> int:
        value = self.get("threads")
        if value is not None:
            return value
        env = os.environ.get("SMOE_THREADS")
        return int(env) if env else 1

    def init_config(self) -> InitConfig:
        return InitConfig(
            canny_sigma=self.get("canny-sigma"),
            canny_low=self.get("canny-low"),
            canny_high=self.get("canny-high"),
            lam=self.get("lambda"),
            max_pts=self.get("max-pts"),
            delta_mu=self.get("delta-mu"),
            eta=self.get("eta"),
            expert_iters=self.get("expert-iters"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.get("lr"),
            max_iters=self.get("iters"),
            reg_weight=self.get("reg"),
            prune_threshold=self.get("prune"),
        )


def _add_init_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=("edge", "grid"), default=None)
    p.add_argument("--grid", type=int, default=None, help="kernels per axis for grid mode")
    p.add_argument("--max-pts", type=int, default=None)
    p.add_argument("--delta-mu", type=float, default=None)
    p.add_argument("--lambda", dest="lambda_", type=float, default=None)
    p.add_argument("--canny-sigma", type=float, default=None)
    p.add_argument("--canny-low", type=float, default=None)
    p.add_argument("--canny-high", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--expert-iters", type=int, default=None)
    p.add_argument("--config", default=None, help="key=value option file")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--reg", type=float, default=None)
    p.add_argument("--prune", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--trace", action="store_true")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoe")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="initialize a model and write it")
    p_init.add_argument("--image", required=True)
    p_init.add_argument("--out", required=True)
    p_init.add_argument(
        "--grid-fallback", action="store_true",
        help="fall back to grid init when no edges are found",
    )
    _add_init_flags(p_init)

    p_fit = sub.add_parser("fit", help="run the full split/train/merge pipeline")
    p_fit.add_argument("--image", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--report", default=None, help="pipeline report CSV path")
    p_fit.add_argument("--recon", default=None, help="optional reconstruction PGM path")
    _add_init_flags(p_fit)
    _add_train_flags(p_fit)

    p_rec = sub.add_parser("reconstruct", help="render a model file to PGM")
    p_rec.add_argument("--model", required=True)
    p_rec.add_argument("--out", required=True)

    p_eval = sub.add_parser("eval", help="print psnr/ssim/mse between two images")
    p_eval.add_argument("image_a")
    p_eval.add_argument("image_b")
    return parser


def _lambda_alias(opts: _Options, args) -> _Options:
    # argparse stores --lambda under lambda_; map it onto the option table name.
    opts._args["lambda"] = getattr(args, "lambda_", None)
    return opts


def _cmd_init(args) -> int:
    opts = _lambda_alias(_Options(args), args)
    image = load_image(args.image)
    mode = opts.get("mode")
    start = time.perf_counter()
    if mode == "grid":
        axis = opts.get("grid") or max(1, round(math.sqrt(2 * opts.get("max-pts"))))
        model = grid_init(image, axis)
    else:
        try:
            model = edge_init_pipeline(image, opts.init_config())
        except EmptyEdgeMask:
            if not args.grid_fallback:
                raise
            axis = opts.get("grid") or max(1, round(math.sqrt(2 * opts.get("max-pts"))))
            model = grid_init(image, axis)
    seconds = time.perf_counter() - start
    save_model(model, args.out)
    print("kernels,seconds")
    print(f"{len(model.kernels)},{seconds:.6f}")
    return _EXIT_OK


def _cmd_fit(args) -> int:
    opts = _lambda_alias(_Options(args), args)
    image = load_image(args.image)
    start = time.perf_counter()
    model, report = fit_pipeline(
        image,
        opts.init_config(),
        opts.train_config(),
        tile_size=opts.get("tile"),
        init_mode=opts.get("mode"),
        grid_axis=opts.get("grid"),
        threads=opts.threads(),
        collect_traces=args.trace,
    )
    seconds = time.perf_counter() - start
    save_model(model, args.out)
    if args.report:
        write_report_csv(report, args.report, traces=args.trace)
    recon = reconstruct(model)
    if args.recon:
        save_image(recon, args.recon)
    print("psnr_db,kernels,seconds")
    print(f"{psnr(recon, image)!r},{len(model.kernels)},{seconds:.6f}")
    return _EXIT_OK


def _cmd_reconstruct(args) -> int:
    model = load_model(args.model)
    save_image(reconstruct(model), args.out)
    return _EXIT_OK


def _cmd_eval(args) -> int:
    a = load_image(args.image_a)
    b = load_image(args.image_b)
    print("psnr_db,ssim,mse")
    print(f"{psnr(a, b)!r},{ssim(a, b)!r},{mse(a, b)!r}")
    return _EXIT_OK


_COMMANDS = {
    "init": _cmd_init,
    "fit": _cmd_fit,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except EmptyEdgeMask as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_EMPTY_EDGE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_DIVERGED
    except (ParseError, DimensionMismatch, InvalidThresholds, TileTooSmall,
            SmoeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
