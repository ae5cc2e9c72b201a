"""Command-line entry point: ``gtfmn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DegradationSpec,
    bicubic_upscale,
    build_corpus,
    load_pairs,
    read_image,
    write_image,
    write_synthetic_charts,
)
from .metrics import aggregate, format_report, write_report
from .model import GtfmnConfig, load_checkpoint
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    ablate_blocks,
    ablate_illumination,
    evaluate,
    evaluate_bicubic,
    format_table,
    super_resolve,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
RUN_DIR_ENV = "GTFMN_RUN_DIR"
FULL_SCALE_DEPTHS = (16, 32, 64)

log = logging.getLogger("gtfmn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    return lo, hi


def _named_path(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep:
        return Path(text).parent.name or "test", text
    return name, path


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--scale", type=int, choices=(2, 4), default=2, help="upscaling factor (default: %(default)s)")
    g.add_argument("--width", type=int, default=32, help="feature channels C (default: %(default)s)")
    g.add_argument("--depth", type=int, default=4, help="number of IGM blocks N (default: %(default)s)")
    g.add_argument("--epsilon", type=float, default=1e-4, help="illumination-map normalisation epsilon (default: %(default)s)")
    g.add_argument("--no-illum", dest="use_illumination_stream", action="store_false",
                   help="disable the illumination stream (default: enabled)")
    g.add_argument("--guide-mode", choices=("off", "const1"), default="off",
                   help="adapter behaviour when the stream is disabled (default: %(default)s)")
    g.add_argument("--msa-kernels", type=_csv_ints, default=(3, 5, 7),
                   help="multi-scale attention kernel sizes (default: 3,5,7)")
    g.add_argument("--ffn-expansion", type=int, default=2, help="feed-forward expansion (default: %(default)s)")
    g.add_argument("--negative-slope", type=float, default=0.2, help="leaky ReLU slope (default: %(default)s)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    _add_model_flags(p)
    g = p.add_argument_group("training")
    g.add_argument("--manifest", default="", help="training manifest from synth-data")
    g.add_argument("--lr-patch", type=int, default=32, help="LR patch size (default: %(default)s)")
    g.add_argument("--batch", type=int, default=8, help="batch size (default: %(default)s)")
    g.add_argument("--steps", type=int, default=20000, help="training steps (default: %(default)s)")
    g.add_argument("--lr", type=float, default=2e-4, help="Adam learning rate (default: %(default)s)")
    g.add_argument("--lr-milestones", type=_csv_ints, default=(), help="steps at which the lr halves (default: none)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    g.add_argument("--ckpt-every", type=int, default=1000, help="checkpoint cadence in steps (default: %(default)s)")
    g.add_argument("--eval-every", type=int, default=0, help="evaluation cadence, 0 disables (default: %(default)s)")
    g.add_argument("--log-every", type=int, default=100, help="loss logging cadence (default: %(default)s)")
    g.add_argument("--augment", action="store_true", help="random flips/rotations (default: off)")
    g.add_argument("--nondeterministic", dest="deterministic", action="store_false",
                   help="allow multi-threaded BLAS (default: deterministic)")
    g.add_argument("--border-crop", type=int, default=None, help="metric border crop (default: scale)")
    g.add_argument("--map-smoothness", type=float, default=0.0, help="weight of the auxiliary map TV loss (default: 0)")
    g.add_argument("--gamma", type=float, default=2.2, help="degradation gamma recorded with the run (default: %(default)s)")
    g.add_argument("--test", dest="tests", action="append", default=[], metavar="NAME=MANIFEST",
                   help="evaluation manifest; repeatable")
    g.add_argument("--run-dir", default=os.environ.get(RUN_DIR_ENV, "runs/default"),
                   help=f"output directory (default: ${RUN_DIR_ENV} or runs/default)")
    g.add_argument("--config", default=None, help="key = value file; explicit flags take precedence")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gtfmn", description="Low-light super-resolution with illumination-guided modulation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate charts (or use --hr-dir) and build a degraded corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--hr-dir", default=None, help="existing HR images; default generates synthetic charts")
    p.add_argument("--count", type=int, default=10, help="number of synthetic charts (default: %(default)s)")
    p.add_argument("--size", type=int, default=96, help="synthetic chart size (default: %(default)s)")
    p.add_argument("--scale", type=int, choices=(2, 4), default=2, help="downsampling factor (default: %(default)s)")
    p.add_argument("--gamma", type=float, default=2.2, help="darkening gamma (default: %(default)s)")
    p.add_argument("--gamma-range", type=_float_range, default=None, help="per-image gamma LO,HI (default: fixed)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")

    p = sub.add_parser("train", help="train a model")
    _add_train_flags(p)

    p = sub.add_parser("infer", help="super-resolve images with a checkpoint")
    p.add_argument("inputs", nargs="+", help="input images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--emit-map", action="store_true", help="also write the illumination map (default: off)")
    p.add_argument("--side-by-side", action="store_true", help="also write [bicubic | SR] composites (default: off)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--border-crop", type=int, default=None, help="pixels cropped per side (default: scale)")
    p.add_argument("--out", default=None, help="report path (text + .json)")
    p.add_argument("--baseline", action="store_true", help="also report bicubic upscaling (default: off)")

    p = sub.add_parser("ablate-blocks", help="train one run per IGM block count")
    _add_train_flags(p)
    p.add_argument("--depths", type=_csv_ints, default=(1, 2, 4, 8), help="block counts (default: 1,2,4,8)")
    p.add_argument("--full-scale-depths", action="store_true", help="use depths 16,32,64 (default: off)")

    p = sub.add_parser("ablate-illum", help="train matched runs with and without the illumination stream")
    _add_train_flags(p)

    p = sub.add_parser("selftest", help="run the embedded oracle checks")
    p.add_argument("--inject-epsilon", type=float, default=None, help=argparse.SUPPRESS)
    return parser


def read_config_file(path: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = val.strip()
    return values


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace) -> argparse.Namespace:
    """Re-parse with the config file as defaults so explicit flags still win."""
    if not getattr(args, "config", None):
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]  # type: ignore[union-attr]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in read_config_file(args.config).items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if action.type is not None:
            defaults[key] = action.type(raw)
        elif isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _echo(args: argparse.Namespace) -> None:
    print("# resolved config")
    for key, val in sorted(vars(args).items()):
        print(f"#   {key} = {val}")


def _model_config(args) -> GtfmnConfig:
    return GtfmnConfig(
        scale=args.scale, width=args.width, depth=args.depth, epsilon=args.epsilon,
        use_illumination_stream=args.use_illumination_stream, guide_mode=args.guide_mode,
        msa_kernel_sizes=tuple(args.msa_kernels), ffn_expansion=args.ffn_expansion,
        negative_slope=args.negative_slope,
    )


def _train_config(args) -> TrainConfig:
    model = _model_config(args)
    return TrainConfig(
        model=model, spec=DegradationSpec(gamma=args.gamma, scale=model.scale), manifest=args.manifest,
        eval_manifests=dict(_named_path(t) for t in args.tests), lr_patch=args.lr_patch, batch=args.batch,
        steps=args.steps, lr=args.lr, lr_milestones=tuple(args.lr_milestones), seed=args.seed,
        ckpt_every=args.ckpt_every, eval_every=args.eval_every, log_every=args.log_every,
        deterministic=args.deterministic, augment=args.augment, border_crop=args.border_crop,
        map_smoothness=args.map_smoothness,
    )


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    hr_dir = Path(args.hr_dir) if args.hr_dir else out / "hr_source"
    if not args.hr_dir:
        write_synthetic_charts(hr_dir, args.count, args.size, args.seed)
    spec = DegradationSpec(gamma=args.gamma, scale=args.scale, gamma_range=args.gamma_range)
    entries = build_corpus(hr_dir, spec, out, seed=args.seed)
    print(f"wrote {len(entries)} pairs to {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args)
    try:
        run, _ = train(cfg, args.run_dir)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"trained {len(run.losses)} steps, final loss {run.losses[-1]:.5f}, {run.parameters} parameters")
    for step, name, rep in run.evals[-len(cfg.eval_manifests):] if cfg.eval_manifests else []:
        print(f"eval {name} @ {step}: psnr {rep.psnr:.4f} mse {rep.mse:.4f} ssim {rep.ssim:.4f}")
    print(f"checkpoint: {run.checkpoint}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s, k = model.config.scale, model.config.min_input_size
    failures = 0
    for name in args.inputs:
        path = Path(name)
        try:
            lr = read_image(path)
        except OSError as exc:
            print(f"error: {path}: cannot decode image ({exc})", file=sys.stderr)
            failures += 1
            continue
        h, w = lr.shape[1:]
        if h < k or w < k:
            print(f"error: {path}: {h}x{w} is too small; minimum input size is {k}x{k}", file=sys.stderr)
            failures += 1
            continue
        sr, m = super_resolve(model, lr)
        write_image(out / f"{path.stem}_sr.png", sr)
        if args.emit_map:
            write_image(out / f"{path.stem}_map.png", m)
        if args.side_by_side:
            write_image(out / f"{path.stem}_cmp.png", np.concatenate([bicubic_upscale(lr, s), sr], axis=2))
        print(f"{path} -> {out / (path.stem + '_sr.png')} ({sr.shape[1]}x{sr.shape[2]})")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_eval(args) -> int:
    reports, mean = evaluate(args.checkpoint, args.manifest, args.border_crop, args.out)
    sys.stdout.write(format_report(reports))
    if args.baseline:
        scale = load_checkpoint(args.checkpoint).config.scale
        crop = reports[0].border_crop
        base = evaluate_bicubic(load_pairs(args.manifest, scale), scale, crop)
        b = aggregate(base)
        print(f"bicubic {b.psnr:.4f} {b.mse:.4f} {b.ssim:.4f}")
        if args.out:
            write_report(base, Path(args.out).with_name(Path(args.out).stem + "_bicubic.txt"))
    return EXIT_OK


def _require_tests(cfg: TrainConfig) -> None:
    if not cfg.eval_manifests:
        raise UsageError("at least one --test NAME=MANIFEST is required")


def cmd_ablate_blocks(args) -> int:
    cfg = _train_config(args)
    _require_tests(cfg)
    depths = FULL_SCALE_DEPTHS if args.full_scale_depths else args.depths
    rows = ablate_blocks(cfg, depths, args.run_dir, cfg.eval_manifests)
    sys.stdout.write(format_table(rows, "# Blocks"))
    return EXIT_OK


def cmd_ablate_illum(args) -> int:
    cfg = _train_config(args)
    _require_tests(cfg)
    rows = ablate_illumination(cfg, args.run_dir, cfg.eval_manifests)
    sys.stdout.write(format_table(rows, "Variant", with_mse=True))
    print(f"map reads in the variant without the stream: {rows[1].map_reads}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    eps = 1e-4 if args.inject_epsilon is None else args.inject_epsilon
    return EXIT_OK if run_selftest(epsilon=eps) else EXIT_SELFTEST


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate-blocks": cmd_ablate_blocks,
    "ablate-illum": cmd_ablate_illum,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = _apply_config_file(parser, argv, args)
        _echo(args)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, argparse.ArgumentTypeError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
