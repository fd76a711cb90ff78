"""Command-line entry point: ``uniconvnet <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis
from .artifact_io import (
    ConfigParseError,
    ImageFormatError,
    WeightsError,
    load_image_dir,
    parse_config,
    write_pgm,
)
from .model import build_model, overfit, overfit_problem
from .rfa import ConfigError
from .tensor import Rng, ShapeError, resolve_dtype
from .verify import grad_check_suite, rfa_support_checks

log = logging.getLogger("uniconvnet")

BUILTIN_CONFIGS = {"tiny": "tiny.json", "a-like": "a_like.json"}

CSV_HELP = """\
CSV outputs (written to --out):
  describe.csv       category,params,macs,elementwise  (categories rfa, small_conv,
                     ffn, stem_downsample, head, then total; macs are reported FLOPs)
  erf_metrics.csv    metric,value  (argmax_row, argmax_col, monotonicity_violation,
                     gauss_sigma, gauss_r2, area_ratio_0.2/0.5/0.9, sample_count)
  erf_profile.csv    radius,mean
  erf_grid.csv       one row per image row of averaged |input gradient|
  rf_support.csv     check,theoretical,empirical_h,empirical_w,status
  grad_check.csv     case,max_rel_err,tol,checked,status
  overfit_loss.csv   step,loss
Environment: UNICONV_THREADS caps ERF worker threads (default 1).
"""


class UsageError(Exception):
    pass


INPUT_ERRORS = (UsageError, ConfigError, ConfigParseError, ShapeError, ImageFormatError,
                WeightsError, FileNotFoundError, IsADirectoryError)


def _load_config(spec: str):
    if spec in BUILTIN_CONFIGS:
        text = resources.files("uniconvnet").joinpath("configs", BUILTIN_CONFIGS[spec]).read_text("utf-8")
    else:
        text = Path(spec).read_text(encoding="utf-8")
    return parse_config(text)


def _write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _setup(args):
    model_cfg, rfa_cfg, seed = _load_config(args.config)
    if args.seed is not None:
        seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return model_cfg, rfa_cfg, seed, out


def cmd_describe(args) -> int:
    cfg, _, seed, out = _setup(args)
    size = args.input_size
    analysis.check_input_extent(size, size)
    bd = analysis.count_flops(cfg, (size, size))
    model = build_model(cfg, Rng(seed), dtype=resolve_dtype(args.precision))
    enumerated = analysis.enumerate_params(model).params

    print(f"{'category':<16}{'params':>14}{'MACs':>18}{'elementwise':>16}")
    for name, p, m, e in bd.rows():
        print(f"{name:<16}{p:>14,}{m:>18,}{e:>16,}")
    print(f"\nparams {bd.params / 1e6:.3f}M   FLOPs (MACs) {bd.macs / 1e9:.4f}G at {size}x{size}")
    ok = enumerated == bd.params
    print(f"enumerated params {enumerated:,}: {'PASS' if ok else 'FAIL'}")
    _write_csv(out / "describe.csv", ["category", "params", "macs", "elementwise"], bd.rows())
    return 0 if ok else 1


def _erf_images(args):
    if args.input_kind != "image_dir":
        return None
    if not args.image_dir:
        raise UsageError("--input-kind image_dir needs --image-dir")
    if not Path(args.image_dir).is_dir():
        raise UsageError(f"image directory {args.image_dir} does not exist")
    images = load_image_dir(args.image_dir, args.input_size)
    if not images:
        raise UsageError(f"no readable P6 images of at least {args.input_size}px in {args.image_dir}")
    return images


def _write_erf(out: Path, erf: analysis.ErfMap, gamma: float) -> analysis.AgdMetrics:
    write_pgm(analysis.render_heatmap(erf, gamma), out / "erf.pgm")
    _write_csv(out / "erf_grid.csv", [f"c{j}" for j in range(erf.grid.shape[1])],
               [[float(v) for v in row] for row in erf.grid])
    metrics = analysis.agd_metrics(erf)
    _write_csv(out / "erf_profile.csv", ["radius", "mean"], metrics.radial_profile)
    rows = [
        ("argmax_row", metrics.argmax[0]),
        ("argmax_col", metrics.argmax[1]),
        ("center_row", erf.center[0]),
        ("center_col", erf.center[1]),
        ("monotonicity_violation", metrics.monotonicity_violation),
        ("gauss_sigma", metrics.gauss_sigma),
        ("gauss_r2", metrics.gauss_r2),
        *[(f"area_ratio_{t}", v) for t, v in metrics.area_ratio.items()],
        ("sample_count", erf.sample_count),
    ]
    _write_csv(out / "erf_metrics.csv", ["metric", "value"], rows)
    return metrics


def cmd_erf(args) -> int:
    cfg, _, seed, out = _setup(args)
    if args.samples < 1:
        raise UsageError("--samples must be at least 1")
    analysis.check_input_extent(args.input_size, args.input_size)
    images = _erf_images(args)
    rng = Rng(seed)
    model = build_model(cfg, rng, dtype=resolve_dtype(args.precision))
    workers = max(1, int(os.environ.get("UNICONV_THREADS", "1")))

    def progress(done, total):
        log.info("ERF samples %d/%d", done, total)

    erf = analysis.compute_erf(model, args.samples, args.input_kind, rng, args.input_size,
                               images=images, workers=workers, progress=progress)
    m = _write_erf(out, erf, args.gamma)
    print(f"ERF over {erf.sample_count} samples: argmax {m.argmax} (center {erf.center}), "
          f"monotonicity violation {m.monotonicity_violation:.4f}, "
          f"sigma {m.gauss_sigma:.3f}, R^2 {m.gauss_r2:.4f}")
    return 0


def cmd_render(args) -> int:
    if not args.grid:
        raise UsageError("render needs --grid (an erf_grid.csv)")
    with open(args.grid, encoding="utf-8") as f:
        rows = list(csv.reader(f))[1:]
    try:
        grid = np.array([[float(v) for v in r] for r in rows], dtype=np.float64)
    except ValueError as e:
        raise UsageError(f"{args.grid}: {e}") from None
    if grid.ndim != 2 or grid.size == 0:
        raise UsageError(f"{args.grid}: no grid rows")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(analysis.render_heatmap(grid, args.gamma), out / "erf.pgm")
    print(f"wrote {out / 'erf.pgm'} ({grid.shape[0]}x{grid.shape[1]}, gamma {args.gamma})")
    return 0


def cmd_rf_support(args) -> int:
    _, rfa_cfg, seed, out = _setup(args)
    checks = rfa_support_checks(rfa_cfg, Rng(seed))
    rows = []
    for c in checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{c.name:<18} theoretical {c.theoretical}x{c.theoretical}  "
              f"empirical {c.box.height}x{c.box.width}  {status}")
        rows.append((c.name, c.theoretical, c.box.height, c.box.width, status))
    _write_csv(out / "rf_support.csv", ["check", "theoretical", "empirical_h", "empirical_w", "status"], rows)
    return 0 if all(c.passed for c in checks) else 1


def cmd_grad_check(args) -> int:
    cfg, _, seed, out = _setup(args)
    rows = []
    cases = grad_check_suite(Rng(seed), cfg)
    for c in cases:
        r = c.report
        status = "PASS" if r.passed else "FAIL"
        print(f"{c.name:<24} max rel err {r.max_rel_err:.3e}  tol {r.tol:.0e}  ({r.checked} entries)  {status}")
        rows.append((c.name, r.max_rel_err, r.tol, r.checked, status))
    _write_csv(out / "grad_check.csv", ["case", "max_rel_err", "tol", "checked", "status"], rows)
    return 0 if all(c.report.passed for c in cases) else 1


def cmd_overfit(args) -> int:
    cfg, _, seed, out = _setup(args)
    model, x, labels = overfit_problem(cfg, Rng(seed), samples=args.samples, classes=args.classes,
                                       size=args.input_size, dtype=resolve_dtype(args.precision))
    _, losses = overfit(model, x, labels, args.steps, args.lr)
    _write_csv(out / "overfit_loss.csv", ["step", "loss"], list(enumerate(losses)))
    final = losses[-1]
    ok = final < args.target
    print(f"loss {losses[0]:.4f} -> {final:.4f} after {args.steps} steps: {'PASS' if ok else 'FAIL'}"
          f" (target < {args.target})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="tiny",
                        help="JSON config path, or a built-in name: tiny, a-like (default tiny)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32")
    common.add_argument("--out", default="out", help="output directory (default ./out)")

    p = argparse.ArgumentParser(prog="uniconvnet", description=__doc__,
                                epilog=CSV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("describe", parents=[common], help="parameter / FLOP breakdown")
    s.add_argument("--input-size", type=int, default=224)
    s.set_defaults(func=cmd_describe)

    s = sub.add_parser("erf", parents=[common], help="effective receptive field + AGD metrics")
    s.add_argument("--samples", type=int, default=256)
    s.add_argument("--input-kind", choices=("random_uniform", "image_dir"), default="random_uniform")
    s.add_argument("--image-dir")
    s.add_argument("--input-size", type=int, default=64)
    s.add_argument("--gamma", type=float, default=0.5)
    s.set_defaults(func=cmd_erf)

    s = sub.add_parser("render", parents=[common], help="re-render an ERF grid CSV as PGM")
    s.add_argument("--grid")
    s.add_argument("--gamma", type=float, default=0.5)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("rf-support", parents=[common], help="theoretical vs empirical RF boxes")
    s.set_defaults(func=cmd_rf_support)

    s = sub.add_parser("grad-check", parents=[common], help="64-bit finite-difference suite")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("overfit", parents=[common], help="toy SGD overfit smoke run")
    s.add_argument("--steps", type=int, default=300)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--samples", type=int, default=16)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--input-size", type=int, default=32)
    s.add_argument("--target", type=float, default=0.1)
    s.set_defaults(func=cmd_overfit)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "gamma", 1.0) <= 0:
        parser.exit(2, "error: --gamma must be positive\n")
    try:
        return args.func(args)
    except INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except analysis.DegenerateInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
