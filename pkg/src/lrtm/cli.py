"""Command-line entry point (``lrtm``).

Exit codes: 0 success, 2 validation error, 3 numerical error, 4 infeasible.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .baselines import DEFAULT_NEIGHBORHOOD
from .completion import SolverConfig
from .errors import LRTMError
from .ingest import GridSpec
from .metrics import SCALES
from .synth import SynthSpec

log = logging.getLogger("lrtm")


def _out(args, name):
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def cmd_tensorize(args):
    grid = GridSpec.from_bbox(args.bbox, args.delta, days=args.days)
    tensor, params = ex.stage_tensorize(args.points, grid, _out(args, args.output), args.qa,
                                        norm_path=_out(args, "normalization.json"))
    print(f"tensor {tensor.dims} observed {tensor.observed_fraction:.4f} "
          f"range [{params.lo!r}, {params.hi!r}] molec/cm^2")


def cmd_mask(args):
    seed = 0 if args.seed is None else args.seed
    if args.kind == "random":
        _, delta = ex.stage_mask_random(args.tensor, args.fraction, seed,
                                        _out(args, args.output), _out(args, args.delta_out))
    else:
        _, delta = ex.stage_mask_cptm(args.tensor, args.count, seed,
                                      _out(args, args.output), _out(args, args.delta_out))
    print(f"hid {len(delta)} entries on {len(delta.days())} days")


def cmd_fit(args):
    config = SolverConfig(rank=args.rank, max_sweeps=args.max_sweeps, tol=args.tol,
                          ridge=args.ridge, seed=0 if args.seed is None else args.seed,
                          init=args.init)
    _, trace = ex.stage_fit(args.tensor, config, _out(args, args.output),
                            _out(args, "trace.json"), timings=args.timings)
    print(f"{trace.stop} after {trace.sweeps} sweeps, residual {trace.residuals[-1]:.6e}")


def cmd_fill(args):
    ex.stage_fill(args.tensor, args.model, _out(args, args.output))


def cmd_baseline(args):
    variogram = args.variogram
    if args.method == "krige" and variogram is None:
        variogram = _out(args, "variogram.json")
        model, fit_r = ex.stage_variogram(args.tensor, variogram, cell_size=args.cell_size)
        print(f"variogram nugget {model.nugget:.6g} sill {model.sill:.6g} "
              f"range {model.range_param:.6g} fit_r {fit_r:.4f}")
    output = args.output or f"pred_{args.method}.lrt"
    ex.stage_baseline(args.method, args.tensor, args.delta_file, _out(args, output),
                      variogram_path=variogram, cell_size=args.cell_size,
                      neighborhood=args.neighborhood, power=args.power)


def cmd_evaluate(args):
    pairs = None if args.no_pairs else _out(args, f"pairs_{args.method}.csv")
    report = ex.stage_evaluate(args.pred, args.delta_file, args.method,
                               _out(args, f"report_{args.method}.json"), pairs,
                               scale=args.scale, norm_path=args.norm)
    print(f"{report.method}: n={report.n} r={report.r:.4f} ioa={report.ioa:.4f} mae={report.mae:.6g}")


def cmd_stats(args):
    if args.test == "variogram":
        model, fit_r = ex.stage_variogram(args.tensor, _out(args, "variogram.json"),
                                          cell_size=args.cell_size)
        print(f"nugget {model.nugget:.6g} sill {model.sill:.6g} range {model.range_param:.6g} "
              f"fit_r {fit_r:.4f}")
        return
    record = ex.stage_stats(args.tensor, _out(args, "stats.json"), lags=args.lags,
                            regression=args.regression)
    key = "adf" if args.test == "adf" else "ljung_box"
    res = record[key]
    p = res["p_value"] if res["p_value"] is not None else res["p_bracket"]
    print(f"{key}: statistic {res['statistic']:.4f} p {p} lags {res['lags_used']} "
          f"{res['decisions']}")


def cmd_synth(args):
    spec = SynthSpec(days=args.days, bbox=tuple(GridSpec.from_bbox(args.bbox, 1.0).as_dict()[k]
                                                for k in ("lat_min", "lat_max", "lon_min", "lon_max")),
                     delta=args.delta, rank=args.rank, noise=args.noise,
                     cloud_mean=args.cloud_mean, seed=0 if args.seed is None else args.seed)
    points, truth = ex.stage_synth(spec, args.out_dir or ".")
    print(f"wrote {points} and {truth}")


def cmd_run(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = str(Path(args.out_dir).resolve())
    path = args.manifest
    if path == "desk" and not Path(path).exists():
        path = ex.DATA_DIR / "desk_manifest.json"
        overrides.setdefault("out_dir", str(Path("lrtm-desk-run").resolve()))
    with ex.stage("manifest"):
        manifest = ex.ExperimentManifest.load(path, overrides)
    summary = ex.run_manifest(manifest)
    for name in ex.EXPERIMENTS:
        for method, rep in summary.get(name, {}).items():
            print(f"{name:6s} {method:5s} n={rep['n']:6d} r={rep['r']:.4f} ioa={rep['ioa']:.4f} "
                  f"per_day_r={rep['per_day_r']:.4f}")
    print(f"outputs in {manifest.out_dir}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out-dir", default=None,
                        help="directory for outputs (default: current directory)")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="lrtm", description="Low-rank tensor completion "
                                     "of daily gridded satellite columns, with spatial baselines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tensorize", parents=[common], help="point CSV -> LRT1 tensor")
    p.add_argument("--points", required=True)
    p.add_argument("--bbox", required=True, help="lat_min,lat_max,lon_min,lon_max")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--days", type=int, default=None)
    p.add_argument("--qa", type=float, default=0.5, help="keep points with qa strictly above")
    p.add_argument("--output", default="tensor.lrt")
    p.set_defaults(func=cmd_tensorize)

    p = sub.add_parser("mask", parents=[common], help="inject gaps with recorded truth")
    p.add_argument("kind", choices=["random", "cptm"])
    p.add_argument("--tensor", required=True)
    p.add_argument("--fraction", type=float, default=0.03)
    p.add_argument("--count", type=int, default=300)
    p.add_argument("--output", default="masked.lrt")
    p.add_argument("--delta-out", default="holes.csv")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("fit", parents=[common], help="masked CP-ALS fit")
    p.add_argument("--tensor", required=True)
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--max-sweeps", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--ridge", type=float, default=1e-10)
    p.add_argument("--init", default="random-gaussian",
                   choices=["random-gaussian", "random-uniform", "svd"])
    p.add_argument("--timings", action="store_true", help="record wall-clock times in the trace")
    p.add_argument("--output", default="model.lrk")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fill", parents=[common], help="impute missing entries from a model")
    p.add_argument("--tensor", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--output", default="pred_lrtm.lrt")
    p.set_defaults(func=cmd_fill)

    p = sub.add_parser("baseline", parents=[common], help="spatial per-day gap filling")
    p.add_argument("method", choices=["krige", "idw", "mean"])
    p.add_argument("--tensor", required=True)
    p.add_argument("--delta-file", default=None, help="fill only these entries (default: all missing)")
    p.add_argument("--variogram", default=None, help="fitted variogram JSON (default: fit one)")
    p.add_argument("--neighborhood", type=int, default=DEFAULT_NEIGHBORHOOD)
    p.add_argument("--power", type=float, default=2.0)
    p.add_argument("--cell-size", type=float, default=1.0, help="pixel size in degrees")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions on held-out entries")
    p.add_argument("--pred", required=True)
    p.add_argument("--delta-file", required=True)
    p.add_argument("--method", default="lrtm")
    p.add_argument("--scale", choices=SCALES, default="normalized")
    p.add_argument("--norm", default=None, help="normalization.json, needed for molec_cm2")
    p.add_argument("--no-pairs", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", parents=[common], help="ADF / Ljung-Box / variogram diagnostics")
    p.add_argument("test", choices=["adf", "lb", "variogram"])
    p.add_argument("--tensor", required=True)
    p.add_argument("--lags", type=int, default=20)
    p.add_argument("--regression", default="constant", choices=["constant", "constant+trend"])
    p.add_argument("--cell-size", type=float, default=1.0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic point CSV and truth tensor")
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--bbox", default="32,40,-110,-94")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--rank", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--cloud-mean", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="manifest-driven end-to-end experiment")
    p.add_argument("manifest", help="JSON or key=value manifest; 'desk' runs the bundled one")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LRTMError as exc:
        where = getattr(exc, "stage", None) or args.command
        print(f"lrtm {where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"lrtm {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
