"""File-mediated experiment stages and the manifest-driven runner.

Each stage reads its inputs from disk and writes its outputs to disk, so a
pipeline can be stopped and resumed anywhere; the CLI subcommands are thin
wrappers around these functions.  Held-out truths only ever travel inside
mask-delta files, and only :func:`stage_evaluate` reads them.

Run layout under ``out_dir``::

    manifest.resolved.json   synth/points.csv  synth/truth.lrt
    tensor.lrt  normalization.json  stats.json
    random/ and cptm/: masked.lrt holes.csv model.lrk trace.json variogram.json
                       pred_<method>.lrt report_<method>.json pairs_<method>.csv
                       per_day.csv
    summary.json
"""

from __future__ import annotations

import contextlib
import copy
import json
import logging
from pathlib import Path

import numpy as np

from . import baselines, io, masking, stats
from .completion import SolverConfig, fit, impute
from .errors import LRTMError, ValidationError
from .ingest import GridSpec, NormalizationParams, denormalize, read_points, tensorize, write_points
from .metrics import SCALES, EvaluationReport, pair_rows
from .synth import SynthSpec, synth_dataset

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"

METHODS = ("lrtm", "krige", "idw", "mean")
EXPERIMENTS = ("random", "cptm")

DEFAULTS = {
    "seed": 0,
    "points": None,
    "synth": None,
    "grid": {"bbox": None, "delta": 0.5, "days": None},
    "qa_threshold": 0.5,
    "solver": {"rank": 8, "max_sweeps": 100, "tol": 1e-6, "ridge": 1e-10},
    "random": None,
    "cptm": None,
    "baselines": ["krige", "idw", "mean"],
    "kriging": {"neighborhood": baselines.DEFAULT_NEIGHBORHOOD, "lag_width": None, "max_lag": None},
    "idw": {"power": 2.0, "neighborhood": baselines.DEFAULT_NEIGHBORHOOD},
    "scale": "normalized",
    "out_dir": "out",
}


@contextlib.contextmanager
def stage(name):
    """Tag any package error escaping the block with the stage name."""
    try:
        yield
    except LRTMError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise


# -- manifest -----------------------------------------------------------------

def _nest(flat):
    """``{"a.b": v}`` -> ``{"a": {"b": v}}`` for key=value manifests."""
    out = {}
    for key, value in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _coerce_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


class ExperimentManifest:
    """Validated experiment description.

    Relative paths resolve against ``base_dir`` (the manifest's directory).
    Seeds left unset derive from the top-level ``seed``: solver ``seed``,
    random masking ``seed + 1``, CPTM ``seed + 2``, synthesis ``seed + 3``.
    """

    def __init__(self, raw, base_dir="."):
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown manifest keys: {sorted(unknown)}")
        self.base_dir = Path(base_dir)
        cfg = _merge(DEFAULTS, raw)
        try:
            self.seed = int(cfg["seed"])
        except (TypeError, ValueError):
            raise ValidationError(f"bad seed {cfg['seed']!r}") from None

        self.synth = None
        if cfg["synth"] is not None:
            synth = dict(cfg["synth"])
            synth.setdefault("seed", self.seed + 3)
            self.synth = SynthSpec.from_mapping(synth)
        self.points = None if cfg["points"] in (None, "") else self._path(cfg["points"])
        if (self.points is None) == (self.synth is None):
            raise ValidationError("manifest needs exactly one of 'points' or 'synth'")
        if self.points is not None and not self.points.exists():
            raise ValidationError(f"points file not found: {self.points}")

        grid = dict(cfg["grid"])
        if grid.get("bbox") is None and self.synth is not None:
            grid["bbox"] = list(self.synth.bbox)
            grid["delta"] = self.synth.delta
            grid["days"] = self.synth.days if grid.get("days") is None else grid["days"]
        if grid.get("bbox") is None:
            raise ValidationError("manifest needs grid.bbox")
        days = grid.get("days")
        self.grid = GridSpec.from_bbox(grid["bbox"], float(grid["delta"]),
                                       days=None if days in (None, "") else int(days))
        self.qa_threshold = float(cfg["qa_threshold"])
        if not 0 <= self.qa_threshold <= 1:
            raise ValidationError("qa_threshold must lie in [0, 1]")

        solver = dict(cfg["solver"])
        solver.setdefault("seed", self.seed)
        self.solver = SolverConfig.from_mapping(solver)

        self.random = None
        if cfg["random"] is not None:
            spec = dict(cfg["random"])
            fraction = float(spec.get("fraction", 0.0))
            if not 0 < fraction < 1:
                raise ValidationError(f"random.fraction must lie in (0, 1), got {fraction}")
            self.random = {"fraction": fraction, "seed": int(spec.get("seed", self.seed + 1))}
        self.cptm = None
        if cfg["cptm"] is not None:
            spec = dict(cfg["cptm"])
            count = int(spec.get("count", 0))
            if count < 1:
                raise ValidationError(f"cptm.count must be >= 1, got {count}")
            self.cptm = {"count": count, "seed": int(spec.get("seed", self.seed + 2))}
        if self.random is None and self.cptm is None:
            raise ValidationError("manifest enables neither a 'random' nor a 'cptm' experiment")

        self.baselines = _coerce_list(cfg["baselines"])
        bad = set(self.baselines) - set(METHODS[1:])
        if bad:
            raise ValidationError(f"unknown baselines: {sorted(bad)}")
        self.kriging = {
            "neighborhood": int(cfg["kriging"]["neighborhood"]),
            "lag_width": _opt_float(cfg["kriging"].get("lag_width")),
            "max_lag": _opt_float(cfg["kriging"].get("max_lag")),
        }
        self.idw = {"power": float(cfg["idw"]["power"]),
                    "neighborhood": int(cfg["idw"]["neighborhood"])}
        if cfg["scale"] not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}")
        self.scale = cfg["scale"]
        self.out_dir = self._path(cfg["out_dir"])

    def _path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @classmethod
    def load(cls, path, overrides=None):
        """Read a JSON (``.json``) or flat key=value manifest."""
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"manifest not found: {path}")
        if path.suffix == ".json":
            try:
                raw = io.read_json(path)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        else:
            raw = _nest(io.read_key_value(path))
        return cls(_merge(raw, overrides or {}), base_dir=path.parent)

    def as_dict(self):
        """Fully resolved manifest (all seeds explicit), for the run record."""
        return {
            "seed": self.seed,
            "points": None if self.points is None else str(self.points),
            "synth": None if self.synth is None else self.synth.as_dict(),
            "grid": self.grid.as_dict(),
            "qa_threshold": self.qa_threshold,
            "solver": self.solver.as_dict(),
            "random": self.random,
            "cptm": self.cptm,
            "baselines": list(self.baselines),
            "kriging": self.kriging,
            "idw": self.idw,
            "scale": self.scale,
        }


def _opt_float(v):
    return None if v in (None, "") else float(v)


# -- stages -------------------------------------------------------------------

def stage_synth(spec, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with stage("synth"):
        points, truth, _ = synth_dataset(spec)
        write_points(out_dir / "points.csv", points)
        io.write_tensor(out_dir / "truth.lrt", truth)
        io.write_json(out_dir / "synth.json", spec.as_dict())
    return out_dir / "points.csv", out_dir / "truth.lrt"


def stage_tensorize(points_path, grid, out_path, qa_threshold=0.5, norm_path=None):
    with stage("tensorize"):
        tensor, params = tensorize(read_points(points_path), grid, qa_threshold)
        io.write_tensor(out_path, tensor)
        if norm_path is not None:
            io.write_json(norm_path, {"lo": params.lo, "hi": params.hi, "grid": grid.as_dict(),
                                      "qa_threshold": qa_threshold, "units": "molec_cm2"})
    return tensor, params


def stage_mask_random(tensor_path, fraction, seed, out_tensor, out_delta):
    with stage("mask"):
        masked, delta = masking.add_random_missing(io.read_tensor(tensor_path), fraction, seed)
        io.write_tensor(out_tensor, masked)
        masking.write_delta(out_delta, delta)
    return masked, delta


def stage_mask_cptm(tensor_path, count, seed, out_tensor, out_delta):
    with stage("mask"):
        tensor = io.read_tensor(tensor_path)
        pairs = masking.select_cptm_pairs(tensor, count, seed)
        masked, deltas = masking.apply_cptm_pairs(tensor, pairs)
        delta = masking.MaskDelta.concat(deltas, masking.cptm_provenance(pairs))
        io.write_tensor(out_tensor, masked)
        masking.write_delta(out_delta, delta)
    return masked, delta


def stage_fit(tensor_path, config, out_model, out_trace, timings=False):
    with stage("fit"):
        tensor = io.read_tensor(tensor_path)
        model, trace = fit(tensor, config)
        io.write_model(out_model, model)
        record = trace.as_dict(timings=timings)
        record["config"] = config.as_dict()
        io.write_json(out_trace, record)
    return model, trace


def stage_fill(tensor_path, model_path, out_path):
    with stage("fill"):
        tensor = io.read_tensor(tensor_path)
        filled = impute(tensor, io.read_model(model_path))
        io.write_tensor(out_path, tensor.replace(values=filled, mask=np.ones(tensor.dims, dtype=bool)))
    return filled


def default_lags(grid_shape, cell_size):
    """Lag bins one pixel wide out to half the shorter grid side."""
    return cell_size, cell_size * max(3, min(grid_shape) // 2)


def stage_variogram(tensor_path, out_path, cell_size=1.0, lag_width=None, max_lag=None):
    """Fit the exponential model to the temporal average of the (masked) tensor."""
    with stage("variogram"):
        tensor = io.read_tensor(tensor_path)
        lw, ml = default_lags(tensor.dims[1:], cell_size)
        lag_width = lw if lag_width is None else lag_width
        max_lag = ml if max_lag is None else max_lag
        emp = baselines.experimental_semivariogram(baselines.temporal_average(tensor), lag_width,
                                                   max_lag, cell_size=cell_size)
        model, fit_r = baselines.fit_exponential(emp)
        record = dict(model.as_dict(), fit_r=fit_r, cell_size=cell_size,
                      empirical={"lags": emp.lags.tolist(), "gamma": emp.gamma.tolist(),
                                 "counts": emp.counts.tolist()})
        io.write_json(out_path, record)
    return model, fit_r


def stage_baseline(method, tensor_path, delta_path, out_path, variogram_path=None,
                   cell_size=1.0, neighborhood=baselines.DEFAULT_NEIGHBORHOOD, power=2.0):
    """Fill the delta's hidden entries with a spatial baseline.

    Only the delta's indices are read; its truth column is never touched.
    """
    with stage(f"baseline {method}"):
        tensor = io.read_tensor(tensor_path)
        targets = masking.read_delta_indices(delta_path) if delta_path is not None else None
        kwargs = {}
        if method == "krige":
            if variogram_path is None:
                raise ValidationError("kriging needs a fitted variogram")
            record = io.read_json(variogram_path)
            kwargs = {"model": baselines.VariogramModel.from_dict(record),
                      "neighborhood": neighborhood,
                      "cell_size": float(record.get("cell_size", cell_size))}
        elif method == "idw":
            kwargs = {"power": power, "neighborhood": neighborhood, "cell_size": cell_size}
        pred = baselines.fill_tensor(tensor, method, targets=targets, **kwargs)
        io.write_tensor(out_path, tensor.replace(values=pred, mask=np.isfinite(pred)))
    return pred


def stage_evaluate(pred_path, delta_path, method, out_report, out_pairs=None,
                   scale="normalized", norm_path=None):
    with stage("evaluate"):
        pred = io.read_tensor(pred_path).values
        delta = masking.read_delta(delta_path)
        if scale == "molec_cm2":
            if norm_path is None:
                raise ValidationError("molec_cm2 scale needs the normalization file")
            norm = io.read_json(norm_path)
            params = NormalizationParams(norm["lo"], norm["hi"])
            pred = denormalize(pred, params)
            delta = masking.MaskDelta(delta.entries, denormalize(delta.truth, params), delta.provenance)
        elif scale not in SCALES:
            raise ValidationError(f"scale must be one of {SCALES}")
        report = EvaluationReport.from_delta(method, pred, delta, scale=scale)
        io.write_json(out_report, report.as_dict())
        if out_pairs is not None:
            io.write_rows(out_pairs, ["i1", "i2", "i3", "prediction", "truth"],
                          pair_rows(pred, delta), preamble=f"# provenance: {delta.provenance}")
    return report


def stage_stats(tensor_path, out_path, lags=20, regression="constant"):
    with stage("stats"):
        series = stats.spatial_mean_series(io.read_tensor(tensor_path))
        record = {"adf": stats.adf_test(series.values, regression=regression).as_dict(),
                  "ljung_box": stats.ljung_box_test(series.values, lags=lags).as_dict(),
                  "days": int(series.values.size),
                  "days_without_data": int(np.sum(series.valid_counts == 0))}
        io.write_json(out_path, record)
    return record


def per_day_table(reports, path):
    """Per-day spatial means of the hidden entries, one row per masked day."""
    methods = list(reports)
    first = reports[methods[0]].per_day
    rows = []
    for k, (day, _, truth_mean) in enumerate(first):
        rows.append([day, truth_mean] + [reports[m].per_day[k][1] for m in methods])
    io.write_rows(path, ["day", "observed"] + methods, rows)
    return rows


# -- experiments ---------------------------------------------------------------

def prepare(manifest):
    """Synthesize (when asked) and tensorize; returns the tensor path."""
    out = manifest.out_dir
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "manifest.resolved.json", manifest.as_dict())
    points = manifest.points
    if manifest.synth is not None:
        points, _ = stage_synth(manifest.synth, out / "synth")
    tensor_path = out / "tensor.lrt"
    stage_tensorize(points, manifest.grid, tensor_path, manifest.qa_threshold,
                    norm_path=out / "normalization.json")
    return tensor_path


def _run_methods(manifest, work, masked_path, delta_path):
    cell = manifest.grid.delta
    stage_fit(masked_path, manifest.solver, work / "model.lrk", work / "trace.json")
    stage_fill(masked_path, work / "model.lrk", work / "pred_lrtm.lrt")
    if "krige" in manifest.baselines:
        stage_variogram(masked_path, work / "variogram.json", cell_size=cell,
                        lag_width=manifest.kriging["lag_width"], max_lag=manifest.kriging["max_lag"])
    for method in manifest.baselines:
        kwargs = {"cell_size": cell}
        if method == "krige":
            kwargs.update(variogram_path=work / "variogram.json",
                          neighborhood=manifest.kriging["neighborhood"])
        elif method == "idw":
            kwargs.update(neighborhood=manifest.idw["neighborhood"], power=manifest.idw["power"])
        stage_baseline(method, masked_path, delta_path, work / f"pred_{method}.lrt", **kwargs)
    reports = {}
    for method in ("lrtm", *manifest.baselines):
        reports[method] = stage_evaluate(
            work / f"pred_{method}.lrt", delta_path, method, work / f"report_{method}.json",
            work / f"pairs_{method}.csv", scale=manifest.scale,
            norm_path=manifest.out_dir / "normalization.json")
    per_day_table(reports, work / "per_day.csv")
    return reports


def run_added_random_experiment(manifest, tensor_path=None):
    """Hide a random fraction, fit, fill with every method, evaluate."""
    if manifest.random is None:
        raise ValidationError("manifest has no 'random' block")
    tensor_path = prepare(manifest) if tensor_path is None else tensor_path
    work = manifest.out_dir / "random"
    work.mkdir(parents=True, exist_ok=True)
    stage_mask_random(tensor_path, manifest.random["fraction"], manifest.random["seed"],
                      work / "masked.lrt", work / "holes.csv")
    return _run_methods(manifest, work, work / "masked.lrt", work / "holes.csv")


def run_cptm_experiment(manifest, tensor_path=None):
    """Transfer real cloud patterns onto other days, fit, fill, evaluate."""
    if manifest.cptm is None:
        raise ValidationError("manifest has no 'cptm' block")
    tensor_path = prepare(manifest) if tensor_path is None else tensor_path
    work = manifest.out_dir / "cptm"
    work.mkdir(parents=True, exist_ok=True)
    stage_mask_cptm(tensor_path, manifest.cptm["count"], manifest.cptm["seed"],
                    work / "masked.lrt", work / "holes.csv")
    return _run_methods(manifest, work, work / "masked.lrt", work / "holes.csv")


def _summary(reports):
    return {m: {k: v for k, v in r.as_dict().items() if k != "per_day"} for m, r in reports.items()}


def run_manifest(manifest):
    """Every enabled experiment plus the temporal diagnostics; returns the summary."""
    tensor_path = prepare(manifest)
    summary = {"stats": stage_stats(tensor_path, manifest.out_dir / "stats.json")}
    if manifest.random is not None:
        summary["random"] = _summary(run_added_random_experiment(manifest, tensor_path))
    if manifest.cptm is not None:
        summary["cptm"] = _summary(run_cptm_experiment(manifest, tensor_path))
    io.write_json(manifest.out_dir / "summary.json", summary)
    return summary
