import csv
import json

import numpy as np
import pytest

from lrtm import io
from lrtm.errors import InfeasibleError, LRTMError, ValidationError
from lrtm.experiment import (
    DATA_DIR,
    ExperimentManifest,
    run_cptm_experiment,
    run_manifest,
    stage_baseline,
    stage_evaluate,
    stage_mask_random,
)
from lrtm.ingest import MOL_M2_TO_MOLEC_CM2
from lrtm.masking import MaskDelta, read_delta, write_delta
from lrtm.tensor import MaskedTensor

SMALL = {
    "seed": 1,
    "synth": {"days": 60, "bbox": "30,34,-100,-92", "delta": 0.5, "rank": 4, "noise": 0.01},
    "solver": {"rank": 5, "max_sweeps": 60},
    "random": {"fraction": 0.03},
    "cptm": {"count": 20},
}


def _write_manifest(path, extra=None):
    raw = dict(SMALL, **(extra or {}))
    path.write_text(json.dumps(raw))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    manifest = ExperimentManifest.load(_write_manifest(root / "m.json"))
    return manifest, run_manifest(manifest)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_manifest_defaults_and_seeds(tmp_path):
    m = ExperimentManifest.load(_write_manifest(tmp_path / "m.json"))
    assert m.solver.seed == 1
    assert m.random == {"fraction": 0.03, "seed": 2}
    assert m.cptm == {"count": 20, "seed": 3}
    assert m.synth.seed == 4
    assert m.grid.dims == (60, 8, 16)
    assert m.out_dir == tmp_path / "out"
    assert m.as_dict()["solver"]["rank"] == 5


def test_manifest_key_value_matches_json(tmp_path):
    kv = tmp_path / "m.txt"
    kv.write_text("\n".join([
        "# flat manifest", "seed=1", "synth.days=60", "synth.bbox=30,34,-100,-92", "synth.delta=0.5",
        "synth.rank=4", "synth.noise=0.01", "solver.rank=5", "solver.max_sweeps=60",
        "random.fraction=0.03", "cptm.count=20", "baselines=krige,idw,mean"]))
    a = ExperimentManifest.load(kv).as_dict()
    b = ExperimentManifest.load(_write_manifest(tmp_path / "m.json")).as_dict()
    assert a == b


@pytest.mark.parametrize("extra,match", [
    ({"random": {"fraction": 0}}, "fraction"),
    ({"cptm": {"count": 0}}, "count"),
    ({"baselines": ["spline"]}, "baselines"),
    ({"scale": "ppb"}, "scale"),
    ({"points": "missing.csv"}, "exactly one"),
    ({"colour": 1}, "unknown"),
])
def test_manifest_validation(tmp_path, extra, match):
    with pytest.raises(ValidationError, match=match):
        ExperimentManifest.load(_write_manifest(tmp_path / "m.json", extra))


def test_manifest_points_must_exist(tmp_path):
    raw = {k: v for k, v in SMALL.items() if k != "synth"}
    raw.update(points="nope.csv", grid={"bbox": "30,34,-100,-92"})
    (tmp_path / "m.json").write_text(json.dumps(raw))
    with pytest.raises(ValidationError, match="not found"):
        ExperimentManifest.load(tmp_path / "m.json")


def test_bundled_manifest_loads():
    m = ExperimentManifest.load(DATA_DIR / "desk_manifest.json")
    assert m.grid.dims == (365, 16, 32)
    assert m.random["fraction"] == 0.03 and m.cptm["count"] == 300


def test_run_outputs(small_run):
    manifest, summary = small_run
    out = manifest.out_dir
    for name in ("random", "cptm"):
        assert set(summary[name]) == {"lrtm", "krige", "idw", "mean"}
        for method in summary[name]:
            assert (out / name / f"report_{method}.json").exists()
    assert "adf" in summary["stats"]
    assert summary["random"]["lrtm"]["ioa"] > summary["random"]["mean"]["ioa"]
    assert summary["random"]["lrtm"]["n"] == int(0.03 * 60 * 8 * 16)


def test_cptm_per_day_rows(small_run):
    manifest, _ = small_run
    with open(manifest.out_dir / "cptm" / "per_day.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    assert list(rows[0]) == ["day", "observed", "lrtm", "krige", "idw", "mean"]
    delta = read_delta(manifest.out_dir / "cptm" / "holes.csv")
    assert sorted(int(r["day"]) for r in rows) == delta.days().tolist()


@pytest.mark.parametrize("method", ["lrtm", "krige", "idw", "mean"])
def test_pair_dump_accounts_for_every_entry(small_run, method):
    manifest, _ = small_run
    delta = read_delta(manifest.out_dir / "cptm" / "holes.csv")
    with open(manifest.out_dir / "cptm" / f"pairs_{method}.csv") as fh:
        assert fh.readline().startswith("# provenance: cptm pairs=")
        rows = list(csv.DictReader(fh))
    keys = [(int(r["i1"]), int(r["i2"]), int(r["i3"])) for r in rows]
    assert len(keys) == len(set(keys)) == len(delta)
    assert set(keys) == {tuple(e) for e in delta.entries.tolist()}


def test_replay_is_byte_identical(small_run, tmp_path):
    manifest, _ = small_run
    again = ExperimentManifest.load(_write_manifest(tmp_path / "m.json"))
    run_manifest(again)
    a, b = _tree_bytes(manifest.out_dir), _tree_bytes(again.out_dir)
    a.pop("manifest.resolved.json")
    b.pop("manifest.resolved.json")
    assert a == b


def test_baseline_never_reads_truth(small_run, tmp_path):
    manifest, _ = small_run
    work = manifest.out_dir / "random"
    delta = read_delta(work / "holes.csv")
    fake = MaskDelta(delta.entries, np.full(len(delta), 1e9), delta.provenance)
    write_delta(tmp_path / "fake.csv", fake)
    for method in ("krige", "idw", "mean"):
        kwargs = {"variogram_path": work / "variogram.json"} if method == "krige" else {}
        stage_baseline(method, work / "masked.lrt", tmp_path / "fake.csv", tmp_path / "p.lrt",
                       cell_size=0.5, **kwargs)
        assert (tmp_path / "p.lrt").read_bytes() == (work / f"pred_{method}.lrt").read_bytes()


def test_evaluate_in_physical_units(small_run, tmp_path):
    manifest, summary = small_run
    work = manifest.out_dir / "random"
    rep = stage_evaluate(work / "pred_lrtm.lrt", work / "holes.csv", "lrtm", tmp_path / "r.json",
                         scale="molec_cm2", norm_path=manifest.out_dir / "normalization.json")
    norm = io.read_json(manifest.out_dir / "normalization.json")
    assert rep.r == pytest.approx(summary["random"]["lrtm"]["r"], rel=1e-9)
    assert rep.ioa == pytest.approx(summary["random"]["lrtm"]["ioa"], rel=1e-9)
    assert rep.mae == pytest.approx(summary["random"]["lrtm"]["mae"] * (norm["hi"] - norm["lo"]), rel=1e-9)
    truth = io.read_tensor(manifest.out_dir / "synth" / "truth.lrt")
    delta = read_delta(work / "holes.csv")
    phys = delta.truth * (norm["hi"] - norm["lo"]) + norm["lo"]
    np.testing.assert_allclose(phys, truth.values[delta.index] * MOL_M2_TO_MOLEC_CM2, rtol=1e-12)
    with pytest.raises(ValidationError):
        stage_evaluate(work / "pred_lrtm.lrt", work / "holes.csv", "lrtm", tmp_path / "r.json",
                       scale="molec_cm2")


def test_errors_carry_stage_name(tmp_path):
    io.write_tensor(tmp_path / "t.lrt", MaskedTensor.from_array(np.ones((2, 2, 2))))
    with pytest.raises(LRTMError) as info:
        stage_mask_random(tmp_path / "t.lrt", 0.0, 1, tmp_path / "m.lrt", tmp_path / "d.csv")
    assert info.value.stage == "mask"


def test_cptm_infeasible_surfaces(tmp_path):
    m = ExperimentManifest.load(_write_manifest(tmp_path / "m.json", {"cptm": {"count": 500}}))
    with pytest.raises(InfeasibleError) as info:
        run_cptm_experiment(m)
    assert info.value.stage == "mask"
