import json
import subprocess
import sys

import numpy as np
import pytest

from lrtm import io
from lrtm.cli import build_parser, main
from lrtm.experiment import DATA_DIR
from lrtm.tensor import MaskedTensor

DEMO_BBOX = "30,32,-100,-97"


@pytest.fixture
def demo_tensor(tmp_path):
    code = main(["tensorize", "--points", str(DATA_DIR / "demo_points.csv"), "--bbox", DEMO_BBOX,
                 "--delta", "1", "--days", "3", "--out-dir", str(tmp_path)])
    assert code == 0
    return tmp_path / "tensor.lrt"


def test_every_subcommand_has_common_flags():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"tensorize", "mask", "fit", "fill", "baseline", "evaluate",
                                "stats", "synth", "run"}
    for name, p in sub.choices.items():
        flags = {o for a in p._actions for o in a.option_strings}
        assert {"--seed", "--out-dir", "--log-level"} <= flags, name


def test_tensorize_golden_bytes(demo_tensor):
    assert demo_tensor.read_bytes() == (DATA_DIR / "demo_tensor.lrt").read_bytes()


def test_golden_tensor_matches_hand_rasterization():
    # plain-Python constrained nearest neighbour on a 2 x 3 grid of 1 degree pixels
    with open(DATA_DIR / "demo_points.csv") as fh:
        rows = [line.strip().split(",") for line in fh.readlines()[1:]]
    best = {}
    for day, lat, lon, value, qa in rows:
        lat, lon, qa = float(lat), float(lon), float(qa)
        if qa <= 0.5 or not (30 <= lat <= 32 and -100 <= lon <= -97):
            continue
        r, c = min(int((32 - lat) // 1), 1), min(int((lon + 100) // 1), 2)
        d2 = (lat - (31.5 - r)) ** 2 + (lon - (-99.5 + c)) ** 2
        key = (int(day), r, c)
        if key not in best or d2 < best[key][0]:
            best[key] = (d2, float(value) * 6.02214e19)
    expected = np.full((3, 2, 3), np.nan)
    for key, (_, v) in best.items():
        expected[key] = v
    lo, hi = np.nanmin(expected), np.nanmax(expected)
    golden = io.read_tensor(DATA_DIR / "demo_tensor.lrt")
    np.testing.assert_array_equal(np.isnan(golden.values), np.isnan(expected))
    np.testing.assert_allclose(golden.values, (expected - lo) / (hi - lo), rtol=0, atol=1e-14)


def test_staged_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    assert main(["synth", "--days", "40", "--bbox", "30,34,-100,-92", "--rank", "3",
                 "--seed", "2", "--out-dir", out]) == 0
    assert main(["tensorize", "--points", f"{out}/points.csv", "--bbox", "30,34,-100,-92",
                 "--days", "40", "--out-dir", out]) == 0
    assert main(["mask", "random", "--tensor", f"{out}/tensor.lrt", "--fraction", "0.05",
                 "--seed", "3", "--out-dir", out]) == 0
    assert main(["fit", "--tensor", f"{out}/masked.lrt", "--rank", "4", "--max-sweeps", "40",
                 "--out-dir", out]) == 0
    assert main(["fill", "--tensor", f"{out}/masked.lrt", "--model", f"{out}/model.lrk",
                 "--out-dir", out]) == 0
    for method in ("krige", "idw", "mean"):
        assert main(["baseline", method, "--tensor", f"{out}/masked.lrt", "--delta-file",
                     f"{out}/holes.csv", "--cell-size", "0.5", "--out-dir", out]) == 0
    for method in ("lrtm", "krige", "idw", "mean"):
        assert main(["evaluate", "--pred", f"{out}/pred_{method}.lrt", "--delta-file",
                     f"{out}/holes.csv", "--method", method, "--out-dir", out]) == 0
    reports = {m: io.read_json(tmp_path / f"report_{m}.json") for m in ("lrtm", "krige", "mean")}
    assert reports["lrtm"]["ioa"] > reports["krige"]["ioa"] > reports["mean"]["ioa"]
    variogram = io.read_json(tmp_path / "variogram.json")
    assert set(variogram) >= {"kind", "nugget", "sill", "range", "fit_r"}
    for test in ("adf", "lb", "variogram"):
        assert main(["stats", test, "--tensor", f"{out}/tensor.lrt", "--out-dir", out]) == 0
    text = capsys.readouterr().out
    assert "adf: statistic" in text and "ljung_box: statistic" in text
    trace = io.read_json(tmp_path / "trace.json")
    assert "times" not in trace


def test_fit_trace_timings_opt_in(demo_tensor, tmp_path):
    assert main(["fit", "--tensor", str(demo_tensor), "--rank", "1", "--ridge", "1e-6",
                 "--timings", "--out-dir", str(tmp_path)]) == 0
    assert "times" in io.read_json(tmp_path / "trace.json")


def test_exit_codes(tmp_path, demo_tensor, capsys):
    io.write_tensor(tmp_path / "t.lrt", MaskedTensor.from_array(np.arange(8.0).reshape(2, 2, 2)))
    out = ["--out-dir", str(tmp_path)]
    # validation
    assert main(["tensorize", "--points", "x.csv", "--bbox", "1,2,3"] + out) == 2
    assert main(["mask", "random", "--tensor", str(demo_tensor), "--fraction", "0"] + out) == 2
    assert main(["fill", "--tensor", str(tmp_path / "missing.lrt"), "--model", "m.lrk"] + out) == 2
    # numerical: rank 5 without ridge on a 2x2x2 tensor
    assert main(["fit", "--tensor", str(tmp_path / "t.lrt"), "--rank", "5", "--ridge", "0"] + out) == 3
    # infeasible: a fully observed tensor has no cloud to transfer
    assert main(["mask", "cptm", "--tensor", str(tmp_path / "t.lrt"), "--count", "2"] + out) == 4
    err = capsys.readouterr().err
    assert "lrtm mask: InfeasibleError" in err
    assert "lrtm fit: RankDeficiencyError" in err


def test_run_manifest_replay(tmp_path):
    manifest = {
        "synth": {"days": 50, "bbox": "30,34,-100,-92", "rank": 3, "seed": 5},
        "solver": {"rank": 4, "max_sweeps": 40},
        "random": {"fraction": 0.02, "seed": 1},
        "baselines": "mean",
        "out_dir": "first",
    }
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    assert main(["run", str(tmp_path / "m.json")]) == 0
    assert main(["run", str(tmp_path / "m.json"), "--out-dir", str(tmp_path / "second")]) == 0
    for name in ("summary.json", "random/report_lrtm.json", "random/pairs_mean.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
    assert main(["run", str(tmp_path / "nope.json")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lrtm.cli", "stats", "adf", "--tensor",
                           str(tmp_path / "missing.lrt")], capture_output=True, text=True)
    assert proc.returncode == 2
