import numpy as np
import pytest

from lrtm.baselines import VariogramModel, experimental_semivariogram
from lrtm.completion import SolverConfig, fit
from lrtm.errors import ValidationError
from lrtm.experiment import stage_synth
from lrtm.ingest import MOL_M2_TO_MOLEC_CM2, tensorize
from lrtm.synth import SynthSpec, gaussian_field, synth_dataset
from lrtm.tensor import MaskedTensor

SMALL = dict(days=40, bbox=(30.0, 34.0, -100.0, -92.0), delta=0.5)


@pytest.fixture(scope="module")
def small():
    spec = SynthSpec(**SMALL, rank=4, noise=0.01, seed=3)
    return spec, synth_dataset(spec)


def test_noiseless_truth_has_rank_three():
    spec = SynthSpec(**SMALL, rank=3, noise=0.0, seed=1)
    _, truth, _ = synth_dataset(spec)
    scaled = MaskedTensor.from_array(truth.values / np.abs(truth.values).max())
    _, trace = fit(scaled, SolverConfig(rank=3, max_sweeps=3000, tol=0.0, seed=5))
    rel = trace.residuals[-1] / np.linalg.norm(scaled.values)
    assert rel <= 1e-8


def test_points_tensorize_back_to_truth(small):
    spec, (points, truth, clouds) = small
    tensor, params = tensorize(points, spec.grid)
    assert tensor.dims == (40, 8, 16)
    assert np.array_equal(tensor.mask, ~clouds)
    back = tensor.values[tensor.mask] * (params.hi - params.lo) + params.lo
    np.testing.assert_allclose(back, truth.values[tensor.mask] * MOL_M2_TO_MOLEC_CM2, rtol=1e-12)


def test_qa_contract(small):
    spec, (points, _, clouds) = small
    assert points.qa.min() >= 0 and points.qa.max() <= 1
    grid = spec.grid
    rows, cols = grid.pixel_of(points.lat, points.lon)
    under_cloud = clouds[points.day, rows, cols]
    assert np.all(points.qa[under_cloud] < 0.5)
    # every clear pixel keeps one good point; extra points draw qa ~ U(0, 1)
    flat = (points.day * grid.n_lat + rows) * grid.n_lon + cols
    first = np.r_[True, flat[1:] != flat[:-1]]
    extra = points.qa[~first & ~under_cloud]
    n = extra.size
    below = np.count_nonzero(extra < 0.5)
    assert abs(below - 0.5 * n) <= 4 * np.sqrt(0.25 * n)


def test_cloud_fraction(small):
    spec, (_, _, clouds) = small
    frac = clouds.mean()
    assert 0.005 < frac < 0.1
    assert (~clouds.reshape(spec.days, -1).any(axis=1)).any()


def test_same_seed_same_files(tmp_path):
    spec = SynthSpec(**SMALL, seed=9)
    a = stage_synth(spec, tmp_path / "a")
    b = stage_synth(spec, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    c = stage_synth(SynthSpec(**SMALL, seed=10), tmp_path / "c")
    assert c[0].read_bytes() != a[0].read_bytes()


def test_spec_from_mapping():
    spec = SynthSpec.from_mapping({"days": "30", "bbox": "30,32,-100,-96", "rank": "2"})
    assert spec.days == 30 and spec.rank == 2
    assert spec.bbox == (30.0, 32.0, -100.0, -96.0)
    assert SynthSpec.from_mapping(spec.as_dict()) == spec
    with pytest.raises(ValidationError):
        SynthSpec.from_mapping({"colour": "blue"})
    with pytest.raises(ValidationError):
        SynthSpec(noise=-1)


def test_gaussian_field_variogram():
    model = VariogramModel(0.0, 1.0, 6.0)
    fields = [gaussian_field((20, 20), model, seed=s) for s in range(8)]
    emp = [experimental_semivariogram(f, 1.0, 3.0) for f in fields]
    gamma = np.mean([e.gamma for e in emp], axis=0)
    np.testing.assert_allclose(gamma, model(emp[0].lags), rtol=0.25)
    assert np.array_equal(gaussian_field((5, 5), model, seed=1), gaussian_field((5, 5), model, seed=1))
