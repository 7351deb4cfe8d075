import numpy as np
import pytest

from lrtm.tensor import KruskalModel, MaskedTensor, reconstruct_full


def random_model(rng, dims, rank, gaussian=True):
    draw = rng.standard_normal if gaussian else rng.random
    return KruskalModel(rng.random(rank) + 0.5, tuple(draw((d, rank)) for d in dims))


def low_rank_problem(seed, dims=(30, 20, 20), rank=5, missing=0.2):
    """Noiseless rank-``rank`` tensor with a uniform random fraction hidden."""
    rng = np.random.default_rng(seed)
    model = KruskalModel(np.ones(rank), tuple(rng.standard_normal((d, rank)) for d in dims))
    truth = reconstruct_full(model)
    hidden = np.zeros(truth.size, dtype=bool)
    hidden[rng.choice(truth.size, int(missing * truth.size), replace=False)] = True
    hidden = hidden.reshape(dims)
    return truth, MaskedTensor(truth, ~hidden), hidden


@pytest.fixture
def rng():
    return np.random.default_rng(20250101)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
