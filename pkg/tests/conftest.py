import numpy as np
import pytest

from cpmt.model import Batch, CPMTConfig


def random_batch(rng, B=2, T=12, dims=None, labels=None):
    dims = dims or {"audio": 4, "video": 4}
    persons = [{m: rng.normal(size=(B, T, d)) for m, d in dims.items()} for _ in range(2)]
    rates = [{m: 1.0 for m in dims} for _ in range(2)]
    y = np.asarray(labels if labels is not None else rng.integers(0, 3, size=B))
    return Batch(persons, rates, y)


def tiny_config(**kw) -> CPMTConfig:
    base = dict(d_model=8, num_heads=2, K_segments=2, k_slots=4, concat_policy="symmetric",
                modality_dims={"audio": 4, "video": 4}, cpa_layers=1, mem_layers=1, behavior_dim=8,
                dtype="float64")
    base.update(kw)
    return CPMTConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
