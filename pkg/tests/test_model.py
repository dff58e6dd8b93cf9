import subprocess
import sys

import numpy as np
import pytest

from cpmt.crossmodal import ModalityStream
from cpmt.data import ROLES, PersonStream
from cpmt.errors import ConfigError, DataError
from cpmt.memory import MemoryState
from cpmt.model import CPMT, Ablations, CPMTConfig, count_parameters, pool, preset, segment_bounds
from cpmt.tensor import Tensor

from conftest import random_batch, tiny_config


def test_logits_shape(rng):
    m = CPMT(tiny_config(num_classes=5))
    assert m(random_batch(rng, B=3)).shape == (3, 5)


def test_single_fragment_forward(rng):
    b = random_batch(rng, B=1)
    persons = [PersonStream(f"p{i}", role, [ModalityStream(k, v[0], 1.0) for k, v in p.items()], "g")
               for i, (role, p) in enumerate(zip(ROLES, b.persons))]
    m = CPMT(tiny_config())
    np.testing.assert_allclose(m.forward(persons).data, m(b).data[0], atol=1e-12)
    with pytest.raises(DataError):
        m.forward(persons[:1])


@pytest.mark.parametrize("kw", [
    {}, {"concat_policy": "child_coordinated"}, {"ablations": Ablations(no_individuals=True)},
    {"verbal": True}, {"verbal": True, "ablations": Ablations(no_llm=True)}, {"crossmodal_layers": 0},
    {"modalities": ("video",)},
])
def test_closed_form_parameter_count(kw):
    cfg = tiny_config(**kw)
    assert count_parameters(cfg) == CPMT(cfg).num_parameters()


def test_parameter_count_regression():
    assert count_parameters(tiny_config()) == 7155
    assert count_parameters(CPMTConfig()) == 75251


def test_same_seed_same_logits_across_processes(rng):
    code = (
        "import numpy as np, sys; sys.path.insert(0, 'tests');"
        "from conftest import random_batch, tiny_config; from cpmt.model import CPMT;"
        "b = random_batch(np.random.default_rng(5));"
        "print(CPMT(tiny_config(seed=3))(b).data.tobytes().hex())"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)}
    assert len(outs) == 1
    here = CPMT(tiny_config(seed=3))(random_batch(np.random.default_rng(5))).data.tobytes().hex()
    assert outs == {here + "\n"}


def test_different_seed_different_weights(rng):
    b = random_batch(rng)
    assert np.abs(CPMT(tiny_config(seed=0))(b).data - CPMT(tiny_config(seed=1))(b).data).max() > 1e-6


def test_segment_bounds():
    assert segment_bounds(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    assert segment_bounds(4, 4) == [(0, 1), (1, 2), (2, 3), (3, 4)]
    with pytest.raises(DataError, match="K=5"):
        segment_bounds(4, 5)


def test_pool_example():
    last = Tensor([[1.0, 2.0], [3.0, 4.0]])
    slots = Tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    out = pool([Tensor([[9.0, 9.0]]), last], MemoryState(slots, Tensor(np.ones((3, 2)))))
    np.testing.assert_allclose(out.data, [2.0, 3.0, 1 / 3, 1 / 3])
    with pytest.raises(DataError):
        pool([], MemoryState(slots, slots))


def test_without_memory_early_segments_do_not_reach_logits(rng):
    # segment-local attention and no memory: the last segment's tokens alone set the logits
    m = CPMT(tiny_config(ablations=Ablations(no_memory=True), K_segments=3))
    b = random_batch(rng, T=12)
    base = m(b).data
    for p in b.persons:
        for x in p.values():
            x[:, :8] = rng.normal(size=x[:, :8].shape)
    np.testing.assert_allclose(m(b).data, base, atol=1e-12)


def test_with_memory_early_segments_matter(rng):
    m = CPMT(tiny_config(K_segments=3))
    b = random_batch(rng, T=12)
    base = m(b).data
    b.persons[0]["audio"][:, :4] += 1.0
    assert np.abs(m(b).data - base).max() > 1e-8


def test_trace_records_attention(rng):
    m = CPMT(tiny_config())
    trace = {}
    m.forward_batch(random_batch(rng), trace=trace)
    assert set(trace) >= {"crossmodal", "cpa", "memory_write", "segments", "memory_slots"}
    assert len(trace["memory_write"]) == 2


def test_wrong_person_count(rng):
    b = random_batch(rng)
    b.persons = b.persons[:1]
    with pytest.raises(DataError):
        CPMT(tiny_config())(b)


@pytest.mark.parametrize("kw", [
    {"d_model": 0}, {"num_heads": 3}, {"tau": 0.0}, {"num_classes": 1}, {"dropout_rate": 1.0},
    {"concat_policy": "nope"}, {"dtype": "float16"}, {"cpa_layers": -1},
])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        tiny_config(**kw)


def test_ablation_names():
    assert Ablations.named("none") == Ablations()
    assert Ablations.named("no_memory").no_memory
    with pytest.raises(ConfigError):
        Ablations.named("no_everything")
    with pytest.raises(ConfigError):
        CPMTConfig.from_dict({"bogus": 1})
    assert CPMTConfig.from_dict(tiny_config().to_dict()) == tiny_config()


def test_presets():
    assert preset("dami").concat_policy == "child_coordinated"
    assert preset("boss", k_slots=8).k_slots == 8
    with pytest.raises(ConfigError):
        preset("unknown")
