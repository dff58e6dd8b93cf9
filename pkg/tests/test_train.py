import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpmt.data import FragmentStore, Split, group_split
from cpmt.errors import ConfigError, DataError, FormatError, NumericError
from cpmt.gradcheck import grad_check
from cpmt.metrics import dyad_average, metrics, paired_bootstrap, summary_rows
from cpmt.model import CPMT
from cpmt.synth import SynthSpec, synth_generate
from cpmt.tensor import Tensor
from cpmt.tensorio import write_tensor
from cpmt.train import TrainConfig, evaluate, focal_loss, load_checkpoint, save_checkpoint, train

from conftest import tiny_config


# -- focal loss ----------------------------------------------------------------------------

def test_focal_examples():
    assert focal_loss(Tensor([0.0, 0.0]), 0, 0.0).item() == pytest.approx(math.log(2), abs=1e-12)
    assert focal_loss(Tensor([50.0, -50.0]), 0, 2.0).item() == pytest.approx(0.0, abs=1e-12)
    assert focal_loss(Tensor([math.log(9.0), 0.0]), 0, 2.0).item() == pytest.approx(0.0010536, abs=1e-7)


def test_focal_clamps_hopeless_predictions():
    assert focal_loss(Tensor([-1e4, 1e4]), 0, 0.0).item() == pytest.approx(-math.log(1e-12))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 10_000))
def test_gamma_zero_is_cross_entropy(B, C, seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(B, C)) * 3
    y = r.integers(0, C, size=B)
    logp = z - np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) - z.max(axis=1, keepdims=True)
    ce = -logp[np.arange(B), y].mean()
    assert focal_loss(Tensor(z), y, 0.0).item() == pytest.approx(ce, rel=1e-10, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-8, 8), st.floats(0, 10), st.floats(0, 10))
def test_focal_nonincreasing_in_gamma(margin, g1, g2):
    lo, hi = sorted((g1, g2))
    z = Tensor([margin, 0.0])
    assert focal_loss(z, 0, hi).item() <= focal_loss(z, 0, lo).item() + 1e-12


def test_focal_gradient_and_errors(rng):
    z = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    assert grad_check(lambda: focal_loss(z, [0, 3, 1], 2.0), [z]) < 1e-5
    with pytest.raises(ConfigError):
        focal_loss(z, [0, 3, 1], -1.0)
    with pytest.raises(ConfigError):
        focal_loss(z, [0, 4, 1], 0.0)


# -- metrics --------------------------------------------------------------------------------

def test_metrics_hand_example():
    r = metrics([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0], 3)
    assert r.confusion == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
    np.testing.assert_allclose(r.per_class_f1, [0.5, 0.8, 2 / 3])
    assert r.macro_f1 == pytest.approx((0.5 + 0.8 + 2 / 3) / 3)
    assert r.weighted_f1 == pytest.approx((2 * 0.5 + 2 * 0.8 + 2 * 2 / 3) / 6)
    assert r.accuracy == pytest.approx(4 / 6)


def _oracle_f1(yt, yp, C):
    out = []
    for c in range(C):
        tp = sum(1 for t, p in zip(yt, yp) if t == c and p == c)
        fp = sum(1 for t, p in zip(yt, yp) if t != c and p == c)
        fn = sum(1 for t, p in zip(yt, yp) if t == c and p != c)
        out.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return out


def test_metrics_against_exhaustive_oracle():
    for yt in itertools.product(range(3), repeat=4):
        for yp in itertools.product(range(3), repeat=4):
            r = metrics(yt, yp, 3)
            want = _oracle_f1(yt, yp, 3)
            support = np.bincount(yt, minlength=3)
            assert r.per_class_f1 == pytest.approx(want, abs=1e-12)
            assert r.macro_f1 == pytest.approx(np.mean(want), abs=1e-12)
            assert r.weighted_f1 == pytest.approx(float(np.dot(want, support)) / 4, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30),
       st.permutations(range(4)))
def test_metrics_relabel_invariance(pairs, perm):
    yt, yp = (np.array(v) for v in zip(*pairs))
    a = metrics(yt, yp, 4)
    b = metrics(np.array(perm)[yt], np.array(perm)[yp], 4)
    assert a.macro_f1 == pytest.approx(b.macro_f1)
    assert a.weighted_f1 == pytest.approx(b.weighted_f1)
    assert b.per_class_f1 == pytest.approx([a.per_class_f1[perm.index(c)] for c in range(4)])


def test_absent_class_scores_zero():
    r = metrics([0, 0, 1], [0, 0, 1], 3)
    assert r.per_class_f1 == [1.0, 1.0, 0.0]
    assert r.macro_f1 == pytest.approx(2 / 3)


def test_metrics_input_errors():
    with pytest.raises(DataError):
        metrics([], [], 2)
    with pytest.raises(DataError):
        metrics([0, 1], [0], 2)
    with pytest.raises(DataError):
        metrics([0, 2], [0, 1], 2)


def test_bootstrap_cases():
    y = np.array([0, 1, 2] * 20)
    same = paired_bootstrap(y, y, y, B=200)
    assert same.p_value == 1.0 and not same.significant
    wrong = (y + 1) % 3
    better = paired_bootstrap(y, y, wrong, B=200)
    assert better.p_value == 0.0 and better.significant and better.observed_delta == pytest.approx(1.0)
    assert paired_bootstrap(y, wrong, y, B=200).p_value == 1.0
    assert paired_bootstrap(y, y, wrong, B=200, comparisons=4).threshold == pytest.approx(0.0125)
    assert paired_bootstrap(y, y, wrong, metric="accuracy", B=200, seed=3).significant


def test_bootstrap_is_seeded_and_validates():
    r = np.random.default_rng(0)
    y, a, b = (r.integers(0, 3, size=40) for _ in range(3))
    assert paired_bootstrap(y, a, b, B=300, seed=5) == paired_bootstrap(y, a, b, B=300, seed=5)
    with pytest.raises(DataError):
        paired_bootstrap(y, a, b, B=10)
    with pytest.raises(DataError):
        paired_bootstrap(y, a[:5], b)
    with pytest.raises(DataError):
        paired_bootstrap(y, a, b, metric="auc")


def test_dyad_average():
    a = metrics([0, 1, 1], [0, 1, 1], 2)
    b = metrics([0, 1, 1], [1, 1, 1], 2)
    avg = dyad_average([a, b])
    assert avg.macro_f1 == pytest.approx((a.macro_f1 + b.macro_f1) / 2)
    assert avg.per_class_f1 == pytest.approx([0.5, 0.9])
    assert avg.confusion == [[1, 1], [0, 4]] and avg.n == 6
    with pytest.raises(DataError):
        dyad_average([])


def test_summary_rows_mean_std():
    a = metrics([0, 1], [0, 1], 2)
    b = metrics([0, 1], [1, 1], 2)
    table = summary_rows([("seed1", a), ("seed2", b)], ["x", "y"])
    assert table[0] == ["run", "accuracy", "weighted_f1", "macro_f1", "f1_x", "f1_y"]
    assert table[-1][0] == "mean±std" and table[-1][1] == "0.7500±0.2500"
    assert len(summary_rows([("seed1", a)], ["x", "y"])) == 2


# -- training -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    m = synth_generate(SynthSpec(n_fragments=36, T=8, d_a=4, d_v=4, lag=2, segments=2, n_groups=6,
                                 task="longrange", seed=1), root)
    return m, FragmentStore(m), group_split(m, test_frac=0.2, valid_frac=0.2)


def _cfg(**kw):
    return tiny_config(**{"dtype": "float32", **kw})


def test_zero_learning_rate_leaves_weights(dataset):
    _, store, split = dataset
    m = CPMT(_cfg())
    before = m.state_dict()
    train(m, store, split, TrainConfig(batch_size=8, learning_rate=0.0, epochs=2))
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_tiny_model_overfits_small_set(dataset):
    _, store, _ = dataset
    idx = list(range(12))
    split = Split(idx, [], idx)
    m = CPMT(tiny_config())
    res = train(m, store, split, TrainConfig(batch_size=4, learning_rate=1e-2, epochs=40, gamma=0.0,
                                             weight_decay=0.0))
    assert res.loss_curve[-1] < 0.1 * res.loss_curve[0]
    assert evaluate(m, store, idx).accuracy == 1.0


def test_training_is_deterministic(dataset):
    _, store, split = dataset
    runs = []
    for _ in range(2):
        m = CPMT(_cfg(dropout_rate=0.1))
        res = train(m, store, split, TrainConfig(batch_size=8, epochs=2, seed=3))
        runs.append((res.loss_curve, m.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    m = CPMT(_cfg(verbal=True))
    save_checkpoint(tmp_path / "m.ckpt", m.cfg, m.state_dict(), {"note": 1}, {"extra": {"a": np.ones((2, 2))}})
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.cfg == m.cfg and ck.meta == {"note": 1}
    assert ck.groups["extra"]["a"].shape == (2, 2)
    restored = ck.model().state_dict()
    for k, v in m.state_dict().items():
        assert restored[k].tobytes() == v.tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_resume_matches_uninterrupted_run(dataset, tmp_path):
    _, store, split = dataset
    tc = dict(batch_size=8, seed=2)
    full = CPMT(_cfg(dropout_rate=0.1))
    r_full = train(full, store, split, TrainConfig(epochs=4, **tc), tmp_path / "full")
    part = CPMT(_cfg(dropout_rate=0.1))
    train(part, store, split, TrainConfig(epochs=2, **tc), tmp_path / "part")
    again = CPMT(_cfg(dropout_rate=0.1))
    r_again = train(again, store, split, TrainConfig(epochs=4, **tc), tmp_path / "part", resume=True)
    assert r_again.loss_curve == r_full.loss_curve
    assert r_again.best_epoch == r_full.best_epoch
    for k, v in full.state_dict().items():
        np.testing.assert_array_equal(again.state_dict()[k], v)
    assert {p.name for p in (tmp_path / "full").iterdir()} >= {"last.ckpt", "best.ckpt"}


def test_nonfinite_loss_saves_last_finite_state(tmp_path):
    m = synth_generate(SynthSpec(n_fragments=6, T=8, d_a=4, d_v=4, lag=2, segments=2, n_groups=3), tmp_path / "d")
    bad = m.fragments[0]["persons"][0]["streams"]["audio"]["path"]
    write_tensor(m.root / bad, np.full((8, 4), np.nan, dtype=np.float32))
    store = FragmentStore(m)
    model = CPMT(_cfg())
    with np.errstate(all="ignore"), pytest.raises(NumericError):
        train(model, store, Split(list(range(6)), [], []), TrainConfig(batch_size=6, epochs=1), tmp_path / "run")
    assert (tmp_path / "run" / "last_finite.ckpt").exists()


@pytest.mark.parametrize("kw", [{"gamma": -1}, {"learning_rate": -1}, {"batch_size": 0}, {"grad_clip": 0}])
def test_train_config_errors(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
