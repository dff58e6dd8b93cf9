import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from cpmt import tensor as T
from cpmt.attention import AttentionParams
from cpmt.gradcheck import grad_check
from cpmt.memory import (MemoryEncoder, MemoryState, SlotMemory, WriteParams, bmn, full_write_matrix,
                         memory_read, memory_write, run_segments)
from cpmt.tensor import Tensor


def identity_write(d, heads=1):
    wp = WriteParams(d, heads, np.random.default_rng(0))
    for w in (wp.w_q, wp.w_k, wp.w_v):
        w.data[:] = np.eye(d)
    return wp


def state(slots, v_bias, tau=1.0):
    return MemoryState(Tensor(np.asarray(slots, float)), Tensor(np.asarray(v_bias, float)), tau)


def cosine(a, b):
    return float(a @ b / np.linalg.norm(a) / np.linalg.norm(b))


# -- BMN -------------------------------------------------------------------------------

def test_bmn_hand_values():
    np.testing.assert_allclose(bmn(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).data, [1 / 5 ** 0.5, 2 / 5 ** 0.5])
    np.testing.assert_allclose(bmn(Tensor([1.0, 0.0]), Tensor([0.0, 2.0])).data, [0.4472, 0.8944], atol=1e-3)
    np.testing.assert_allclose(bmn(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).data, [0.6, 0.8], atol=1e-12)


def test_bmn_terminal_state_is_fixed_point():
    vb = np.array([3.0, 4.0])
    np.testing.assert_allclose(bmn(Tensor(vb / 5), Tensor(vb)).data, vb / 5, atol=1e-15)


def test_bmn_cancellation_falls_back_to_bias_direction():
    out = bmn(Tensor([-3.0, -4.0]), Tensor([3.0, 4.0])).data
    np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-12)


def test_initial_state_is_normalised_bias(rng):
    mem = SlotMemory(5, 4, rng)
    st0 = mem.initial_state()
    np.testing.assert_allclose(st0.slots.data, mem.terminal_state(), atol=1e-15)
    assert mem.initial_state(3).slots.shape == (3, 5, 4)


# -- read ---------------------------------------------------------------------------

def test_single_slot_read(rng):
    prm = AttentionParams(4, 4, 2, rng)
    slot = rng.normal(size=(1, 4))
    out, w = memory_read(Tensor(rng.normal(size=(6, 4))), Tensor(slot), prm, return_weights=True)
    np.testing.assert_array_equal(w, np.ones((6, 1)))
    want = (slot @ prm.w_v.data) @ prm.w_o.data
    np.testing.assert_allclose(out.data, np.repeat(want, 6, axis=0), atol=1e-12)


def test_duplicated_slots_read_like_one(rng):
    prm = AttentionParams(4, 4, 2, rng)
    x = Tensor(rng.normal(size=(6, 4)))
    slot = rng.normal(size=(1, 4))
    one = memory_read(x, Tensor(slot), prm).data
    many = memory_read(x, Tensor(np.repeat(slot, 5, axis=0)), prm).data
    assert many.shape == (6, 4)
    np.testing.assert_allclose(many, one, atol=1e-6)


# -- write -------------------------------------------------------------------------

def test_single_slot_write_hand_oracle():
    m, x, vb = np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, 1e-4])
    new, w = memory_write(state([m], [vb]), Tensor([x]), identity_write(2))
    scores = np.array([m @ m, m @ x]) / np.sqrt(2)
    weights = np.exp(scores) / np.exp(scores).sum()
    mixed = weights[0] * m + weights[1] * x + vb
    np.testing.assert_allclose(w, [weights], atol=1e-12)
    np.testing.assert_allclose(w, [[0.6698, 0.3302]], atol=1e-3)
    np.testing.assert_allclose(new.data, [mixed / np.linalg.norm(mixed)], atol=1e-12)


def test_empty_segment_only_forgets(rng):
    wp = WriteParams(4, 2, rng)
    s = state(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    new, w = memory_write(s, None, wp)
    want = bmn(T.matmul(s.slots, wp.w_v), s.v_bias).data
    np.testing.assert_allclose(new.data, want, atol=1e-12)
    np.testing.assert_array_equal(w, np.ones((3, 1)))


def test_no_write_weight_between_distinct_slots(rng):
    wp = WriteParams(4, 2, rng)
    s = state(rng.normal(size=(5, 4)), rng.normal(size=(5, 4)))
    _, w = memory_write(s, Tensor(rng.normal(size=(7, 4))), wp)
    full = full_write_matrix(w)
    assert full.shape == (5, 12)
    off = full[:, :5][~np.eye(5, dtype=bool)]
    assert np.all(off == 0.0)
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)


def test_slot_update_ignores_other_slots(rng):
    wp = WriteParams(4, 2, rng)
    slots, vb, x = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), Tensor(rng.normal(size=(6, 4)))
    base, _ = memory_write(state(slots, vb), x, wp)
    bumped = slots.copy()
    bumped[2] += rng.normal(size=4)
    moved, _ = memory_write(state(bumped, vb), x, wp)
    keep = [0, 1, 3]
    np.testing.assert_array_equal(base.data[keep], moved.data[keep])
    assert np.abs(base.data[2] - moved.data[2]).max() > 1e-6


def test_padding_tokens_are_ignored(rng):
    wp = WriteParams(4, 2, rng)
    s = state(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    x = rng.normal(size=(5, 4))
    short, _ = memory_write(s, Tensor(x[:3]), wp)
    padded, w = memory_write(s, Tensor(x), wp, token_mask=np.array([True, True, True, False, False]))
    np.testing.assert_allclose(padded.data, short.data, atol=1e-12)
    assert np.all(w[:, 4:] == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.sampled_from([1, 2]), st.floats(0.2, 5.0), st.integers(0, 10_000))
def test_slots_unit_norm_after_write(k, n, heads, tau, seed):
    r = np.random.default_rng(seed)
    wp = WriteParams(4, heads, r)
    new, _ = memory_write(state(r.normal(size=(k, 4)), r.normal(size=(k, 4)), tau), Tensor(r.normal(size=(n, 4))), wp)
    assert np.abs(np.linalg.norm(new.data, axis=-1) - 1).max() < 1e-6


# -- forgetting ------------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(2, 8), st.floats(0.1, 10.0), st.integers(0, 10_000))
def test_forgetting_converges_to_bias_direction(d, scale, seed):
    r = np.random.default_rng(seed)
    vb = r.normal(size=d)
    vb *= scale / np.linalg.norm(vb)
    m = r.normal(size=d)
    m /= np.linalg.norm(m)
    target = vb / np.linalg.norm(vb)
    assume(cosine(m, target) > -0.99)
    prev = cosine(m, target)
    for _ in range(200):
        m = bmn(Tensor(m), Tensor(vb)).data
        c = cosine(m, target)
        assert c >= prev - 1e-12
        prev = c
    assert prev >= 0.999


def test_larger_bias_forgets_faster(rng):
    for _ in range(20):
        direction = rng.normal(size=6)
        direction /= np.linalg.norm(direction)
        m = rng.normal(size=6)
        m /= np.linalg.norm(m)
        start = cosine(m, direction)
        gain_small = cosine(bmn(Tensor(m), Tensor(0.1 * direction)).data, direction) - start
        gain_large = cosine(bmn(Tensor(m), Tensor(1.0 * direction)).data, direction) - start
        assert gain_large > gain_small


# -- segment recurrence ---------------------------------------------------------------------

def _encoder(rng, d=4, layers=2):
    return MemoryEncoder(d, 2, layers, rng), SlotMemory(3, d, rng)


def test_one_segment_one_write(rng):
    enc, mem = _encoder(rng)
    outs, st1 = run_segments([Tensor(rng.normal(size=(5, 4)))], mem.initial_state(), enc)
    assert len(outs) == 1 and outs[0].shape == (5, 4) and st1.step == 1


def test_no_memory_outputs_ignore_earlier_segments(rng):
    enc, mem = _encoder(rng)
    segs = [Tensor(rng.normal(size=(4, 4))) for _ in range(4)]
    a, sa = run_segments(segs, mem.initial_state(), enc, use_memory=False)
    b, _ = run_segments([segs[2], segs[0], segs[1], segs[3]], mem.initial_state(), enc, use_memory=False)
    np.testing.assert_array_equal(a[-1].data, b[-1].data)
    assert sa.step == 0


def test_first_segment_reaches_last_output(rng):
    enc, mem = _encoder(rng)
    segs = [rng.normal(size=(4, 4)) for _ in range(4)]
    a, _ = run_segments([Tensor(s) for s in segs], mem.initial_state(), enc)
    segs[0] = segs[0].copy()
    segs[0][1, 2] += 1.0
    b, _ = run_segments([Tensor(s) for s in segs], mem.initial_state(), enc)
    assert np.abs(a[-1].data - b[-1].data).max() > 1e-6


def test_norm_invariant_over_many_steps(rng):
    enc, mem = _encoder(rng)
    s = mem.initial_state(2)
    for _ in range(50):
        _, s = run_segments([Tensor(rng.normal(size=(2, 3, 4)) * 3)], s, enc)
        assert s.max_norm_deviation() < 1e-6


def test_run_segments_grad_check_including_bias(rng):
    enc, mem = _encoder(rng, layers=1)
    segs = [Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True) for _ in range(2)]
    w = Tensor(rng.normal(size=(2, 3, 4)))
    wm = Tensor(rng.normal(size=(2, 3, 4)))

    def f():
        outs, s = run_segments(segs, mem.initial_state(2), enc)
        return T.sum(w * outs[-1]) + T.sum(wm * s.slots)

    params = segs + enc.parameters() + [mem.v_bias]
    assert grad_check(f, params) < 1e-4
    mem.v_bias.grad = None
    f().backward()
    assert np.abs(mem.v_bias.grad).max() > 1e-6
