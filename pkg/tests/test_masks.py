import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from consistedit import tensor as tc
from consistedit.masks import (
    AttentionAccumulator,
    EditMask,
    MaskError,
    accumulate,
    finalize,
    load_external,
    normalize_and_threshold,
    save_mask,
    union,
    upsample_to_pixels,
    word_indices,
)

F32 = np.float32
N_TXT, N_VIS = 3, 5
N = N_TXT + N_VIS


def random_probs(rng, heads=2):
    a = rng.random((heads, N, N)).astype(F32)
    return (a / a.sum(axis=-1, keepdims=True)).astype(F32)


def test_uniform_attention_equal_scores():
    acc = AttentionAccumulator(N_TXT, N_VIS)
    accumulate(acc, np.full((N, N), 1 / N, F32), [1])
    m = finalize(acc, [1])
    assert len(set(m.scores.tolist())) == 1 and m.count == N_VIS


def test_one_hot_attention():
    a = np.zeros((N, N), F32)
    a[:, 0] = 1  # everything attends to text 0 ...
    a[N_TXT + 3] = 0
    a[N_TXT + 3, 2] = 1  # ... except vision token 3, which reads word 2
    acc = AttentionAccumulator(N_TXT, N_VIS)
    accumulate(acc, a, [2])
    assert finalize(acc, [2]).binary.tolist() == [False, False, False, True, False]


def test_two_step_accumulation_is_mean():
    rng = np.random.default_rng(0)
    p1, p2 = random_probs(rng), random_probs(rng)
    acc = AttentionAccumulator(N_TXT, N_VIS)
    acc.add(p1)
    acc.add(p2)
    words = [0, 2]

    def per_step(p):
        return sum(p[h, N_TXT:, w].astype(np.float64) for h in range(p.shape[0]) for w in words)

    want = (per_step(p1) + per_step(p2)) / 2
    assert np.allclose(acc.scores(words), want, rtol=1e-6)
    assert np.allclose(finalize(acc, words).scores, want / want.max(), rtol=1e-6)


def test_key_and_symmetric_directions():
    rng = np.random.default_rng(1)
    p = random_probs(rng, heads=1)
    acc = AttentionAccumulator(N_TXT, N_VIS)
    acc.add(p)
    key = p[0, 1, N_TXT:].astype(np.float64)
    query = p[0, N_TXT:, 1].astype(np.float64)
    assert np.allclose(acc.scores([1], "key"), key, rtol=1e-6)
    assert np.allclose(acc.scores([1], "symmetric"), (key + query) / 2, rtol=1e-6)
    with pytest.raises(MaskError):
        acc.scores([1], "sideways")


def test_all_equal_scores_give_full_mask():
    assert normalize_and_threshold(np.full(6, 0.3, F32)).count == 6


def test_threshold_example():
    m = normalize_and_threshold(np.array([1.0, 0.05, 0.2], F32), 0.1)
    assert m.binary.tolist() == [True, False, True]


def test_finalize_needs_contributions():
    with pytest.raises(MaskError):
        finalize(AttentionAccumulator(N_TXT, N_VIS), [0])


def test_empty_word_set():
    with pytest.raises(MaskError):
        accumulate(AttentionAccumulator(N_TXT, N_VIS), np.zeros((N, N), F32), [])


def test_word_out_of_range():
    with pytest.raises(MaskError):
        accumulate(AttentionAccumulator(N_TXT, N_VIS), np.zeros((N, N), F32), [N_TXT])


scores_st = arrays(F32, st.integers(1, 40), elements=st.floats(0, 10, width=32))


@settings(max_examples=200, deadline=None)
@given(scores_st, st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(scores, t1, t2):
    lo, hi = sorted((t1, t2))
    a, b = normalize_and_threshold(scores, lo), normalize_and_threshold(scores, hi)
    assert not np.any(b.binary & ~a.binary)


@settings(max_examples=100, deadline=None)
@given(scores_st, st.floats(0, 1))
def test_normalization_idempotent(scores, t):
    once = normalize_and_threshold(scores, t)
    assert np.array_equal(normalize_and_threshold(once.scores, t).binary, once.binary)


def test_head_uniform_attention_head_invariant():
    rng = np.random.default_rng(2)
    p = random_probs(rng, heads=1)
    one, four = AttentionAccumulator(N_TXT, N_VIS), AttentionAccumulator(N_TXT, N_VIS)
    one.add(p)
    four.add(np.repeat(p, 4, axis=0))
    assert np.allclose(finalize(one, [0]).scores, finalize(four, [0]).scores, rtol=1e-6)


# -- union --------------------------------------------------------------------------


def mask_of(bits, scores=None):
    b = np.asarray(bits, bool)
    s = b.astype(F32) if scores is None else np.asarray(scores, F32)
    return EditMask(s, b, 0.1)


def test_union_with_empty_is_identity():
    m = mask_of([1, 0, 1, 1], [1, 0.05, 0.3, 0.9])
    u = union([m, EditMask.empty(4)])
    assert np.array_equal(u.binary, m.binary) and np.array_equal(u.scores, m.scores)


def test_union_disjoint_sizes():
    assert union([mask_of([1, 1, 0, 0, 0]), mask_of([0, 0, 0, 1, 0])]).count == 3


def test_union_length_mismatch():
    with pytest.raises(MaskError):
        union([EditMask.full(3), EditMask.full(4)])


masks_st = st.integers(1, 12).flatmap(
    lambda n: st.lists(arrays(F32, n, elements=st.floats(0, 1, width=32)), min_size=3, max_size=3)
)


@settings(max_examples=200, deadline=None)
@given(masks_st)
def test_union_commutative_associative(raw):
    a, b, c = (normalize_and_threshold(r, 0.4) for r in raw)
    ab, ba = union([a, b]), union([b, a])
    assert np.array_equal(ab.binary, ba.binary) and np.array_equal(ab.scores, ba.scores)
    left, right = union([union([a, b]), c]), union([a, union([b, c])])
    assert np.array_equal(left.binary, right.binary) and np.array_equal(left.scores, right.scores)


# -- external masks ------------------------------------------------------------------


def test_external_all_ones(tmp_path):
    tc.save_tensor(tmp_path / "m.cted", np.ones(N_VIS, F32))
    assert load_external(tmp_path / "m.cted", N_VIS).count == N_VIS


def test_external_round_trip(tmp_path):
    m = mask_of([1, 0, 0, 1, 1])
    save_mask(tmp_path / "m.cted", m)
    assert np.array_equal(load_external(tmp_path / "m.cted", N_VIS).binary, m.binary)


def test_external_threshold_rule(tmp_path):
    tc.save_tensor(tmp_path / "m.cted", np.array([0.7, 0.3, 1.5, -2, 0.5], F32))
    m = load_external(tmp_path / "m.cted", 5)
    assert m.binary.tolist() == [True, False, True, False, True]
    assert m.scores.max() <= 1 and m.scores.min() >= 0


def test_external_wrong_length(tmp_path):
    tc.save_tensor(tmp_path / "m.cted", np.ones(4, F32))
    with pytest.raises(MaskError):
        load_external(tmp_path / "m.cted", N_VIS)


# -- helpers ------------------------------------------------------------------------------


def test_word_indices():
    assert word_indices("a red car and a red hat", ["red"]) == (1, 5)
    assert word_indices("a red car", ["car", "red"]) == (2, 1)
    with pytest.raises(MaskError):
        word_indices("a red car", ["blue"])


def test_upsample_to_pixels():
    px = upsample_to_pixels(np.array([1, 0, 0, 1], bool), (2, 2), 2)
    assert px.astype(int).tolist() == [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]]
