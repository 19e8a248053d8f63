import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from uconv import numerics as nx
from uconv.checks import exhaustive_beam, random_ctc_instance
from uconv.ctc import (InfeasibleError, Vocabulary, beam_search, collapse, combined_loss, ctc_loss,
                       ctc_loss_batch, feasible, forward_backward, greedy_decode, min_frames)
from uconv.numerics import Tensor
from uconv.oracles import (brute_force_best_labelling, brute_force_ctc_nll, labelling_logprob,
                           numeric_gradient, reachable_labellings, relative_error)


def test_feasible_examples():
    assert feasible(3, [1, 1])
    assert not feasible(2, [1, 1])
    assert feasible(1, [])
    assert feasible(0, [])
    assert min_frames([2, 2, 2, 3]) == 6


def test_feasibility_matches_enumeration_small():
    for T in range(0, 7):
        reach = reachable_labellings(T, 3)
        for n in range(0, 5):
            for y in itertools.product([1, 2], repeat=n):
                assert feasible(T, y) == (y in reach), (T, y)


def test_two_frame_uniform_example():
    logits = np.zeros((2, 2))
    expected = brute_force_ctc_nll(logits, [1])
    assert expected == pytest.approx(-math.log(0.75), abs=1e-15)
    assert forward_backward(logits, [1])[0] == pytest.approx(0.2876820724517809, abs=1e-12)


def test_certain_blank_path_has_zero_loss():
    logits = np.tile([0.0, -np.inf, -np.inf], (3, 1))
    assert forward_backward(logits, [])[0] == 0.0


def test_infeasible_is_an_error():
    with pytest.raises(InfeasibleError):
        forward_backward(np.zeros((2, 3)), [1, 1])
    with pytest.raises(ValueError):
        forward_backward(np.zeros((4, 3)), [0, 1])


@given(st.integers(0, 10**6))
def test_loss_matches_enumeration(seed):
    logits, labels = random_ctc_instance(np.random.default_rng(seed))
    nll = forward_backward(logits, labels)[0]
    assert abs(nll - brute_force_ctc_nll(logits, labels)) < 1e-9
    assert nll >= 0


def test_loss_near_zero_only_for_certain_alignment():
    logits = np.array([[0, 40.0, 0], [40.0, 0, 0], [0, 0, 40.0]])
    assert 0 <= forward_backward(logits, [1, 2])[0] < 1e-15 + 3 * math.exp(-39)
    assert forward_backward(np.zeros((3, 3)), [1, 2])[0] > 0.1


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 6))
    x = rng.standard_normal((T, 4))
    labels = [1, 3] if T >= 2 else [1]
    t = Tensor(x, requires_grad=True)
    ctc_loss(t, labels).backward()
    numeric = numeric_gradient(lambda: forward_backward(x, labels)[0], x)
    assert relative_error(t.grad, numeric) < 1e-4


def test_batch_loss_is_mean_and_ignores_padding(rng):
    a, b = rng.standard_normal((6, 4)), rng.standard_normal((4, 4))
    padded = np.zeros((2, 6, 4))
    padded[0], padded[1, :4] = a, b
    padded[1, 4:] = 100.0
    t = Tensor(padded, requires_grad=True)
    loss = ctc_loss_batch(t, [6, 4], [[1, 2], [3]])
    expected = (forward_backward(a, [1, 2])[0] + forward_backward(b, [3])[0]) / 2
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)
    loss.backward()
    assert np.all(t.grad[1, 4:] == 0)
    np.testing.assert_allclose(t.grad[0], forward_backward(a, [1, 2])[1] / 2, atol=1e-15)


def test_combined_loss_examples():
    f = Tensor(2.0)
    assert float(combined_loss(f, [Tensor(4.0)], 0.5).data) == 3.0
    assert float(combined_loss(f, [Tensor(3.0), Tensor(5.0)], 0.5).data) == 3.0
    assert float(combined_loss(f, [Tensor(9.0)], 0.0).data) == 2.0
    assert combined_loss(f, [], 0.5) is f
    with pytest.raises(ValueError):
        combined_loss(f, [f], 1.5)


def _peaked(path, V, p=0.95):
    logits = np.full((len(path), V), math.log((1 - p) / (V - 1)))
    logits[np.arange(len(path)), path] = math.log(p)
    return logits


def test_greedy_examples():
    assert greedy_decode(_peaked([1, 1, 0, 1], 3)) == [1, 1]
    assert greedy_decode(_peaked([0, 0, 0], 3)) == []
    assert greedy_decode(np.zeros((2, 3))) == []  # ties go to the lower index
    assert collapse([2, 2, 0, 2, 3, 3]) == [2, 2, 3]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=8))
def test_beam_agrees_with_greedy_when_peaked(path):
    logits = _peaked(path, 4)
    assert list(beam_search(logits, 1)[0].prefix) == greedy_decode(logits)
    assert list(beam_search(logits, 20)[0].prefix) == greedy_decode(logits)


@given(st.integers(0, 10**6))
def test_beam_exact_with_exhaustive_width(seed):
    rng = np.random.default_rng(seed)
    T, V = int(rng.integers(1, 7)), int(rng.integers(2, 5))
    logits = rng.standard_normal((T, V)) * 2
    best, score = brute_force_best_labelling(logits)
    top = beam_search(logits, exhaustive_beam(T, V))[0]
    assert top.prefix == best
    assert top.score == pytest.approx(score, abs=1e-9)


@given(st.integers(0, 10**6))
def test_beam_hypothesis_scores_are_exact_and_monotone(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((int(rng.integers(1, 7)), 4)) * 2
    wide, narrow = beam_search(logits, 20), beam_search(logits, 1)
    assert wide[0].score >= narrow[0].score - 1e-12
    prefixes = [h.prefix for h in wide]
    assert len(prefixes) == len(set(prefixes))
    for h in wide:
        assert h.score == pytest.approx(np.logaddexp(h.log_blank, h.log_nonblank))
        # pruned paths only ever remove mass
        assert h.score <= labelling_logprob(logits, h.prefix) + 1e-9
    T = logits.shape[0]
    for h in beam_search(logits, exhaustive_beam(T, 4)):
        assert h.score == pytest.approx(labelling_logprob(logits, h.prefix), abs=1e-9)
    assert [h.score for h in wide] == sorted((h.score for h in wide), reverse=True)


def test_beam_is_deterministic_and_validates(rng):
    logits = rng.standard_normal((10, 5))
    a, b = beam_search(logits, 5), beam_search(logits, 5)
    assert [(h.prefix, h.score) for h in a] == [(h.prefix, h.score) for h in b]
    with pytest.raises(ValueError):
        beam_search(logits, 0)


def test_beam_ties_break_lexicographically():
    logits = np.log(np.array([[0.2, 0.4, 0.4]]))
    hyps = beam_search(logits, 3)
    assert [h.prefix for h in hyps[:2]] == [(1,), (2,)]


def test_vocabulary(tmp_path):
    vocab = Vocabulary(["▁the", "cat", "▁sat"])
    vocab.save(tmp_path / "v.txt")
    back = Vocabulary.load(tmp_path / "v.txt")
    assert len(back) == 4
    ids = back.encode("▁the cat ▁sat")
    assert ids == [1, 2, 3]
    assert back.detokenize(ids) == "thecat sat"
    with pytest.raises(KeyError):
        back.encode("dog")
