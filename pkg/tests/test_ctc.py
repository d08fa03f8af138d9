import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from cdhwr import ctc
from cdhwr import tensor as tn
from cdhwr.tensor import Tape, Tensor


def log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def path_posteriors(lp):
    """Probability of every collapsed labeling, by enumerating all C^T paths."""
    T, C = lp.shape
    blank = C - 1
    post = defaultdict(float)
    for path in itertools.product(range(C), repeat=T):
        label = []
        prev = None
        for k in path:
            if k != prev and k != blank:
                label.append(k)
            prev = k
        post[tuple(label)] += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    return post


def random_instance(rng, T, U, C):
    """Random frames and a feasible label of length at most U."""
    lp = log_softmax(rng.normal(size=(T, C)) * 2)
    while True:
        label = [int(k) for k in rng.integers(0, C - 1, size=U)]
        if ctc.required_frames(label) <= T:
            return lp, label
        U -= 1


def test_single_frame():
    lp = np.log([[0.7, 0.3]])
    assert ctc.ctc_loss(lp, [0]) == pytest.approx(-math.log(0.7), abs=1e-12)


def test_two_frames_uniform():
    lp = np.log(np.full((2, 2), 0.5))
    assert ctc.ctc_loss(lp, [0]) == pytest.approx(-math.log(0.75), abs=1e-12)


def test_repeat_needs_separator():
    lp = log_softmax(np.random.default_rng(0).normal(size=(3, 2)))
    # a,-,a is the only path for "aa" in three frames
    expected = lp[0, 0] + lp[1, 1] + lp[2, 0]
    assert -ctc.ctc_loss(lp, [0, 0]) == pytest.approx(expected, abs=1e-12)
    assert path_posteriors(lp)[(0, 0)] == pytest.approx(math.exp(expected), abs=1e-12)


def test_brute_force_agreement():
    rng = np.random.default_rng(1)
    for _ in range(40):
        T, C = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        U = int(rng.integers(0, min(3, T) + 1))
        lp, label = random_instance(rng, T, U, C)
        assert math.exp(-ctc.ctc_loss(lp, label)) == pytest.approx(path_posteriors(lp)[tuple(label)], abs=1e-10)


def test_infeasible_label_raises():
    lp = log_softmax(np.zeros((3, 3)))
    with pytest.raises(ctc.InfeasibleLabelError):
        ctc.ctc_loss(lp, [0, 0, 1])
    with pytest.raises(ctc.InfeasibleLabelError):
        ctc.ctc_loss(lp, [0, 1, 0, 1])
    assert ctc.required_frames([0, 0, 1, 1, 1]) == 8


def test_blank_in_label_rejected():
    with pytest.raises(ValueError):
        ctc.ctc_loss(log_softmax(np.zeros((3, 3))), [2])


def test_lattice_forward_backward_agree():
    lp, label = random_instance(np.random.default_rng(2), 7, 3, 4)
    lat = ctc.ctc_lattice(lp, label)
    for t in range(7):
        total = np.logaddexp.reduce(lat.log_alpha[t] + lat.log_beta[t] - lp[t, lat.extended])
        assert total == pytest.approx(lat.log_likelihood, abs=1e-10)
    start = np.logaddexp(lat.log_beta[0, 0], lat.log_beta[0, 1])
    assert start == pytest.approx(lat.log_likelihood, abs=1e-10)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(5):
        lp, label = random_instance(rng, 5, 2, 4)
        g = ctc.ctc_grad(lp, label)
        fd = np.zeros_like(lp)
        for idx in np.ndindex(*lp.shape):
            e = np.zeros_like(lp)
            e[idx] = h
            fd[idx] = (ctc.ctc_loss(lp + e, label) - ctc.ctc_loss(lp - e, label)) / (2 * h)
        assert np.max(np.abs(g - fd) / np.maximum(1, np.maximum(np.abs(g), np.abs(fd)))) < 1e-6


def test_occupancy_normalized():
    lp, label = random_instance(np.random.default_rng(4), 8, 3, 4)
    np.testing.assert_allclose(ctc.ctc_occupancy(lp, label).sum(axis=1), 1.0, atol=1e-10)


def test_forced_blank_frame():
    lp = log_softmax(np.random.default_rng(5).normal(size=(3, 3)))
    occ = ctc.ctc_occupancy(lp, [1, 1])
    np.testing.assert_allclose(occ[1], [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(occ[0], [0, 1, 0], atol=1e-12)


def test_permutation_covariance():
    rng = np.random.default_rng(6)
    lp, label = random_instance(rng, 6, 3, 4)
    perm = np.array([2, 0, 1, 3])  # blank stays last
    relabeled = np.empty_like(lp)
    relabeled[:, perm] = lp
    assert ctc.ctc_loss(relabeled, [perm[k] for k in label]) == pytest.approx(ctc.ctc_loss(lp, label), abs=1e-12)


def test_raising_a_symbol_probability_follows_occupancy():
    # With the other classes of frame t rescaled, the label probability is linear
    # in p_t(k) with slope proportional to occupancy_t(k) - p_t(k).
    rng = np.random.default_rng(7)
    for _ in range(5):
        lp, label = random_instance(rng, 6, 2, 3)
        base = ctc.ctc_loss(lp, label)
        occ = ctc.ctc_occupancy(lp, label)
        p = np.exp(lp)
        for t, k in np.ndindex(*lp.shape):
            if abs(occ[t, k] - p[t, k]) < 1e-9:
                continue
            q = p.copy()
            new = p[t, k] + rng.uniform(0, 1 - p[t, k])
            q[t] *= (1 - new) / (1 - p[t, k])
            q[t, k] = new
            changed = ctc.ctc_loss(np.log(q), label)
            if occ[t, k] > p[t, k]:
                assert changed <= base + 1e-12
            else:
                assert changed >= base - 1e-12


def test_log_space_stability():
    lp = np.full((6, 3), -200.0)
    lp[:, 2] = np.log1p(-2 * math.exp(-200))
    loss = ctc.ctc_loss(lp, [0, 1])
    assert math.isfinite(loss)
    # choose 2 of 6 frames for a,b in order (with optional repeats): dominated by single-emission paths
    assert loss == pytest.approx(400 - math.log(15), rel=1e-9)


def test_batch_op_gradient_through_log_softmax():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(2, 5, 4))
    labels = [[0, 1], [2]]
    with tn.precision(np.float64):
        x = Tensor(logits, requires_grad=True)
        with Tape() as tape:
            loss = ctc.ctc_loss_batch(tn.log_softmax(x), labels)
        (g,) = tape.gradient(loss, [x])
    soft = np.exp(log_softmax(logits))
    for b in range(2):
        expected = (soft[b] - ctc.ctc_occupancy(log_softmax(logits[b]), labels[b])) / 2
        np.testing.assert_allclose(g[b], expected, atol=1e-12)


def test_batch_op_names_infeasible_sample():
    lp = Tensor(log_softmax(np.zeros((1, 2, 3))))
    with pytest.raises(ctc.InfeasibleLabelError, match="w-07"):
        ctc.ctc_loss_batch(lp, [[0, 0, 0]], ids=["w-07"])


# -- decoding ---------------------------------------------------------------------

def one_hot_frames(path, C, p=0.999):
    lp = np.full((len(path), C), math.log((1 - p) / (C - 1)))
    lp[np.arange(len(path)), path] = math.log(p)
    return lp


def test_best_path_examples():
    vocab = "ab"
    assert ctc.decode_best_path(one_hot_frames([0, 0, 2, 1], 3), vocab) == "ab"
    assert ctc.decode_best_path(one_hot_frames([2, 2, 2], 3), vocab) == ""
    assert ctc.decode_best_path(one_hot_frames([0, 2, 0], 3), vocab) == "aa"


def test_beam_equals_best_path_on_peaked_input():
    for path in ([0, 0, 2, 1], [0, 2, 0, 1, 1], [2, 2]):
        lp = one_hot_frames(path, 3)
        assert ctc.decode_beam(lp, "ab", 5) == ctc.decode_best_path(lp, "ab")


def test_exhaustive_beam_is_exact():
    rng = np.random.default_rng(9)
    for _ in range(20):
        T, C = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        lp = log_softmax(rng.normal(size=(T, C)) * 1.5)
        post = path_posteriors(lp)
        beams = ctc.beam_search(lp, beam_width=10_000)
        for prefix, logp in beams:
            assert math.exp(logp) == pytest.approx(post[prefix], abs=1e-12)
        best = max(post.values())
        winners = sorted(k for k, v in post.items() if abs(v - best) < 1e-15)
        assert beams[0][0] == winners[0]


def test_beam_tie_break_is_lexicographic():
    # equal scores rank by label index tuple, so the empty prefix comes first
    assert ctc.decode_beam(np.log(np.full((1, 3), 1 / 3)), "ab", 3) == ""
    assert ctc.decode_beam(np.log([[0.45, 0.45, 0.1]]), "ab", 3) == "a"
    assert ctc.decode_beam(np.log([[0.45, 0.45, 0.1]]), "ba", 3) == "b"


def test_beam_width_validated():
    with pytest.raises(ValueError):
        ctc.decode_beam(np.zeros((2, 3)), "ab", 0)


def test_lexicon_correct():
    lexicon = ["the", "take", "tree"]
    assert ctc.lexicon_correct("tke", lexicon) == "the"
    assert ctc.lexicon_correct("tree", lexicon) == "tree"
    assert ctc.lexicon_correct("", ["a", "bb"]) == "a"
    assert ctc.lexicon_correct("ab", ["ac", "ab", "aa"]) == "ab"
    assert ctc.lexicon_correct("ax", ["ac", "aa"]) == "ac"
    with pytest.raises(ValueError):
        ctc.lexicon_correct("x", [])
