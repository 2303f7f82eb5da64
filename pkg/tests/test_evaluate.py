import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advnlg.corpus import DelexPolicy, parse_mr
from advnlg.evaluate import bleu4, corpus_bleu_text, significance, slot_coverage

WILDWOOD = ("name[Wildwood], eatType[restaurant], food[Indian], area[riverside], "
          "familyFriendly[no], near[Raja Indian Cuisine]")


def naive_bleu(hyps, refsets):
    """Independent quadratic-time BLEU-4: list scans instead of counters."""
    match = [0] * 4
    total = [0] * 4
    c = r = 0
    for hyp, refs in zip(hyps, refsets):
        for n in range(1, 5):
            grams = [hyp[i:i + n] for i in range(len(hyp) - n + 1)]
            total[n - 1] += len(grams)
            done = []
            for g in grams:
                if g in done:
                    continue
                done.append(g)
                in_hyp = sum(1 for x in grams if x == g)
                in_ref = max(sum(1 for i in range(len(ref) - n + 1) if ref[i:i + n] == g) for ref in refs)
                match[n - 1] += min(in_hyp, in_ref)
        c += len(hyp)
        best = None
        for ref in refs:
            if best is None or abs(len(ref) - len(hyp)) < abs(best - len(hyp)) or \
                    (abs(len(ref) - len(hyp)) == abs(best - len(hyp)) and len(ref) < best):
                best = len(ref)
        r += best
    if any(t == 0 or m == 0 for m, t in zip(match, total)):
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(m / t) for m, t in zip(match, total)) / 4)


def test_identity_and_disjoint():
    assert bleu4([["a", "b", "c", "d"]], [[["a", "b", "c", "d"]]]).bleu == 1.0
    assert bleu4([["x", "y", "z", "w"]], [[["a", "b", "c", "d"]]]).bleu == 0.0


def test_clipping_hand_example():
    rep = bleu4([["the"] * 4], [[["the", "cat", "sat", "here"]]])
    assert rep.precisions == [0.25, 0.0, 0.0, 0.0]
    assert rep.brevity_penalty == 1.0
    assert rep.bleu == 0.0
    assert rep.matches == [1, 0, 0, 0] and rep.totals == [4, 3, 2, 1]


def test_hand_computed_partial_match():
    hyp = "the cat sat on the mat".split()
    ref = "the cat is on the mat".split()
    # p1 = 5/6, p2 = 3/5, p3 = 1/4, p4 = 0/3  -> BLEU 0; drop to a 3-gram-complete example instead
    rep = bleu4([hyp], [[ref]])
    assert rep.precisions[:3] == [5 / 6, 3 / 5, 1 / 4] and rep.bleu == 0.0
    hyp2 = "a b c d e".split()
    ref2 = "a b c d f g".split()
    rep2 = bleu4([hyp2], [[ref2]])
    expect = math.exp(1 - 6 / 5) * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert abs(rep2.bleu - expect) <= 1e-12


def test_brevity_closest_reference_ties_to_shorter():
    hyp = "a b c d e".split()
    refs = ["a b c d".split(), "a b c d e f".split()]
    rep = bleu4([hyp], [refs])
    assert rep.ref_len == 4
    assert rep.brevity_penalty == 1.0


def test_errors():
    with pytest.raises(ValueError):
        bleu4([["a"]], [])
    with pytest.raises(ValueError):
        bleu4([["a"]], [[]])


def test_report_invariants():
    rng = np.random.default_rng(0)
    for _ in range(20):
        hyps = [list(rng.choice(list("abcd"), size=rng.integers(4, 9))) for _ in range(5)]
        refs = [[list(rng.choice(list("abcd"), size=rng.integers(4, 9))) for _ in range(2)] for _ in range(5)]
        rep = bleu4(hyps, refs)
        assert rep.check()
        assert all(0 <= x <= 1 for x in rep.precisions + [rep.bleu, rep.brevity_penalty])


def test_matches_naive_oracle_on_random_corpora():
    rng = np.random.default_rng(42)
    nonzero = 0
    for _ in range(50):
        n = rng.integers(1, 6)
        alpha = list("ab") if rng.random() < 0.6 else list("abcdef")
        hyps = [list(rng.choice(alpha, size=rng.integers(1, 10))) for _ in range(n)]
        refs = [[list(rng.choice(alpha, size=rng.integers(1, 10))) for _ in range(rng.integers(1, 4))]
                for _ in range(n)]
        got, want = bleu4(hyps, refs).bleu, naive_bleu(hyps, refs)
        assert abs(got - want) <= 1e-12
        nonzero += want > 0
    assert nonzero >= 10


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from("abcd"), min_size=1, max_size=8),
                          st.lists(st.sampled_from("abcd"), min_size=1, max_size=8)),
                min_size=1, max_size=6), st.randoms())
def test_permutation_invariance_and_identity_monotonicity(pairs, rnd):
    hyps = [h for h, _ in pairs]
    refs = [[r] for _, r in pairs]
    base = bleu4(hyps, refs).bleu
    order = list(range(len(pairs)))
    rnd.shuffle(order)
    assert abs(bleu4([hyps[i] for i in order], [refs[i] for i in order]).bleu - base) <= 1e-12
    for i in range(len(pairs)):
        swapped = hyps[:i] + [refs[i][0]] + hyps[i + 1:]
        assert bleu4(swapped, refs).bleu >= base - 1e-12


def test_text_bleu_uses_corpus_tokenizer():
    assert corpus_bleu_text(["Wildwood is an Indian pub."], [["wildwood is an indian pub ."]]).bleu == 1.0


# -- slot coverage ---------------------------------------------------------------


def test_slot_coverage_wildwood():
    mr = parse_mr(WILDWOOD)
    hyp = "Wildwood is an Indian restaurant in the riverside near Raja Indian Cuisine. It is not family friendly."
    assert slot_coverage(hyp, mr) == (6, 0, 0)
    assert slot_coverage("", mr) == (0, 6, 0)
    assert slot_coverage("⟨name⟩ is a restaurant", mr)[2] == 1


def test_slot_coverage_partition():
    mr = parse_mr("name[X], familyFriendly[yes], priceRange[cheap], near[]")
    for hyp in ["X is cheap", "kid friendly X", "nothing", "X is a cheap family friendly place"]:
        covered, missing, _ = slot_coverage(hyp, mr, DelexPolicy())
        assert covered + missing == 3


# -- significance ------------------------------------------------------------------


def test_significance_degenerate_dominance_and_determinism():
    refs = [[f"w{i} a b c d".split()] for i in range(30)]
    good = [r[0] for r in refs]
    bad = [["z", "y", "x", "q"] for _ in refs]
    assert significance(good, good, refs, resamples=200) == 1.0
    assert significance(good, bad, refs, resamples=200) == 0.0
    rng = np.random.default_rng(0)
    mixed = [r[0] if rng.random() < 0.6 else r[0][:3] + ["q", "q"] for r in refs]
    p1 = significance(mixed, good, refs, resamples=300, seed=7)
    assert p1 == significance(mixed, good, refs, resamples=300, seed=7)
    assert 0.0 <= p1 <= 1.0


def test_significance_stat_path_matches_generic_path():
    rng = np.random.default_rng(3)
    refs = [[list(rng.choice(list("abcd"), size=6))] for _ in range(15)]
    a = [r[0] if rng.random() < 0.5 else list(rng.choice(list("abcd"), size=6)) for r in refs]
    b = [list(rng.choice(list("abcd"), size=6)) for _ in refs]
    fn = lambda h, r: bleu4(h, r).bleu
    assert significance(a, b, refs, 150, seed=1) == significance(a, b, refs, 150, seed=1, bleu_fn=fn)


def test_significance_requires_enough_resamples():
    with pytest.raises(ValueError):
        significance([["a"]], [["a"]], [[["a"]]], resamples=10)
