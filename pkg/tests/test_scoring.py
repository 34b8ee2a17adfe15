import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factoradapt.scoring import (
    bootstrap_interval,
    edit_align,
    format_report,
    score_corpus,
    wer,
)
from factoradapt.selfcheck import edit_distance_brute, edit_distance_suite

tokens = st.lists(st.sampled_from("abcd"), max_size=9)


def test_alignment_matches_brute_force_on_1000_pairs():
    assert edit_distance_suite(1000, seed=0) == 0


@settings(max_examples=200, deadline=None)
@given(tokens, tokens)
def test_alignment_is_consistent(ref, hyp):
    al = edit_align(ref, hyp)
    assert al.errors == edit_distance_brute(ref, hyp)
    assert [p[0] for p in al.pairs if p[0] is not None] == ref
    assert [p[1] for p in al.pairs if p[1] is not None] == hyp
    assert al.substitutions + al.deletions + len([p for p in al.pairs if p[2] == "="]) == len(ref)


def test_known_alignment():
    al = edit_align("kitten", "sitting")
    assert (al.substitutions, al.deletions, al.insertions) == (2, 0, 1)


def test_ties_prefer_substitution_then_deletion():
    al = edit_align(["a"], ["b"])
    assert (al.substitutions, al.deletions, al.insertions) == (1, 0, 0)
    al = edit_align(["a", "b"], ["c"])
    assert [p[2] for p in al.pairs] == ["S", "D"] or [p[2] for p in al.pairs] == ["D", "S"]
    assert al.deletions == 1


def test_empty_sequences():
    assert edit_align([], []).errors == 0
    assert edit_align([], ["x", "y"]).insertions == 2
    assert edit_align(["x"], []).deletions == 1


def test_corpus_rate_and_zero_reference():
    assert wer([["a", "b"], ["c"]], [["a"], ["d"]]) == pytest.approx(200 / 3)
    with pytest.raises(ValueError):
        wer([[]], [["a"]])


def _report(seed=0, n=60):
    rng = np.random.default_rng(seed)
    refs, hyps, attrs = {}, {}, {}
    for i in range(n):
        refs[f"u{i}"] = list(rng.integers(0, 5, int(rng.integers(1, 7))))
        hyps[f"u{i}"] = list(rng.integers(0, 5, int(rng.integers(0, 7))))
        attrs[f"u{i}"] = {"speaker": f"s{i % 4}", "env": f"e{i % 3}"}
    return score_corpus(refs, hyps, attrs)


@pytest.mark.parametrize("key", ["speaker", "env"])
def test_group_rates_recombine_to_the_overall_rate(key):
    rep = _report()
    groups = rep.group_by(key)
    total = sum(g.wer * g.ref_tokens for g in groups.values()) / rep.ref_tokens
    assert total == pytest.approx(rep.wer, rel=1e-12)
    assert sum(len(g.utterances) for g in groups.values()) == len(rep.utterances)


def test_missing_hypothesis_counts_as_deletions():
    rep = score_corpus({"u": ["a", "b"]}, {})
    assert rep.counts() == (0, 2, 0)


def test_bootstrap_interval_brackets_the_estimate():
    rep = _report(n=200)
    lo, hi = bootstrap_interval(rep, n_boot=300, seed=1)
    assert lo <= rep.wer <= hi
    assert bootstrap_interval(rep, n_boot=300, seed=1) == (lo, hi)


def test_report_formats_agree():
    text, tsv = format_report(_report(), ["speaker"])
    rows = tsv.strip().split("\n")
    assert rows[0].split("\t")[0] == "group"
    assert len(rows) == 1 + 1 + 4
    assert len(text.strip().split("\n")) == len(rows)
