import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factoradapt import autodiff as ad
from factoradapt import kernels
from factoradapt.model import blank_augment
from factoradapt.selfcheck import ctc_brute_force, ctc_oracle_suite

IMPLS = kernels.implementations()


def _logp(rng, T, V):
    z = rng.standard_normal((T, V)) * 2
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def test_ctc_matches_brute_force_enumeration():
    assert ctc_oracle_suite(60, seed=5) <= 1e-9


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_each_backend_matches_brute_force(name):
    rng = np.random.default_rng(1)
    for labels in ([1], [1, 1], [2, 1, 2], []):
        logp = _logp(rng, 5, 3)
        _, _, ll = kernels.ctc_alpha_beta(logp, blank_augment(labels), impl=IMPLS[name])
        assert -ll == pytest.approx(ctc_brute_force(logp, labels), abs=1e-10)


def test_repeated_label_needs_a_separating_blank():
    logp = _logp(np.random.default_rng(0), 1, 3)
    with pytest.raises(ValueError, match="no valid alignment"):
        ad.ctc_nll(logp, blank_augment([1, 1]))


def test_single_frame_probability():
    logp = np.log(np.array([[0.2, 0.5, 0.3]]))
    assert ad.ctc_nll(logp, blank_augment([1])).item() == pytest.approx(-np.log(0.5))
    assert ad.ctc_nll(logp, blank_augment([])).item() == pytest.approx(-np.log(0.2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(2, 5), st.integers(0, 10_000))
def test_backends_agree(T, V, seed):
    rng = np.random.default_rng(seed)
    logp = _logp(rng, T, V)
    labels = list(rng.integers(1, V, int(rng.integers(0, 4))))
    outs = [kernels.ctc_alpha_beta(logp, blank_augment(labels), impl=m) for m in IMPLS.values()]
    for a, b, ll in outs[1:]:
        np.testing.assert_allclose(a, outs[0][0], atol=1e-12)
        np.testing.assert_allclose(b, outs[0][1], atol=1e-12)
        assert ll == pytest.approx(outs[0][2], abs=1e-12) or (np.isinf(ll) and np.isinf(outs[0][2]))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(2, 4), st.integers(0, 10_000))
def test_forward_and_backward_give_the_same_likelihood(T, V, seed):
    rng = np.random.default_rng(seed)
    logp = _logp(rng, T, V)
    labels = [int(x) for x in rng.integers(1, V, int(rng.integers(1, 3)))]
    alpha, beta, ll = kernels.ctc_alpha_beta(logp, blank_augment(labels))
    if not np.isfinite(ll):
        return
    # at every frame, sum_s alpha*beta/emission is the total likelihood
    ext = blank_augment(labels)
    per_t = np.logaddexp.reduce(alpha + beta - logp[:, ext], axis=1)
    np.testing.assert_allclose(per_t, ll, atol=1e-10)


def _prefix_scores(logp, labels, impl=None):
    """Extend the empty prefix token by token; return final r_nb, r_b and each psi."""
    T = logp.shape[0]
    r_nb, r_b = np.full(T, -np.inf), np.cumsum(logp[:, 0])
    last, psis = -1, []
    for c in labels:
        psi, nb, b = kernels.ctc_prefix_extend(logp, r_nb, r_b, last, np.array([c]), 0, impl=impl)
        psis.append(psi[0])
        r_nb, r_b, last = nb[0], b[0], c
    return r_nb, r_b, psis


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 10_000))
def test_prefix_scoring_reaches_the_full_ctc_likelihood(T, V, seed):
    rng = np.random.default_rng(seed)
    logp = _logp(rng, T, V)
    labels = [int(x) for x in rng.integers(1, V, int(rng.integers(1, 4)))]
    r_nb, r_b, _ = _prefix_scores(logp, labels)
    full = np.logaddexp(r_nb[-1], r_b[-1])
    expect = -ctc_brute_force(logp, labels)
    if np.isinf(expect):
        assert np.isinf(full)
    else:
        assert full == pytest.approx(expect, abs=1e-9)


def test_prefix_probability_splits_over_continuations():
    # P(prefix g) = P(exactly g) + sum_c P(prefix g+c)
    rng = np.random.default_rng(3)
    logp = _logp(rng, 5, 4)
    g = [2]
    r_nb, r_b, psis = _prefix_scores(logp, g)
    ends = np.logaddexp(r_nb[-1], r_b[-1])
    psi, _, _ = kernels.ctc_prefix_extend(logp, r_nb, r_b, g[-1], np.array([1, 2, 3]), 0)
    assert np.logaddexp.reduce(np.append(psi, ends)) == pytest.approx(psis[-1], abs=1e-10)


@pytest.mark.parametrize("name", sorted(IMPLS))
def test_prefix_extend_backends_agree(name):
    rng = np.random.default_rng(9)
    logp = _logp(rng, 6, 4)
    ref = _prefix_scores(logp, [1, 3, 3], impl=IMPLS["python"])
    got = _prefix_scores(logp, [1, 3, 3], impl=IMPLS[name])
    for a, b in zip(ref, got):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_edit_distance_backends_agree():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.integers(0, 4, int(rng.integers(0, 9)))
        b = rng.integers(0, 4, int(rng.integers(0, 9)))
        tables = [np.asarray(kernels.edit_distance_table(a, b, impl=m)) for m in IMPLS.values()]
        for t in tables[1:]:
            np.testing.assert_array_equal(t, tables[0])


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")
