# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CTC forward/backward, CTC prefix scoring, edit distance.

Every function here has a drop-in twin in ``_pykernels`` with the same
signature and return values.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY

cnp.import_array()


cdef inline double _lse2(double a, double b) nogil:
    cdef double m
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    m = a if a > b else b
    return m + log(exp(a - m) + exp(b - m))


cdef inline double _lse3(double a, double b, double c) nogil:
    return _lse2(_lse2(a, b), c)


def ctc_alpha_beta(double[:, ::1] logp, long[::1] ext):
    """Log-space CTC forward and backward lattices.

    ``logp`` is (T, V) log posteriors, ``ext`` the blank-augmented label
    sequence of length 2L+1. Both lattices include the emission at ``t``.
    Returns (alpha, beta, log_likelihood).
    """
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t t, s
    cdef double a, b, c, em
    alpha_np = np.full((T, S), -np.inf)
    beta_np = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_np
    cdef double[:, ::1] beta = beta_np

    with nogil:
        alpha[0, 0] = logp[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                b = alpha[t - 1, s - 1] if s >= 1 else -INFINITY
                c = -INFINITY
                if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                    c = alpha[t - 1, s - 2]
                em = logp[t, ext[s]]
                a = _lse3(a, b, c)
                alpha[t, s] = a + em if a != -INFINITY else -INFINITY

        beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                a = beta[t + 1, s]
                b = beta[t + 1, s + 1] if s + 1 < S else -INFINITY
                c = -INFINITY
                if s + 2 < S and ext[s] != 0 and ext[s] != ext[s + 2]:
                    c = beta[t + 1, s + 2]
                em = logp[t, ext[s]]
                a = _lse3(a, b, c)
                beta[t, s] = a + em if a != -INFINITY else -INFINITY

    if S > 1:
        ll = _lse2(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    else:
        ll = alpha[T - 1, S - 1]
    return alpha_np, beta_np, ll


def ctc_prefix_extend(double[:, ::1] logp, double[::1] r_nb, double[::1] r_b,
                      long last, long[::1] cands, long blank):
    """Extend one CTC prefix by each candidate token.

    ``r_nb``/``r_b`` are the prefix's forward variables (ending in a
    non-blank / blank) per frame. Returns (prefix_scores, new_r_nb, new_r_b)
    where row ``i`` belongs to ``cands[i]``.
    """
    cdef Py_ssize_t T = logp.shape[0]
    cdef Py_ssize_t C = cands.shape[0]
    cdef Py_ssize_t i, t
    cdef long c
    cdef double phi, psi, prev_total
    out_nb_np = np.full((C, T), -np.inf)
    out_b_np = np.full((C, T), -np.inf)
    psi_np = np.full(C, -np.inf)
    cdef double[:, ::1] out_nb = out_nb_np
    cdef double[:, ::1] out_b = out_b_np
    cdef double[::1] score = psi_np

    with nogil:
        for i in range(C):
            c = cands[i]
            # empty prefix: r_b carries the all-blank path
            if last < 0:
                out_nb[i, 0] = logp[0, c]
            psi = out_nb[i, 0]
            for t in range(1, T):
                if c == last:
                    phi = r_b[t - 1]
                else:
                    phi = _lse2(r_nb[t - 1], r_b[t - 1])
                out_nb[i, t] = _lse2(out_nb[i, t - 1], phi) + logp[t, c]
                out_b[i, t] = _lse2(out_nb[i, t - 1], out_b[i, t - 1]) + logp[t, blank]
                psi = _lse2(psi, phi + logp[t, c])
            score[i] = psi
    return psi_np, out_nb_np, out_b_np


def edit_distance_table(long[::1] ref, long[::1] hyp):
    """Full (len(ref)+1, len(hyp)+1) unit-cost Levenshtein table."""
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long best, cand
    table_np = np.zeros((n + 1, m + 1), dtype=np.int64)
    cdef long[:, ::1] d = table_np
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                best = d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1)
                cand = d[i - 1, j] + 1
                if cand < best:
                    best = cand
                cand = d[i, j - 1] + 1
                if cand < best:
                    best = cand
                d[i, j] = best
    return table_np
