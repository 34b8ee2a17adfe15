"""Pure numpy/Python versions of the compiled kernels in ``_ckernels``."""

import numpy as np


def _lse(*xs):
    return np.logaddexp.reduce(np.stack(xs), axis=0)


def ctc_alpha_beta(logp, ext):
    T = logp.shape[0]
    S = ext.shape[0]
    em = logp[:, ext]  # (T, S)
    # skip transitions s-2 -> s only onto non-blank labels that differ from s-2
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    alpha = np.full((T, S), -np.inf)
    beta = np.full((T, S), -np.inf)
    alpha[0, 0] = em[0, 0]
    if S > 1:
        alpha[0, 1] = em[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            one = np.concatenate(([-np.inf], prev[:-1]))
            two = np.concatenate(([-np.inf, -np.inf], prev[:-2]))[:S]
            two = np.where(skip, two, -np.inf)
            alpha[t] = _lse(prev, one, two) + em[t]

        skip_b = np.zeros(S, dtype=bool)
        if S > 2:
            skip_b[:-2] = (ext[:-2] != 0) & (ext[:-2] != ext[2:])
        beta[T - 1, S - 1] = em[T - 1, S - 1]
        if S > 1:
            beta[T - 1, S - 2] = em[T - 1, S - 2]
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            one = np.concatenate((nxt[1:], [-np.inf]))
            two = np.concatenate((nxt[2:], [-np.inf, -np.inf]))[:S]
            two = np.where(skip_b, two, -np.inf)
            beta[t] = _lse(nxt, one, two) + em[t]
    if S > 1:
        ll = float(np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]))
    else:
        ll = float(alpha[T - 1, S - 1])
    return alpha, beta, ll


def ctc_prefix_extend(logp, r_nb, r_b, last, cands, blank):
    T = logp.shape[0]
    C = cands.shape[0]
    out_nb = np.full((C, T), -np.inf)
    out_b = np.full((C, T), -np.inf)
    xc = logp[:, cands].T  # (C, T)
    xb = logp[:, blank]
    if last < 0:
        out_nb[:, 0] = xc[:, 0]
    psi = out_nb[:, 0].copy()
    same = cands == last
    total = np.logaddexp(r_nb, r_b)
    for t in range(1, T):
        phi = np.where(same, r_b[t - 1], total[t - 1])
        out_nb[:, t] = np.logaddexp(out_nb[:, t - 1], phi) + xc[:, t]
        out_b[:, t] = np.logaddexp(out_nb[:, t - 1], out_b[:, t - 1]) + xb[t]
        psi = np.logaddexp(psi, phi + xc[:, t])
    return psi, out_nb, out_b


def edit_distance_table(ref, hyp):
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, up = d[i], d[i - 1]
        for j in range(1, m + 1):
            best = up[j - 1] + (0 if ri == hyp[j - 1] else 1)
            if up[j] + 1 < best:
                best = up[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
    return np.array(d, dtype=np.int64)
