"""Gradient and oracle suites shared by ``factoradapt selfcheck`` and the tests.

Each suite returns a number (worst error) so callers choose the tolerance.
The oracles here are deliberately naive: exhaustive alignment enumeration
for CTC, recursive edit distance, and grid quadrature for the KL divergence.
"""

from __future__ import annotations

import itertools
import math
import time
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .adaptation import (
    HUB,
    LHUC,
    AdaptationMode,
    PriorSpec,
    TransformSet,
    bayesian_objective,
    kl_to_prior,
)
from .model import ConformerASR, ModelConfig, blank_augment

# ------------------------------------------------------------------ primitive gradients


def _p(rng, name, *shape, scale=1.0, offset=0.0):
    return ad.Parameter(name, offset + scale * rng.standard_normal(shape))


def primitive_cases(seed: int = 0):
    """(name, loss_fn, params) for every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a = _p(rng, "a", 3, 4)
    b = _p(rng, "b", 3, 4)
    pos = _p(rng, "pos", 3, 4, scale=0.3, offset=2.0)
    row = _p(rng, "row", 4)
    m1 = _p(rng, "m1", 2, 3, 4)
    m2 = _p(rng, "m2", 4, 5)
    w = _p(rng, "w", 4, 5)
    bias = _p(rng, "bias", 5)
    gamma = _p(rng, "gamma", 4, offset=1.0)
    beta = _p(rng, "beta", 4)
    img = _p(rng, "img", 2, 2, 7, 6)
    kern = _p(rng, "kern", 3, 2, 3, 3)
    kb = _p(rng, "kb", 3)
    q = _p(rng, "q", 2, 3, 4)
    k = _p(rng, "k", 2, 5, 4)
    v = _p(rng, "v", 2, 5, 4)
    table = _p(rng, "table", 6, 3)
    logits = _p(rng, "logits", 5, 3)
    c = rng.standard_normal((3, 4))
    mask = np.where(rng.random((3, 5)) < 0.3, -1e9, 0.0)
    keep_rng_seed = int(rng.integers(1 << 30))

    def weigh(t):
        # a fixed random projection turns any tensor into a scalar with non-trivial upstream gradient
        r = np.random.default_rng(t.data.size).standard_normal(t.shape)
        return ad.tsum(ad.mul(t, r))

    def ctc_case():
        lp = ad.log_softmax(logits.t, axis=-1)
        return ad.ctc_nll(lp, blank_augment([1, 2]))

    return [
        ("add", lambda: weigh(ad.add(a.t, row.t)), [a, row]),
        ("sub", lambda: weigh(ad.sub(a.t, b.t)), [a, b]),
        ("mul", lambda: weigh(ad.mul(a.t, b.t)), [a, b]),
        ("div", lambda: weigh(ad.div(a.t, pos.t)), [a, pos]),
        ("exp", lambda: weigh(ad.exp(a.t)), [a]),
        ("log", lambda: weigh(ad.log(pos.t)), [pos]),
        ("square", lambda: weigh(ad.square(a.t)), [a]),
        ("sigmoid", lambda: weigh(ad.sigmoid(a.t)), [a]),
        ("relu", lambda: weigh(ad.relu(ad.add(a.t, 0.05))), [a]),
        ("swish", lambda: weigh(ad.swish(a.t)), [a]),
        ("tanh", lambda: weigh(ad.tanh(a.t)), [a]),
        ("sum", lambda: weigh(ad.tsum(m1.t, axis=1)), [m1]),
        ("mean", lambda: weigh(ad.mean(m1.t, axis=-1, keepdims=True)), [m1]),
        ("reshape", lambda: weigh(ad.reshape(m1.t, (6, 4))), [m1]),
        ("transpose", lambda: weigh(ad.transpose(m1.t, (2, 0, 1))), [m1]),
        ("getitem", lambda: weigh(m1.t[:, 1:, ::2]), [m1]),
        ("concat", lambda: weigh(ad.concat([a.t, b.t], axis=1)), [a, b]),
        ("stack", lambda: weigh(ad.stack([a.t, b.t], axis=0)), [a, b]),
        ("embedding", lambda: weigh(ad.embedding(table.t, [0, 3, 3, 5])), [table]),
        ("matmul", lambda: weigh(ad.matmul(m1.t, m2.t)), [m1, m2]),
        ("linear", lambda: weigh(ad.linear(m1.t, w.t, bias.t)), [m1, w, bias]),
        ("softmax", lambda: weigh(ad.softmax(a.t, axis=-1)), [a]),
        ("log_softmax", lambda: weigh(ad.log_softmax(a.t, axis=0)), [a]),
        ("layer_norm", lambda: weigh(ad.layer_norm(m1.t, gamma.t, beta.t)), [m1, gamma, beta]),
        ("conv2d", lambda: weigh(ad.conv2d(img.t, kern.t, kb.t, stride=2)), [img, kern, kb]),
        (
            "dropout",
            lambda: weigh(ad.dropout(a.t, 0.3, np.random.default_rng(keep_rng_seed), True)),
            [a],
        ),
        ("attention", lambda: weigh(ad.scaled_dot_attention(q.t, k.t, v.t, mask)), [q, k, v]),
        ("constant-operand", lambda: weigh(ad.mul(ad.add(a.t, c), c)), [a]),
        ("ctc", ctc_case, [logits]),
    ]


def primitive_gradient_suite(seed: int = 0) -> dict[str, float]:
    return {name: ad.finite_difference_check(fn, params) for name, fn, params in primitive_cases(seed)}


# ------------------------------------------------------------------ model gradients

TOY_MODEL = ModelConfig(
    input_dim=8,
    encoder_blocks=2,
    decoder_blocks=1,
    d_model=8,
    heads=2,
    ff_dim=12,
    conv_kernel=3,
    sub_channels=2,
    alphabet="abc",
    dropout=0.0,
    seed=3,
)


def toy_batch(seed: int = 0, T: int = 19, B: int = 2):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, T, TOY_MODEL.input_dim))
    refs = [[1, 2], [3, 1, 1]][:B]
    return x, refs


def model_gradient_check(max_entries: int | None = None, seed: int = 0) -> float:
    """Multitask loss against every canonical parameter of the 2-block toy model."""
    model = ConformerASR(TOY_MODEL)
    x, refs = toy_batch(seed)

    def loss():
        return model.losses(model.conv_subsample(x), refs)[0]

    return ad.finite_difference_check(loss, model.parameters(), max_entries=max_entries, rng=np.random.default_rng(seed))


def bayesian_gradient_check(seed: int = 0) -> float:
    """Bayesian objective against μ and log σ of CFA(HUB, LHUC) transforms under fixed ε."""
    model = ConformerASR(TOY_MODEL)
    x, refs = toy_batch(seed)
    mode = AdaptationMode("cfa", spk_kind=HUB, env_kind=LHUC)
    ts = TransformSet(mode, TOY_MODEL.d_model, variational=True)
    ts.ensure_for([("s1", "e1"), ("s2", "e1")])
    rng = np.random.default_rng(seed)
    for t in ts.transforms.values():
        t.mean.data[:] = 0.3 * rng.standard_normal(t.dim)
        t.log_dev.data[:] = np.log(0.2) + 0.1 * rng.standard_normal(t.dim)
    spk, env = ["s1", "s2"], ["e1", "e1"]
    priors = PriorSpec(hub=(0.0, 0.5))
    h = model.conv_subsample(x).data

    def objective():
        data = lambda factory: model.losses(ad.Tensor(h), refs, factory(spk, env))[0]
        return bayesian_objective(data, ts, priors, samples=2, kl_weight=0.05, rng=np.random.default_rng(seed + 7))[0]

    return ad.finite_difference_check(objective, ts.parameters())


# ------------------------------------------------------------------ CTC oracle


def ctc_brute_force(logp: np.ndarray, labels) -> float:
    """-log Σ over all length-T paths that collapse to ``labels``."""
    T, V = logp.shape
    labels = tuple(labels)
    total = -np.inf
    for path in itertools.product(range(V), repeat=T):
        out = []
        prev = None
        for s in path:
            if s != 0 and s != prev:
                out.append(s)
            prev = s
        if tuple(out) == labels:
            total = np.logaddexp(total, sum(logp[t, s] for t, s in enumerate(path)))
    return -total


def ctc_oracle_suite(n_tables: int = 200, seed: int = 0) -> float:
    """Worst |ctc_nll - brute force| over random tables with T ≤ 6, V ≤ 3 (incl. blank), L ≤ 3."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    while done < n_tables:
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 4))
        L = int(rng.integers(0, 4))
        labels = [int(x) for x in rng.integers(1, V, L)]
        need = len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))
        if need > T:
            continue
        z = rng.standard_normal((T, V)) * 2
        logp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        ours = ad.ctc_nll(ad.Tensor(logp), blank_augment(labels)).item()
        worst = max(worst, abs(ours - ctc_brute_force(logp, labels)))
        done += 1
    return worst


# ------------------------------------------------------------------ KL oracle


def kl_quadrature_grid(mq, sq, mp, sp, n: int = 200001) -> float:
    """∫ q log(q/p) on a ±12σ_q grid (Simpson's rule)."""
    x = np.linspace(mq - 12 * sq, mq + 12 * sq, n)
    logq = -0.5 * ((x - mq) / sq) ** 2 - math.log(sq) - 0.5 * math.log(2 * math.pi)
    logp = -0.5 * ((x - mp) / sp) ** 2 - math.log(sp) - 0.5 * math.log(2 * math.pi)
    f = np.exp(logq) * (logq - logp)
    h = x[1] - x[0]
    return float(h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum()))


def random_gaussian_pairs(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield (rng.uniform(-2, 2), rng.uniform(0.2, 2.0), rng.uniform(-2, 2), rng.uniform(0.2, 2.0))


def kl_oracle_suite(n: int = 50, seed: int = 0, quad=kl_quadrature_grid) -> tuple[float, float]:
    """(worst |closed form - quadrature|, worst |KL(q, q)|)."""
    worst = 0.0
    self_kl = 0.0
    for mq, sq, mp, sp in random_gaussian_pairs(n, seed):
        closed = kl_to_prior(np.array([mq]), np.array([sq]), mp, sp).item()
        worst = max(worst, abs(closed - quad(mq, sq, mp, sp)))
        self_kl = max(self_kl, abs(kl_to_prior(np.array([mq]), np.array([sq]), mq, sq).item()))
    return worst, self_kl


# ------------------------------------------------------------------ edit distance oracle


def edit_distance_brute(a, b) -> int:
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


def random_token_pairs(n: int, seed: int = 0, vocab: int = 4, max_len: int = 8):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        a = list(rng.integers(0, vocab, int(rng.integers(0, max_len + 1))))
        b = list(rng.integers(0, vocab, int(rng.integers(0, max_len + 1))))
        yield a, b


def edit_distance_suite(n: int = 1000, seed: int = 0) -> int:
    """Number of pairs where edit_align disagrees with the recursive oracle."""
    from .scoring import edit_align

    bad = 0
    for a, b in random_token_pairs(n, seed):
        al = edit_align(a, b)
        ok = al.errors == edit_distance_brute(a, b)
        ok &= [p[0] for p in al.pairs if p[0] is not None] == a
        ok &= [p[1] for p in al.pairs if p[1] is not None] == b
        bad += not ok
    return bad


# ------------------------------------------------------------------ runner


def run_all(quick: bool = True):
    """[(suite name, passed, detail)] for the CLI."""
    out = []

    def timed(name, fn, ok):
        t0 = time.perf_counter()
        try:
            val = fn()
            passed = ok(val)
            detail = f"value={val!r}"
        except Exception as exc:  # a crashing suite is a failing suite
            passed, detail = False, f"error={exc!r}"
        out.append((name, passed, f"{detail} time={time.perf_counter() - t0:.1f}s"))

    timed("gradient.primitives", lambda: max(primitive_gradient_suite().values()), lambda v: v <= 1e-4)
    timed("gradient.model", lambda: model_gradient_check(max_entries=20 if quick else None), lambda v: v <= 1e-4)
    timed("gradient.bayesian", bayesian_gradient_check, lambda v: v <= 1e-4)
    timed("oracle.ctc", lambda: ctc_oracle_suite(40 if quick else 200), lambda v: v <= 1e-9)
    timed("oracle.kl", lambda: kl_oracle_suite(10 if quick else 50), lambda v: v[0] <= 1e-6 and v[1] <= 1e-12)
    timed("oracle.edit_distance", lambda: edit_distance_suite(200 if quick else 1000), lambda v: v == 0)
    return out
