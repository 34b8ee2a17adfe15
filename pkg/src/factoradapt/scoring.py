"""Edit-distance alignment and (token/word) error rates with grouped breakdowns."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import kernels

# backtrace preference when several moves are optimal
SUB, DEL, INS, OK = "S", "D", "I", "="


@dataclass
class AlignmentResult:
    substitutions: int
    deletions: int
    insertions: int
    pairs: list[tuple[object, object, str]] = field(default_factory=list)
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def _intern(ref, hyp):
    table: dict = {}
    r = np.array([table.setdefault(x, len(table)) for x in ref], dtype=np.int64)
    h = np.array([table.setdefault(x, len(table)) for x in hyp], dtype=np.int64)
    return r, h


def edit_align(ref, hyp) -> AlignmentResult:
    """Minimum unit-cost alignment of two token sequences.

    When several moves are optimal during the backtrace, a diagonal move
    (match/substitution) is preferred over a deletion, and a deletion over an
    insertion.
    """
    ref, hyp = list(ref), list(hyp)
    r, h = _intern(ref, hyp)
    d = kernels.edit_distance_table(r, h)
    i, j = len(ref), len(hyp)
    pairs = []
    s = de = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            tag = OK if r[i - 1] == h[j - 1] else SUB
            s += tag == SUB
            pairs.append((ref[i - 1], hyp[j - 1], tag))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            de += 1
            pairs.append((ref[i - 1], None, DEL))
            i -= 1
        else:
            ins += 1
            pairs.append((None, hyp[j - 1], INS))
            j -= 1
    pairs.reverse()
    return AlignmentResult(s, de, ins, pairs, len(ref))


def wer(refs, hyps) -> float:
    """100 * (S + D + I) / N over a corpus of (ref, hyp) token sequences."""
    errors = n = 0
    for ref, hyp in zip(refs, hyps, strict=True):
        errors += edit_align(ref, hyp).errors
        n += len(ref)
    if n == 0:
        raise ValueError("wer: total reference length is zero")
    return 100.0 * errors / n


@dataclass
class UtteranceScore:
    utt_id: str
    errors: int
    ref_len: int
    alignment: AlignmentResult
    attrs: dict = field(default_factory=dict)


@dataclass
class ScoreReport:
    utterances: list[UtteranceScore]

    @property
    def errors(self) -> int:
        return sum(u.errors for u in self.utterances)

    @property
    def ref_tokens(self) -> int:
        return sum(u.ref_len for u in self.utterances)

    @property
    def wer(self) -> float:
        if self.ref_tokens == 0:
            raise ValueError("wer: total reference length is zero")
        return 100.0 * self.errors / self.ref_tokens

    def group_by(self, key: str) -> dict[str, "ScoreReport"]:
        groups = defaultdict(list)
        for u in self.utterances:
            groups[str(u.attrs.get(key, ""))].append(u)
        return {k: ScoreReport(v) for k, v in sorted(groups.items())}

    def counts(self) -> tuple[int, int, int]:
        a = [u.alignment for u in self.utterances]
        return sum(x.substitutions for x in a), sum(x.deletions for x in a), sum(x.insertions for x in a)


def score_corpus(refs: dict[str, list], hyps: dict[str, list], attrs: dict[str, dict] | None = None) -> ScoreReport:
    """Score every utterance in ``refs``; a missing hypothesis counts as empty."""
    attrs = attrs or {}
    out = []
    for utt, ref in refs.items():
        al = edit_align(ref, hyps.get(utt, []))
        out.append(UtteranceScore(utt, al.errors, len(ref), al, attrs.get(utt, {})))
    return ScoreReport(out)


def bootstrap_interval(report: ScoreReport, n_boot: int = 1000, alpha: float = 0.05, seed: int = 0):
    """Utterance-level bootstrap percentile interval of the corpus error rate.

    A plain resampling interval; it is not the matched-pair (MAPSSWE) test.
    """
    e = np.array([u.errors for u in report.utterances], dtype=np.float64)
    n = np.array([u.ref_len for u in report.utterances], dtype=np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, e.size, size=(n_boot, e.size))
    rates = 100.0 * e[idx].sum(1) / np.maximum(n[idx].sum(1), 1)
    return float(np.quantile(rates, alpha / 2)), float(np.quantile(rates, 1 - alpha / 2))


def format_report(report: ScoreReport, group_keys=()) -> tuple[str, str]:
    """(aligned-column text, tab-delimited table) for the overall and grouped scores."""
    rows = [("overall", "all", report)]
    for key in group_keys:
        for val, sub in report.group_by(key).items():
            rows.append((key, val, sub))
    header = ("group", "value", "utts", "ref", "sub", "del", "ins", "err", "wer%")
    table = []
    for key, val, sub in rows:
        s, d, i = sub.counts()
        wer_s = f"{sub.wer:.2f}" if sub.ref_tokens else "nan"
        table.append((key, val, str(len(sub.utterances)), str(sub.ref_tokens), str(s), str(d), str(i), str(sub.errors), wer_s))
    widths = [max(len(r[c]) for r in [header, *table]) for c in range(len(header))]
    text = "\n".join("  ".join(x.ljust(w) for x, w in zip(r, widths)) for r in [header, *table])
    tsv = "\n".join("\t".join(r) for r in [header, *table])
    return text + "\n", tsv + "\n"
