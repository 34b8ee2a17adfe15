"""Multi-seed direction-of-effect studies on the synthetic corpus.

One canonical model is trained per seed. Its greedy first pass supplies the
pseudo labels for every adapted system, so the systems differ only in how
the transforms are parameterised and estimated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import HUB, AdaptationMode
from .config import DataConfig
from .model import ModelConfig
from .pipelines import (
    EstimationConfig,
    TrainConfig,
    adaptive_train,
    build_condition_cache,
    decode_all,
    generate_synthetic_corpus,
    model_config_for,
    rapid_adapt_from_cache,
    test_time_adapt,
    token_error_rate,
)

CFA_HUB = AdaptationMode("cfa", spk_kind=HUB, env_kind=HUB)

# name -> (mode, bayesian)
ADAPTED_SYSTEMS = {
    "speaker": (AdaptationMode("speaker"), False),
    "lfa": (AdaptationMode("lfa", beta=0.7), False),
    "cfa_hub_hub": (CFA_HUB, False),
    "bayes_cfa_hub_hub": (CFA_HUB, True),
}
RAPID_SYSTEMS = ("matched", "mm-env", "mm-both")
MARGIN = 0.5


@dataclass
class StudyConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data: DataConfig = field(default_factory=DataConfig)
    model_overrides: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    systems: tuple[str, ...] = tuple(ADAPTED_SYSTEMS)
    rapid: bool = True


@dataclass
class SeedResult:
    seed: int
    ter: dict[str, float]
    seconds: float
    checksum_stable: bool
    cpu_seconds: float = 0.0


@dataclass
class StudyResult:
    runs: list[SeedResult]

    def mean(self, system: str) -> float:
        return float(np.mean([r.ter[system] for r in self.runs]))

    def systems(self) -> list[str]:
        return list(self.runs[0].ter) if self.runs else []

    @property
    def seconds(self) -> float:
        return sum(r.seconds for r in self.runs)

    @property
    def cpu_seconds(self) -> float:
        return sum(r.cpu_seconds for r in self.runs)

    def table(self) -> str:
        names = self.systems()
        head = "seed  " + "  ".join(f"{n:>17s}" for n in names)
        rows = [head]
        for r in self.runs:
            rows.append(f"{r.seed:<4d}  " + "  ".join(f"{r.ter[n]:17.2f}" for n in names))
        rows.append("mean  " + "  ".join(f"{self.mean(n):17.2f}" for n in names))
        return "\n".join(rows)


def _ter(utts, hyps, cfg: ModelConfig) -> float:
    return token_error_rate(utts, hyps, cfg).wer


def run_seed(seed: int, cfg: StudyConfig) -> SeedResult:
    t0, c0 = time.perf_counter(), time.process_time()
    train_spec = cfg.data.train_spec(seed)
    test_spec = cfg.data.test_spec(seed)
    train = generate_synthetic_corpus(train_spec, "tr")
    test = generate_synthetic_corpus(test_spec, "te").utterances()
    model_cfg = model_config_for(train_spec, seed=seed, **cfg.model_overrides)
    model, _, _ = adaptive_train(train, model_cfg, replace(cfg.train, seed=seed))
    checksum = model.checksum()

    first = decode_all(model, test)
    ter = {"baseline": _ter(test, first, model_cfg)}
    for name in cfg.systems:
        mode, bayesian = ADAPTED_SYSTEMS[name]
        est = replace(cfg.estimation, bayesian=bayesian, seed=seed)
        res = test_time_adapt(model, test, mode, est, first_pass=first)
        ter[name] = _ter(test, res.adapted, model_cfg)
    if cfg.rapid:
        labels = {k: h.tokens for k, h in first.items()}
        cache = build_condition_cache(model, test, labels, CFA_HUB, replace(cfg.estimation, bayesian=False, seed=seed))
        for pairing in RAPID_SYSTEMS:
            hyps = rapid_adapt_from_cache(model, cache, test, pairing, seed)
            ter[f"rapid_{pairing}"] = _ter(test, hyps, model_cfg)
    stable = model.checksum() == checksum
    return SeedResult(seed, ter, time.perf_counter() - t0, stable, time.process_time() - c0)


def run_study(cfg: StudyConfig = StudyConfig(), log=None) -> StudyResult:
    runs = []
    for seed in cfg.seeds:
        r = run_seed(seed, cfg)
        runs.append(r)
        if log is not None:
            log(f"seed {seed}: " + ", ".join(f"{k}={v:.2f}" for k, v in r.ter.items()) + f" ({r.cpu_seconds:.0f}s cpu)")
    return StudyResult(runs)


def direction_checks(res: StudyResult, margin: float = MARGIN) -> list[tuple[str, bool, str]]:
    """Orderings of the adapted systems on the seed means."""
    m = res.mean
    best_name = min(("lfa", "cfa_hub_hub"), key=m)
    return [
        (
            "speaker-only beats baseline",
            m("speaker") <= m("baseline") - margin,
            f"{m('speaker'):.2f} vs {m('baseline'):.2f}",
        ),
        (
            "best factorised beats speaker-only",
            m(best_name) <= m("speaker") - margin,
            f"{best_name} {m(best_name):.2f} vs {m('speaker'):.2f}",
        ),
        (
            "bayesian cfa no worse than deterministic",
            m("bayes_cfa_hub_hub") <= m("cfa_hub_hub"),
            f"{m('bayes_cfa_hub_hub'):.2f} vs {m('cfa_hub_hub'):.2f}",
        ),
    ]


def rapid_checks(res: StudyResult) -> list[tuple[str, bool, str]]:
    m = res.mean
    a, b, c, base = m("rapid_matched"), m("rapid_mm-env"), m("rapid_mm-both"), m("baseline")
    return [
        ("both-mismatched beats baseline", c < base, f"{c:.2f} vs {base:.2f}"),
        ("matched < mismatched-env < both-mismatched", a < b < c, f"{a:.2f} < {b:.2f} < {c:.2f}"),
    ]
