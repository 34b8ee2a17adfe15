"""Adaptive training, transform estimation and test-time adaptation.

Also holds the synthetic speaker x environment corpus used for desk-scale
experiments: every utterance is ``base ⊙ speaker_tilt + env_pattern + noise``
so speaker and environment effects are independent by construction.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adaptation import (
    ENV,
    SPEAKER,
    AdaptationMode,
    FactorTransform,
    PriorSpec,
    TransformSet,
    bayesian_objective,
)
from .features import FeatureSequence, spec_augment_mask
from .model import ConformerASR, Hypothesis, ModelConfig, ctc_min_frames, encode_text, subsampled_length
from .optim import Adam
from .scoring import score_corpus

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ synthetic corpus


@dataclass
class SyntheticTaskSpec:
    """Factorised synthetic task.

    Speakers and environments are identified by integer index: the effect of
    speaker ``k`` is the same in every corpus generated with the same
    ``seed``, so training and test corpora can share or exclude conditions.
    """

    n_speakers: int = 8
    n_envs: int = 4
    utts_per_cell: int = 8
    alphabet: str = "abcdefgh"
    feat_dim: int = 24
    frames: int = 48
    min_tokens: int = 3
    max_tokens: int = 5
    token_frames: tuple[int, int] = (7, 9)
    speaker_offset: int = 0
    env_offset: int = 0
    speaker_scale: float = 0.5
    env_scale: float = 0.8
    noise_range: tuple[float, float] = (0.15, 0.45)
    frame_jitter: float = 0.25
    instance_jitter: float = 0.0
    env_gain: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    corpus_seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.n_envs < 1:
            raise ValueError("need at least one speaker and one environment")
        if len(self.alphabet) < 2 or len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("synthetic alphabet needs at least 2 distinct tokens")
        if self.max_tokens * self.token_frames[1] > self.frames:
            raise ValueError("utterance frames too short for the longest token string")


def _smooth_curve(rng, n, scale, width=3.0):
    x = rng.standard_normal(n + 8)
    k = np.exp(-0.5 * (np.arange(-6, 7) / width) ** 2)
    y = np.convolve(x, k / k.sum(), mode="same")[4 : 4 + n]
    return scale * y / (y.std() + 1e-12)


def speaker_effect(spec: SyntheticTaskSpec, k: int) -> np.ndarray:
    """Per-bin multiplicative tilt of speaker ``k``."""
    rng = np.random.default_rng([spec.seed, 1, k])
    slope = rng.uniform(-1, 1) * np.linspace(-1, 1, spec.feat_dim)
    return np.exp(spec.speaker_scale * slope + _smooth_curve(rng, spec.feat_dim, spec.speaker_scale))


def env_effect(spec: SyntheticTaskSpec, k: int) -> tuple[np.ndarray, float, float]:
    """(additive pattern, noise level, contrast gain) of environment ``k``."""
    rng = np.random.default_rng([spec.seed, 2, k])
    pattern = _smooth_curve(rng, spec.feat_dim, spec.env_scale) + rng.uniform(-0.5, 0.5) * spec.env_scale
    noise = float(rng.uniform(*spec.noise_range))
    return pattern, noise, float(rng.uniform(*spec.env_gain))


def token_prototypes(spec: SyntheticTaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    protos = np.stack([1.0 + _smooth_curve(rng, spec.feat_dim, 0.8, width=1.5) for _ in spec.alphabet])
    return protos


SILENCE_LEVEL = 0.2


def speaker_name(k: int) -> str:
    return f"spk{k:03d}"


def env_name(k: int) -> str:
    return f"env{k:03d}"


def render_utterance(spec, text, spk_k, env_k, rng, protos=None):
    """Features of one utterance plus the noise-free base pattern."""
    protos = token_prototypes(spec) if protos is None else protos
    base = np.full((spec.frames, spec.feat_dim), SILENCE_LEVEL)
    durs = rng.integers(spec.token_frames[0], spec.token_frames[1] + 1, size=len(text))
    start = rng.integers(0, spec.frames - durs.sum() + 1)
    for ch, d in zip(text, durs):
        p = protos[spec.alphabet.index(ch)]
        ramp = 1.0 + spec.frame_jitter * rng.standard_normal((d, 1))
        if spec.instance_jitter:
            p = p + _smooth_curve(rng, spec.feat_dim, spec.instance_jitter, width=1.5)
        base[start : start + d] = p * ramp
        start += d
    tilt = speaker_effect(spec, spk_k)
    pattern, noise, gain = env_effect(spec, env_k)
    feats = gain * base * tilt + pattern + noise * rng.standard_normal(base.shape)
    return feats, base


class AdaptationDataset:
    """Utterances partitioned into (speaker, environment) cells."""

    def __init__(self, utterances: list[FeatureSequence] = ()):
        self.cells: dict[tuple[str, str], list[FeatureSequence]] = defaultdict(list)
        self._ids: set[str] = set()
        for u in utterances:
            self.add(u)

    def add(self, u: FeatureSequence):
        if u.utterance_id in self._ids:
            raise ValueError(f"duplicate utterance id {u.utterance_id}")
        self._ids.add(u.utterance_id)
        self.cells[(u.speaker_id, u.env_id)].append(u)

    def __len__(self):
        return len(self._ids)

    def utterances(self) -> list[FeatureSequence]:
        return [u for k in sorted(self.cells) for u in self.cells[k]]

    def speakers(self) -> list[str]:
        return sorted({s for s, _ in self.cells})

    def envs(self) -> list[str]:
        return sorted({e for _, e in self.cells})

    def cell(self, spk, env) -> list[FeatureSequence]:
        return list(self.cells.get((spk, env), []))

    def env_union(self, env) -> list[FeatureSequence]:
        return [u for (s, e), us in sorted(self.cells.items()) if e == env for u in us]

    def speaker_union(self, spk) -> list[FeatureSequence]:
        return [u for (s, e), us in sorted(self.cells.items()) if s == spk for u in us]

    def union(self, spk, env) -> list[FeatureSequence]:
        """All data of environment ``env`` together with all data of speaker ``spk``."""
        seen = set()
        out = []
        for u in self.env_union(env) + self.speaker_union(spk):
            if u.utterance_id not in seen:
                seen.add(u.utterance_id)
                out.append(u)
        return out

    def subset(self, pred) -> "AdaptationDataset":
        return AdaptationDataset([u for u in self.utterances() if pred(u)])


def generate_synthetic_corpus(spec: SyntheticTaskSpec, prefix: str = "utt") -> AdaptationDataset:
    rng = np.random.default_rng([spec.seed, 3, spec.corpus_seed, spec.speaker_offset, spec.env_offset])
    protos = token_prototypes(spec)
    ds = AdaptationDataset()
    for si in range(spec.n_speakers):
        sk = spec.speaker_offset + si
        for ei in range(spec.n_envs):
            ek = spec.env_offset + ei
            for u in range(spec.utts_per_cell):
                L = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
                text = "".join(spec.alphabet[i] for i in rng.integers(0, len(spec.alphabet), L))
                feats, _ = render_utterance(spec, text, sk, ek, rng, protos)
                uid = f"{prefix}-{speaker_name(sk)}-{env_name(ek)}-{u:03d}"
                ds.add(FeatureSequence(feats, speaker_name(sk), env_name(ek), uid, text, {"speaker_k": sk, "env_k": ek}))
    return ds


# ------------------------------------------------------------------ batching


def make_batches(utts: list[FeatureSequence], batch_size: int, rng: np.random.Generator | None = None):
    """Equal-length batches (utterances are grouped by frame count)."""
    by_len = defaultdict(list)
    for u in utts:
        by_len[u.num_frames].append(u)
    batches = []
    for T in sorted(by_len):
        group = list(by_len[T])
        if rng is not None:
            order = rng.permutation(len(group))
            group = [group[i] for i in order]
        batches += [group[i : i + batch_size] for i in range(0, len(group), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


def token_count(labels: dict[str, list[int]], utts) -> int:
    return sum(len(labels[u.utterance_id]) + 1 for u in utts)


def reference_labels(utts, cfg: ModelConfig) -> dict[str, list[int]]:
    out = {}
    for u in utts:
        if u.transcript is None:
            raise ValueError(f"{u.utterance_id}: no transcript")
        out[u.utterance_id] = encode_text(u.transcript, cfg)
    return out


# ------------------------------------------------------------------ adaptive training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    schedule: str = "fixed"
    warmup: int = 200
    spec_augment: bool = True
    time_masks: int = 1
    time_width: int = 4
    freq_masks: int = 1
    freq_width: int = 3
    seed: int = 0


def model_config_for(spec: SyntheticTaskSpec, **overrides) -> ModelConfig:
    kw = dict(input_dim=spec.feat_dim, alphabet=spec.alphabet)
    kw.update(overrides)
    return ModelConfig(**kw)


def adaptive_train(
    dataset: AdaptationDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig = TrainConfig(),
    mode: AdaptationMode | None = None,
):
    """Train canonical parameters, jointly with one SD/ED transform per training owner.

    With ``mode=None`` this is plain (un-adapted) training. Returns
    (model, transforms or None, per-epoch mean losses).
    """
    rng = np.random.default_rng([train_cfg.seed, 11])
    model = ConformerASR(model_cfg)
    utts = dataset.utterances()
    labels = reference_labels(utts, model_cfg)
    transforms = None
    params = model.parameters()
    if mode is not None:
        transforms = TransformSet(mode, model_cfg.d_model)
        transforms.ensure_for(dataset.cells.keys())
        params = params + transforms.parameters()
    known_spk, known_env = set(dataset.speakers()), set(dataset.envs())
    opt = Adam(params, lr=train_cfg.lr, schedule=train_cfg.schedule, d_model=model_cfg.d_model, warmup=train_cfg.warmup)
    history = []
    model.training = True
    try:
        for epoch in range(train_cfg.epochs):
            total, count = 0.0, 0
            for batch in make_batches(utts, train_cfg.batch_size, rng):
                for u in batch:
                    if u.speaker_id not in known_spk or u.env_id not in known_env:
                        raise ValueError(f"{u.utterance_id}: speaker/env not in the training id set")
                x = np.stack([u.frames for u in batch])
                if train_cfg.spec_augment:
                    x = np.stack(
                        [
                            spec_augment_mask(f, train_cfg.time_masks, train_cfg.time_width, train_cfg.freq_masks, train_cfg.freq_width, rng)
                            for f in x
                        ]
                    )
                refs = [labels[u.utterance_id] for u in batch]
                adapter = None
                if transforms is not None:
                    adapter = transforms.adapter([u.speaker_id for u in batch], [u.env_id for u in batch])
                opt.zero_grad()
                with ad.Tape():
                    loss, _, _ = model.losses(model.conv_subsample(x), refs, adapter)
                ad.backward(loss)
                opt.step()
                total += loss.item() * len(batch)
                count += len(batch)
            history.append(total / count)
            log.debug("epoch %d loss %.4f", epoch, history[-1])
    finally:
        model.training = False
    if transforms is not None:
        transforms.meta.update({"corpus": "train", "epochs": str(train_cfg.epochs), "objective": repr(history[-1])})
    return model, transforms, history


def evaluate_loss(model: ConformerASR, utts, labels, transforms: TransformSet | None = None, batch_size=64) -> float:
    total, count = 0.0, 0
    with ad.no_grad():
        for batch in make_batches(utts, batch_size):
            adapter = None
            if transforms is not None:
                adapter = transforms.adapter([u.speaker_id for u in batch], [u.env_id for u in batch])
            loss, _, _ = model.losses(model.conv_subsample(np.stack([u.frames for u in batch])), [labels[u.utterance_id] for u in batch], adapter)
            total += loss.item() * len(batch)
            count += len(batch)
    return total / count


# ------------------------------------------------------------------ decoding


def decode_all(
    model: ConformerASR,
    utts,
    transforms: TransformSet | None = None,
    beam: int = 1,
    lam: float | None = None,
    batch_size: int = 64,
    pairing: dict[str, tuple[str, str]] | None = None,
) -> dict[str, Hypothesis]:
    """Decode every utterance; ``pairing`` overrides the (speaker, env) transform owners per utterance."""
    out = {}
    with ad.no_grad():
        for batch in make_batches(utts, batch_size):
            x = np.stack([u.frames for u in batch])
            adapter = None
            if transforms is not None:
                owners = [pairing[u.utterance_id] if pairing else (u.speaker_id, u.env_id) for u in batch]
                adapter = transforms.adapter([o[0] for o in owners], [o[1] for o in owners])
            enc = model.encode(model.conv_subsample(x), adapter)
            for b, u in enumerate(batch):
                out[u.utterance_id] = model.decode(enc[b : b + 1], beam=beam, lam=lam)
    return out


def token_error_rate(utts, hyps: dict[str, Hypothesis], cfg: ModelConfig, by: str | None = None):
    refs = {u.utterance_id: encode_text(u.transcript, cfg) for u in utts}
    attrs = {u.utterance_id: {"speaker": u.speaker_id, "env": u.env_id, **u.meta} for u in utts}
    report = score_corpus(refs, {k: h.tokens for k, h in hyps.items()}, attrs)
    return report if by is None else report.group_by(by)


# ------------------------------------------------------------------ transform estimation


@dataclass
class EstimationConfig:
    epochs: int = 3
    steps_per_epoch: int = 10
    bayesian: bool = False
    samples: int = 1
    priors: PriorSpec = field(default_factory=PriorSpec)
    kl_weight: float | None = None  # None: 1 / number of adaptation tokens
    optimizer: str = "gd"  # "gd": full-batch backtracking descent; "adam": minibatch Adam
    init_step: float = 1.0
    lr: float = 0.02
    batch_size: int = 64
    schedule: str = "joint"  # or "alternating"
    objective: str = "joint"  # or "marginal"
    seed: int = 0


class _Problem:
    """Frozen-model objective over fixed subsampling outputs."""

    def __init__(self, model, utts, labels, transforms, cfg: EstimationConfig, batch_size=64):
        self.model = model
        self.transforms = transforms
        self.cfg = cfg
        self.batches = []
        with ad.no_grad():
            for batch in make_batches(utts, batch_size):
                h = model.conv_subsample(np.stack([u.frames for u in batch])).data
                self.batches.append(
                    (h, [labels[u.utterance_id] for u in batch], [u.speaker_id for u in batch], [u.env_id for u in batch])
                )
        self.n = len(utts)
        self.tokens = token_count(labels, utts)
        self.kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / max(self.tokens, 1)

    def _data_loss(self, make_adapter, batches=None):
        batches = self.batches if batches is None else batches
        n = sum(len(b[1]) for b in batches)
        total = None
        for h, refs, spk, env in batches:
            loss, _, _ = self.model.losses(ad.Tensor(h), refs, make_adapter(spk, env))
            term = ad.mul(loss, len(refs) / n)
            total = term if total is None else ad.add(total, term)
        return total

    def objective(self, rng_seed=None, batches=None, marginal_view=None):
        """Objective tensor; variational transforms use draws from ``rng_seed``."""
        ts = self.transforms if marginal_view is None else marginal_view
        if not self.cfg.bayesian:
            return self._data_loss(lambda s, e: ts.adapter(s, e), batches)
        obj, _, _ = bayesian_objective(
            lambda factory: self._data_loss(factory, batches),
            ts,
            self.cfg.priors,
            self.cfg.samples,
            self.kl_weight,
            np.random.default_rng(rng_seed),
        )
        return obj


def _params_snapshot(params):
    return [p.data.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p.data[...] = s


def _gd_step(evaluate, params, step):
    """One backtracking gradient step; returns (new value, accepted step size)."""
    for p in params:
        p.zero_grad()
    with ad.Tape():
        f0 = evaluate()
    grads = ad.backward(f0, params)
    f0 = f0.item()
    gsq = sum(float(np.sum(grads[p.name] ** 2)) for p in params)
    if gsq == 0.0:
        return f0, step
    snap = _params_snapshot(params)
    t = step
    for _ in range(30):
        for p, s in zip(params, snap):
            p.data[...] = s - t * grads[p.name]
        with ad.no_grad():
            f1 = evaluate().item()
        if f1 <= f0 - 1e-4 * t * gsq:
            return f1, t * 2.0
        t *= 0.5
    _restore(params, snap)
    return f0, t


def estimate_transforms(
    model: ConformerASR,
    utts: list[FeatureSequence],
    labels: dict[str, list[int]],
    mode: AdaptationMode,
    cfg: EstimationConfig = EstimationConfig(),
    init: TransformSet | None = None,
):
    """Estimate SD/ED transforms on ``utts`` with the canonical model frozen.

    Every utterance reads its own speaker's and environment's transforms, so
    a speaker transform is fitted to all of that speaker's data and an
    environment transform to all of that environment's data, jointly.
    Returns (transforms, objective value after each epoch, starting value first).
    """
    usable = [u for u in utts if labels.get(u.utterance_id)]
    dropped = sorted({u.utterance_id for u in utts} - {u.utterance_id for u in usable})
    if dropped:
        log.info("skipping %d utterances with empty supervision", len(dropped))
    transforms = init.copy() if init is not None else TransformSet(mode, model.cfg.d_model, cfg.bayesian)
    supported = {o[:2] for u in usable for o in mode.owners(u.speaker_id, u.env_id)}
    for u in utts:
        for ot, oid, kind in mode.owners(u.speaker_id, u.env_id):
            if (ot, oid) not in supported and (ot, oid) not in transforms:
                raise ValueError(f"empty adaptation data for {ot} {oid!r}")
            transforms.ensure(ot, oid, kind)

    before = model.checksum()
    prev_train = model.training
    model.training = False
    trainable = [p.trainable for p in model.parameters()]
    model.freeze()
    try:
        history = _run_estimation(model, usable, labels, transforms, mode, cfg)
    finally:
        for p, t in zip(model.parameters(), trainable):
            p.trainable = t
        model.training = prev_train
    if model.checksum() != before:
        raise RuntimeError("canonical parameters changed during transform estimation")
    transforms.meta.update({"epochs": str(cfg.epochs), "objective": repr(history[-1]), "bayesian": str(cfg.bayesian)})
    return transforms, history


def _run_estimation(model, utts, labels, transforms, mode, cfg):
    if not utts or cfg.epochs == 0:
        return [float("nan")] if not utts else [_Problem(model, utts, labels, transforms, cfg, cfg.batch_size).objective(0).item()]
    problem = _Problem(model, utts, labels, transforms, cfg, cfg.batch_size)
    spk_params = [p for k, t in transforms.transforms.items() if k[0] != ENV for p in t.parameters()]
    env_params = [p for k, t in transforms.transforms.items() if k[0] == ENV for p in t.parameters()]
    all_params = transforms.parameters()

    def groups(step_idx):
        if cfg.schedule == "alternating" and spk_params and env_params:
            return [spk_params] if step_idx % 2 == 0 else [env_params]
        return [all_params]

    views = None
    if cfg.objective == "marginal" and mode.name in ("lfa", "cfa"):
        views = _marginal_views(transforms)

    rng = np.random.default_rng([cfg.seed, 21])
    with ad.no_grad():
        history = [problem.objective(cfg.seed).item()]
    step_size = {}
    opt = Adam(all_params, lr=cfg.lr, clip=None) if cfg.optimizer == "adam" else None
    k = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            seed = int(rng.integers(2**31))
            if opt is not None:
                for i in rng.permutation(len(problem.batches)):
                    opt.zero_grad()
                    with ad.Tape():
                        f = problem.objective(seed, [problem.batches[i]])
                    ad.backward(f, all_params)
                    opt.step()
                continue
            for params in groups(k):
                if views is None:
                    evaluate = lambda s=seed: problem.objective(s)
                else:
                    evaluate = lambda s=seed: ad.add(problem.objective(s, marginal_view=views[0]), problem.objective(s, marginal_view=views[1]))
                key = id(params[0])
                _, step_size[key] = _gd_step(evaluate, params, step_size.get(key, cfg.init_step))
            k += 1
        with ad.no_grad():
            history.append(problem.objective(cfg.seed).item())
    return history


def _marginal_views(transforms: TransformSet):
    """Speaker-only and env-only views sharing the same parameter objects."""
    m = transforms.mode
    spk = TransformSet(AdaptationMode("speaker", spk_kind=m.spk_kind), transforms.dim, transforms.variational)
    env = TransformSet(AdaptationMode("env", env_kind=m.env_kind), transforms.dim, transforms.variational)
    for (ot, oid), t in transforms.transforms.items():
        (env if ot == ENV else spk).transforms[(ot, oid)] = t
    return spk, env


# ------------------------------------------------------------------ test-time adaptation


@dataclass
class AdaptResult:
    first_pass: dict[str, Hypothesis]
    adapted: dict[str, Hypothesis]
    transforms: TransformSet
    decode_transforms: TransformSet
    history: list[float]
    pseudo_labels: dict[str, list[int]]


def test_time_adapt(
    model: ConformerASR,
    utts: list[FeatureSequence],
    mode: AdaptationMode,
    cfg: EstimationConfig = EstimationConfig(),
    first_pass_model: ConformerASR | None = None,
    beam: int = 1,
    supervision: dict[str, list[int]] | None = None,
    first_pass: dict[str, Hypothesis] | None = None,
) -> AdaptResult:
    """Decode, estimate transforms on the pseudo labels, decode again.

    The first pass uses ``first_pass_model`` (default: ``model``) without
    transforms; its hypotheses become the supervision unless ``supervision``
    is given. Variational transforms are replaced by their posterior means
    for the final decode.
    """
    fp_model = first_pass_model or model
    if first_pass is None:
        first_pass = decode_all(fp_model, utts, beam=beam)
    labels = supervision if supervision is not None else {k: h.tokens for k, h in first_pass.items()}
    # pseudo labels the CTC branch cannot align are not usable as targets
    Tp = {u.utterance_id: subsampled_length(u.num_frames) for u in utts}
    labels = {k: v for k, v in labels.items() if v and ctc_min_frames(v) <= Tp[k]}
    transforms, history = estimate_transforms(model, utts, labels, mode, cfg)
    dec = transforms.posterior_mean() if cfg.bayesian else transforms
    adapted = decode_all(model, utts, dec, beam=beam)
    return AdaptResult(first_pass, adapted, transforms, dec, history, labels)


# ------------------------------------------------------------------ rapid adaptation


COND_SEP = "::in="


def build_condition_cache(
    model: ConformerASR,
    utts: list[FeatureSequence],
    labels: dict[str, list[int]],
    mode: AdaptationMode,
    cfg: EstimationConfig = EstimationConfig(),
) -> TransformSet:
    """Matched transforms plus per-condition re-estimates for mismatched reuse.

    Besides the joint estimate over all of ``utts`` (keys ``spk``/``env``),
    speaker transforms are re-estimated inside each single environment
    (``spk::in=env``) and environment transforms inside each single speaker's
    data (``env::in=spk``).
    """
    if mode.name != "cfa" and mode.name != "lfa":
        raise ValueError("condition caches need a factorised mode")
    matched, _ = estimate_transforms(model, utts, labels, mode, cfg)
    cache = matched.copy()
    by_env = defaultdict(list)
    by_spk = defaultdict(list)
    for u in utts:
        by_env[u.env_id].append(u)
        by_spk[u.speaker_id].append(u)
    for env, us in sorted(by_env.items()):
        ts, _ = estimate_transforms(model, us, labels, mode, cfg)
        for (ot, oid), t in ts.transforms.items():
            if ot == SPEAKER:
                cache.add(_relabel(t, f"{oid}{COND_SEP}{env}"))
    for spk, us in sorted(by_spk.items()):
        ts, _ = estimate_transforms(model, us, labels, mode, cfg)
        for (ot, oid), t in ts.transforms.items():
            if ot == ENV:
                cache.add(_relabel(t, f"{oid}{COND_SEP}{spk}"))
    cache.meta.update({"kind": "condition-cache"})
    return cache


def _relabel(t: FactorTransform, owner_id: str) -> FactorTransform:
    out = FactorTransform(t.owner_type, owner_id, t.kind, t.dim, t.layer, t.variational)
    out.mean.data[:] = t.mean.data
    if t.variational:
        out.log_dev.data[:] = t.log_dev.data
    return out


PAIRINGS = ("matched", "mm-env", "mm-spk", "mm-both")


def rapid_pairing(cache: TransformSet, utts, pairing: str, seed: int = 0) -> dict[str, tuple[str, str]]:
    """Per-utterance (speaker owner id, env owner id) chosen from the cache.

    ``mm-env`` uses the utterance's speaker transform estimated in a randomly
    chosen other environment; ``mm-spk`` uses its environment transform
    estimated on a randomly chosen other speaker; ``mm-both`` does both.
    """
    if pairing not in PAIRINGS:
        raise ValueError(f"unknown pairing {pairing!r}")
    rng = np.random.default_rng([seed, 31])
    spk_conds = defaultdict(list)
    env_conds = defaultdict(list)
    for ot, oid in cache.keys():
        if COND_SEP in oid:
            base, cond = oid.split(COND_SEP)
            (spk_conds if ot == SPEAKER else env_conds)[base].append(cond)
    out = {}
    for u in utts:
        s, e = u.speaker_id, u.env_id
        for key in ((SPEAKER, s), (ENV, e)):
            if key not in cache:
                raise KeyError(f"no transform cached for {key[0]} {key[1]!r}")
        if pairing in ("mm-env", "mm-both"):
            choices = sorted(c for c in spk_conds[s] if c != e)
            if not choices:
                raise KeyError(f"no mismatched-environment speaker transform cached for {s!r}")
            s = f"{s}{COND_SEP}{choices[rng.integers(len(choices))]}"
        if pairing in ("mm-spk", "mm-both"):
            choices = sorted(c for c in env_conds[e] if c != u.speaker_id)
            if not choices:
                raise KeyError(f"no mismatched-speaker environment transform cached for {e!r}")
            e = f"{e}{COND_SEP}{choices[rng.integers(len(choices))]}"
        out[u.utterance_id] = (s, e)
    return out


def rapid_adapt_from_cache(
    model: ConformerASR,
    cache: TransformSet,
    utts: list[FeatureSequence],
    pairing: str = "matched",
    seed: int = 0,
    beam: int = 1,
) -> dict[str, Hypothesis]:
    """Decode with cached transforms only; no estimation happens here."""
    dec = cache.posterior_mean() if cache.variational else cache
    pairs = rapid_pairing(cache, utts, pairing, seed)
    return decode_all(model, utts, dec, beam=beam, pairing=pairs)
