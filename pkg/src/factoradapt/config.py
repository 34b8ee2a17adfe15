"""Experiment configuration: flat ``key = value`` text with section prefixes.

Recognised prefixes are ``model.`` (ModelConfig fields), ``adapt.``
(adaptation mode and estimation), ``train.`` (canonical training),
``data.`` (synthetic task or input paths) and top-level keys (``seed``,
``output_dir``). Values are Python literals; bare words are read as strings.
"""

from __future__ import annotations

import ast
import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .adaptation import AdaptationMode, PriorSpec
from .model import ModelConfig
from .pipelines import EstimationConfig, SyntheticTaskSpec, TrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class AdaptConfig:
    mode: str = "cfa"
    beta: float = 0.7
    spk_kind: str = "hub"
    env_kind: str = "hub"
    order: str = "speaker-first"
    bayesian: bool = False
    samples: int = 1
    prior_lhuc: tuple[float, float] = (0.0, 1.0)
    prior_hub: tuple[float, float] = (0.0, 0.001)
    kl_weight: float | None = None
    epochs: int = 3
    steps_per_epoch: int = 10
    optimizer: str = "gd"
    schedule: str = "joint"
    objective: str = "joint"
    beam: int = 1
    adaptive_training: bool = True

    def mode_obj(self) -> AdaptationMode:
        if self.mode == "lfa":
            # linear factorisation is defined on LHUC scales only
            return AdaptationMode("lfa", self.beta, "lhuc", "lhuc", self.order)
        return AdaptationMode(self.mode, self.beta, self.spk_kind, self.env_kind, self.order)

    def estimation(self, seed: int) -> EstimationConfig:
        return EstimationConfig(
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            bayesian=self.bayesian,
            samples=self.samples,
            priors=PriorSpec(tuple(self.prior_lhuc), tuple(self.prior_hub)),
            kl_weight=self.kl_weight,
            optimizer=self.optimizer,
            schedule=self.schedule,
            objective=self.objective,
            seed=seed,
        )


@dataclass
class DataConfig:
    train_speakers: int = 8
    train_envs: int = 4
    train_utts_per_cell: int = 8
    test_speakers: int = 6
    test_envs: int = 4
    test_utts_per_cell: int = 8
    test_speaker_offset: int = 100
    test_env_offset: int = 2
    manifest: str = ""
    features: str = ""

    def train_spec(self, seed: int, **effects) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            n_speakers=self.train_speakers, n_envs=self.train_envs, utts_per_cell=self.train_utts_per_cell, seed=seed, **effects
        )

    def test_spec(self, seed: int, **effects) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(
            n_speakers=self.test_speakers,
            n_envs=self.test_envs,
            utts_per_cell=self.test_utts_per_cell,
            speaker_offset=self.test_speaker_offset,
            env_offset=self.test_env_offset,
            corpus_seed=1,
            seed=seed,
            **effects,
        )


SECTIONS = {"model": ModelConfig, "adapt": AdaptConfig, "train": TrainConfig, "data": DataConfig}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_text(self) -> str:
        lines = [f"# factoradapt experiment config v{CONFIG_VERSION}", f"seed = {self.seed!r}", f"output_dir = {self.output_dir!r}"]
        for sec in SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                lines.append(f"{sec}.{k} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        top: dict = {}
        secs: dict[str, dict] = {s: {} for s in SECTIONS}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected 'key = value'")
            key, _, val = (s.strip() for s in line.partition("="))
            value = _parse_value(val)
            sec, dot, name = key.partition(".")
            if dot:
                if sec not in SECTIONS:
                    raise ConfigError(f"line {n}: unknown section {sec!r}")
                if name not in {f.name for f in fields(SECTIONS[sec])}:
                    raise ConfigError(f"line {n}: unknown key {key!r}")
                secs[sec][name] = value
            elif key in ("seed", "output_dir"):
                top[key] = value
            else:
                raise ConfigError(f"line {n}: unknown key {key!r}")
        try:
            parts = {s: SECTIONS[s](**_tuplify(SECTIONS[s], v)) for s, v in secs.items()}
            return cls(**top, **parts)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def seeds(self) -> dict[str, int]:
        return split_seed(self.seed)


def _parse_value(val: str):
    try:
        return ast.literal_eval(val)
    except (ValueError, SyntaxError):
        return val


def _tuplify(cls, values: dict) -> dict:
    # tuples come back from literal_eval as tuples already, lists from hand-written files are converted
    defaults = {f.name: f.default for f in fields(cls)}
    return {k: tuple(v) if isinstance(v, list) and isinstance(defaults.get(k), tuple) else v for k, v in values.items()}


COMPONENTS = ("data", "model", "train", "adapt", "decode", "noise")


def split_seed(root: int) -> dict[str, int]:
    """Independent per-component seeds derived from one root seed."""
    ss = np.random.SeedSequence(root)
    children = ss.spawn(len(COMPONENTS))
    return {c: int(ch.generate_state(1)[0]) for c, ch in zip(COMPONENTS, children)}


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_text(fh.read())
