"""SNR-controlled additive noise simulation.

Two corpus protocols are supported: *non-augmented*, where every clean
utterance is corrupted once under a uniformly drawn (noise, SNR) condition,
and *augmented*, where every utterance is replicated under every condition.
"""

from __future__ import annotations

import itertools
import wave as wavelib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import Waveform

TRAIN_SNRS = (-5.0, 0.0, 5.0, 10.0, 20.0)
TEST_SNRS = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 20.0)


class SNRError(ValueError):
    """Raised when an SNR is undefined because a signal has zero power."""


@dataclass
class NoiseProfile:
    noise_id: str
    samples: np.ndarray
    category: str = "seen"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.category not in ("seen", "unseen"):
            raise ValueError(f"noise category must be 'seen' or 'unseen', got {self.category!r}")
        if self.samples.size == 0 or signal_power(self.samples) == 0:
            raise SNRError(f"noise {self.noise_id!r} has zero power")


@dataclass
class MixSpec:
    utterance_id: str
    noise_id: str
    snr_db: float
    noise_offset: int
    seed: int
    wrapped: bool = False
    gain: float | None = None


@dataclass
class CorruptedUtterance:
    waveform: Waveform
    env_id: str
    spec: MixSpec
    seen_flag: bool
    scaled_noise: np.ndarray = field(repr=False, default=None)


def condition_id(noise_id: str, snr_db: float) -> str:
    return f"{noise_id}@{snr_db:g}"


def signal_power(samples) -> float:
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("signal_power of an empty signal")
    return float(np.mean(x * x))


def noise_segment(noise: np.ndarray, offset: int, length: int) -> tuple[np.ndarray, bool]:
    """Slice ``length`` samples from ``offset``, wrapping around if needed."""
    wrapped = offset + length > noise.size
    idx = (offset + np.arange(length)) % noise.size
    return noise[idx], wrapped


def mixing_gain(p_clean: float, p_noise: float, snr_db: float) -> float:
    return float(np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0))))


def measured_snr(clean, scaled_noise) -> float:
    return 10.0 * np.log10(signal_power(clean) / signal_power(scaled_noise))


def mix_at_snr(
    clean: Waveform,
    noise: NoiseProfile,
    spec: MixSpec,
    train_conditions: set[tuple[str, float]] | None = None,
) -> CorruptedUtterance:
    p_clean = signal_power(clean.samples)
    if p_clean == 0:
        raise SNRError(f"{spec.utterance_id}: clean signal has zero power")
    seg, wrapped = noise_segment(noise.samples, spec.noise_offset, clean.samples.size)
    p_noise = signal_power(seg)
    if p_noise == 0:
        raise SNRError(f"{spec.utterance_id}: noise segment of {noise.noise_id!r} has zero power")
    g = mixing_gain(p_clean, p_noise, spec.snr_db)
    scaled = g * seg
    spec.wrapped = wrapped
    spec.gain = g
    seen = train_conditions is not None and (noise.noise_id, float(spec.snr_db)) in train_conditions
    return CorruptedUtterance(
        waveform=Waveform(clean.samples + scaled, clean.sample_rate),
        env_id=condition_id(noise.noise_id, spec.snr_db),
        spec=spec,
        seen_flag=seen,
        scaled_noise=scaled,
    )


def training_conditions(noise_ids, snrs) -> set[tuple[str, float]]:
    return {(n, float(s)) for n in noise_ids for s in snrs}


# ------------------------------------------------------------------ synthetic noise bank


def _colored(rng, n, exponent):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    spec /= f ** (exponent / 2.0)
    return np.fft.irfft(spec, n)


def _bandpass(rng, n, sr, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    return np.fft.irfft(spec, n)


def _babble(rng, n, sr):
    out = np.zeros(n)
    t = np.arange(n) / sr
    for _ in range(6):
        carrier = _bandpass(rng, n, sr, 200, 3000)
        syll = 0.5 * (1 + np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi)))
        out += carrier * syll
    return out


def _hum(rng, n, sr):
    t = np.arange(n) / sr
    base = rng.choice([50.0, 60.0])
    out = sum(np.sin(2 * np.pi * base * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 8))
    return out + 0.01 * rng.standard_normal(n)


def _chirps(rng, n, sr):
    t = np.arange(n) / sr
    f = 600 + 400 * np.sin(2 * np.pi * 0.7 * t)
    return np.sin(2 * np.pi * np.cumsum(f) / sr) + 0.05 * rng.standard_normal(n)


def _crackle(rng, n, sr):
    out = 0.05 * rng.standard_normal(n)
    hits = rng.random(n) < 0.002
    out[hits] += rng.normal(0, 3.0, hits.sum())
    return out


def _modulated(rng, n, sr):
    t = np.arange(n) / sr
    return rng.standard_normal(n) * (0.6 + 0.4 * np.sin(2 * np.pi * 1.5 * t))


NOISE_GENERATORS = {
    "white": lambda rng, n, sr: rng.standard_normal(n),
    "pink": lambda rng, n, sr: _colored(rng, n, 1.0),
    "brown": lambda rng, n, sr: _colored(rng, n, 2.0),
    "babble": _babble,
    "hum": _hum,
    "rumble": lambda rng, n, sr: _bandpass(rng, n, sr, 20, 300),
    "fan": lambda rng, n, sr: _bandpass(rng, n, sr, 800, 2000),
    "chirp": _chirps,
    "crackle": _crackle,
    "cafe": _modulated,
}


def synthetic_noise_bank(
    seconds: float = 4.0, sample_rate: int = 8000, seed: int = 0, unseen: tuple[str, ...] = ()
) -> dict[str, NoiseProfile]:
    """The 10 built-in noise types, each normalised to unit power."""
    n = int(seconds * sample_rate)
    bank = {}
    for i, (name, gen) in enumerate(NOISE_GENERATORS.items()):
        rng = np.random.default_rng([seed, i])
        x = gen(rng, n, sample_rate)
        x = x / np.sqrt(signal_power(x))
        bank[name] = NoiseProfile(name, x, "unseen" if name in unseen else "seen")
    return bank


def read_wav(path) -> Waveform:
    """16-bit PCM mono (or first channel) WAV, scaled to [-1, 1)."""
    with wavelib.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
        ch = w.getnchannels()
        sr = w.getframerate()
    return Waveform(raw.reshape(-1, ch)[:, 0] / 32768.0, sr)


def write_wav(path, wave: Waveform):
    peak = np.max(np.abs(wave.samples))
    x = wave.samples / peak * 0.99 if peak >= 1.0 else wave.samples
    with wavelib.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(wave.sample_rate)
        w.writeframes(np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes())


def load_waveform(path) -> Waveform:
    path = Path(path)
    if path.suffix == ".npy":
        return Waveform(np.load(path))
    return read_wav(path)


def load_noise_dir(path, unseen: tuple[str, ...] = ()) -> dict[str, NoiseProfile]:
    """User-supplied noise files (*.wav / *.npy); noise id is the file stem."""
    bank = {}
    for f in sorted(Path(path).iterdir()):
        if f.suffix in (".wav", ".npy"):
            bank[f.stem] = NoiseProfile(f.stem, load_waveform(f).samples, "unseen" if f.stem in unseen else "seen")
    if not bank:
        raise ValueError(f"{path}: no .wav or .npy noise files")
    return bank


# ------------------------------------------------------------------ corpus protocols


@dataclass
class CorruptedRecord:
    """One row of a corrupted manifest (no audio)."""

    utt_id: str
    source_utt_id: str
    speaker_id: str
    noise_id: str
    snr_db: float
    noise_offset: int
    seed: int
    seen_flag: bool = False

    @property
    def env_id(self) -> str:
        return condition_id(self.noise_id, self.snr_db)


def _check_inputs(utterances, noise_ids, snrs):
    if not utterances:
        raise ValueError("empty clean manifest")
    if not noise_ids or not snrs:
        raise ValueError("noise set and SNR set must be non-empty")


def build_nonaugmented_corpus(
    utterances: list[tuple[str, str, int]],
    noise_lengths: dict[str, int],
    snrs,
    seed: int,
    train_conditions: set | None = None,
) -> list[CorruptedRecord]:
    """``utterances`` are (utt_id, speaker_id, num_samples) triples."""
    noise_ids = sorted(noise_lengths)
    _check_inputs(utterances, noise_ids, snrs)
    rng = np.random.default_rng(seed)
    out = []
    for k, (utt, spk, _n) in enumerate(utterances):
        nid = noise_ids[rng.integers(len(noise_ids))]
        snr = float(snrs[rng.integers(len(snrs))])
        off = int(rng.integers(noise_lengths[nid]))
        seen = train_conditions is not None and (nid, snr) in train_conditions
        out.append(CorruptedRecord(utt, utt, spk, nid, snr, off, seed * 1_000_003 + k, seen))
    return out


def build_augmented_corpus(
    utterances: list[tuple[str, str, int]],
    noise_lengths: dict[str, int],
    snrs,
    seed: int = 0,
    train_conditions: set | None = None,
) -> list[CorruptedRecord]:
    noise_ids = sorted(noise_lengths)
    _check_inputs(utterances, noise_ids, snrs)
    rng = np.random.default_rng(seed)
    out = []
    for k, (utt, spk, _n) in enumerate(utterances):
        for nid, snr in itertools.product(noise_ids, snrs):
            snr = float(snr)
            off = int(rng.integers(noise_lengths[nid]))
            seen = train_conditions is not None and (nid, snr) in train_conditions
            out.append(
                CorruptedRecord(f"{utt}-{condition_id(nid, snr)}", utt, spk, nid, snr, off, seed * 1_000_003 + k, seen)
            )
    return out


def render(record: CorruptedRecord, clean: Waveform, bank: dict[str, NoiseProfile], train_conditions=None):
    spec = MixSpec(record.utt_id, record.noise_id, record.snr_db, record.noise_offset, record.seed)
    return mix_at_snr(clean, bank[record.noise_id], spec, train_conditions)
