"""Log-mel feature extraction, simplified SpecAugment masking and feature I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("waveform is empty")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    speaker_id: str
    env_id: str
    utterance_id: str
    transcript: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class FrontendConfig:
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    num_mel_bins: int = 40
    fft_size: int = 512
    low_freq: float = 0.0
    high_freq: float | None = None


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(num_bins: int, sample_rate: int, low=0.0, high=None) -> np.ndarray:
    high = sample_rate / 2 if high is None else high
    pts = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), num_bins + 2))
    return pts[1:-1]


def mel_filterbank(num_bins: int, fft_size: int, sample_rate: int, low=0.0, high=None) -> np.ndarray:
    """Triangular filters (num_bins, fft_size//2+1), unit peak, HTK mel scale."""
    high = sample_rate / 2 if high is None else high
    edges = mel_to_hz(np.linspace(hz_to_mel(low), hz_to_mel(high), num_bins + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(num_samples: int, frame_len: int, frame_shift: int) -> int:
    return 1 + (num_samples - frame_len) // frame_shift


def extract_logmel(wave: Waveform, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """(T, num_mel_bins) log mel energies with a Hamming window and |X|² spectrum."""
    sr = wave.sample_rate
    frame_len = int(round(config.frame_length_ms * sr / 1000))
    frame_shift = int(round(config.frame_shift_ms * sr / 1000))
    if frame_len < frame_shift:
        raise ValueError("frame length must be >= frame shift")
    if config.fft_size < frame_len:
        raise ValueError(f"fft size {config.fft_size} shorter than frame ({frame_len} samples)")
    x = wave.samples
    if x.size < frame_len:
        raise ValueError(f"waveform has {x.size} samples, shorter than one frame ({frame_len})")
    T = num_frames(x.size, frame_len, frame_shift)
    idx = np.arange(frame_len)[None, :] + frame_shift * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=config.fft_size, axis=1)) ** 2
    fb = mel_filterbank(config.num_mel_bins, config.fft_size, sr, config.low_freq, config.high_freq)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


def spec_augment_mask(
    frames: np.ndarray,
    time_masks: int = 0,
    time_width: int = 0,
    freq_masks: int = 0,
    freq_width: int = 0,
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Fill random contiguous time/frequency bands with the utterance mean.

    Each band has exactly the requested width; its start is drawn uniformly.
    """
    out = np.array(frames, dtype=np.float64, copy=True)
    T, F = out.shape
    if time_width > T or freq_width > F:
        raise ValueError(f"mask width exceeds feature shape {out.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    fill = frames.mean()
    for _ in range(time_masks if time_width > 0 else 0):
        t0 = rng.integers(0, T - time_width + 1)
        out[t0 : t0 + time_width, :] = fill
    for _ in range(freq_masks if freq_width > 0 else 0):
        f0 = rng.integers(0, F - freq_width + 1)
        out[:, f0 : f0 + freq_width] = fill
    return out


# ------------------------------------------------------------------ file formats
#
# Feature archive: a numpy .npz file. For every utterance it holds an array
# "<utt_id>" of shape (T, F) float64; the entry "__index__" is a JSON string
# (stored as a 0-d unicode array) listing per-utterance records
# {utterance_id, speaker_id, env_id, T, F, transcript, meta} plus a
# "format_version" field.
#
# Manifest: UTF-8 text, one utterance per line,
#   utt_id<TAB>speaker_id<TAB>env_id<TAB>path<TAB>transcript[<TAB>extra...]
# Lines starting with '#' are comments.

ARCHIVE_VERSION = 1


def save_feature_archive(path, sequences: list[FeatureSequence]):
    index = []
    arrays = {}
    for seq in sequences:
        arrays[seq.utterance_id] = np.asarray(seq.frames, dtype=np.float64)
        index.append(
            {
                "utterance_id": seq.utterance_id,
                "speaker_id": seq.speaker_id,
                "env_id": seq.env_id,
                "T": int(seq.frames.shape[0]),
                "F": int(seq.frames.shape[1]),
                "transcript": seq.transcript,
                "meta": seq.meta,
            }
        )
    arrays["__index__"] = np.array(json.dumps({"format_version": ARCHIVE_VERSION, "records": index}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_feature_archive(path) -> list[FeatureSequence]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__index__"]))
        if header.get("format_version") != ARCHIVE_VERSION:
            raise ValueError(f"{path}: unsupported feature archive version")
        out = []
        for rec in header["records"]:
            frames = z[rec["utterance_id"]]
            if frames.shape != (rec["T"], rec["F"]):
                raise ValueError(f"{path}: shape mismatch for {rec['utterance_id']}")
            out.append(
                FeatureSequence(
                    frames=frames,
                    speaker_id=rec["speaker_id"],
                    env_id=rec["env_id"],
                    utterance_id=rec["utterance_id"],
                    transcript=rec["transcript"],
                    meta=rec.get("meta") or {},
                )
            )
    return out


@dataclass
class ManifestEntry:
    utt_id: str
    speaker_id: str
    env_id: str
    path: str
    transcript: str = ""
    extra: list[str] = field(default_factory=list)

    def to_line(self) -> str:
        return "\t".join([self.utt_id, self.speaker_id, self.env_id, self.path, self.transcript, *self.extra])


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 4:
                raise ValueError(f"{path}:{lineno}: expected at least 4 tab-separated columns")
            cols += [""] * (5 - len(cols))
            entries.append(ManifestEntry(*cols[:5], extra=cols[5:]))
    return entries


def write_manifest(path, entries: list[ManifestEntry], header: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for e in entries:
            fh.write(e.to_line() + "\n")
