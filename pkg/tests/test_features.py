import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from factoradapt.features import (
    FeatureSequence,
    FrontendConfig,
    ManifestEntry,
    Waveform,
    extract_logmel,
    hz_to_mel,
    load_feature_archive,
    mel_center_frequencies,
    mel_filterbank,
    mel_to_hz,
    read_manifest,
    save_feature_archive,
    spec_augment_mask,
    write_manifest,
)


def test_one_second_gives_98_frames_of_40_bins():
    wave = Waveform(np.random.default_rng(0).standard_normal(8000), 8000)
    assert extract_logmel(wave).shape == (98, 40)


def test_silence_is_floored_not_minus_infinity():
    out = extract_logmel(Waveform(np.zeros(800), 8000))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, np.log(1e-10))


def test_mel_scale_round_trip():
    f = np.linspace(0, 4000, 50)
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(1000.0) == pytest.approx(1000.0, abs=0.5)


def test_filters_peak_at_their_centres():
    fb = mel_filterbank(40, 512, 8000)
    assert fb.shape == (40, 257)
    assert fb.max() <= 1.0 + 1e-12
    centres = mel_center_frequencies(40, 8000)
    assert np.all(np.diff(centres) > 0)


@pytest.mark.parametrize("k", [0, 7, 20, 39])
def test_sine_at_a_centre_frequency_lights_up_that_bin(k):
    sr, n = 8000, 8000
    f = mel_center_frequencies(40, sr)[k]
    wave = Waveform(np.sin(2 * np.pi * f * np.arange(n) / sr), sr)
    energy = np.exp(extract_logmel(wave)).mean(axis=0)
    assert int(np.argmax(energy)) == k


def test_too_short_waveform_is_rejected():
    with pytest.raises(ValueError):
        extract_logmel(Waveform(np.ones(100), 8000))


def test_empty_or_bad_waveforms_are_rejected():
    with pytest.raises(ValueError):
        Waveform(np.zeros(0), 8000)
    with pytest.raises(ValueError):
        Waveform(np.ones(10), 0)


def test_fft_shorter_than_frame_is_rejected():
    with pytest.raises(ValueError):
        extract_logmel(Waveform(np.ones(8000), 8000), FrontendConfig(fft_size=128))


def test_zero_masks_leave_features_unchanged():
    x = np.random.default_rng(0).standard_normal((20, 8))
    np.testing.assert_array_equal(spec_augment_mask(x, 0, 5, 0, 3, seed=1), x)


def test_mask_wider_than_the_axis_is_rejected():
    x = np.zeros((5, 4))
    with pytest.raises(ValueError):
        spec_augment_mask(x, 1, 6, 0, 0)
    with pytest.raises(ValueError):
        spec_augment_mask(x, 0, 0, 1, 5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_time_mask_covers_exactly_the_width(width, seed):
    x = np.random.default_rng(seed).standard_normal((12, 5)) + 100.0
    y = spec_augment_mask(x, time_masks=1, time_width=width, seed=seed)
    masked_rows = np.where(np.all(y == x.mean(), axis=1))[0]
    assert len(masked_rows) == width
    assert np.all(np.diff(masked_rows) == 1)


def test_masking_is_deterministic_under_a_seed():
    x = np.random.default_rng(0).standard_normal((30, 10))
    a = spec_augment_mask(x, 2, 4, 2, 3, seed=11)
    b = spec_augment_mask(x, 2, 4, 2, 3, seed=11)
    np.testing.assert_array_equal(a, b)


def test_feature_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [
        FeatureSequence(rng.standard_normal((9, 4)), "s1", "e1", "u1", "ab", {"snr": "5"}),
        FeatureSequence(rng.standard_normal((11, 4)), "s2", "e1", "u2", None),
    ]
    save_feature_archive(tmp_path / "f.npz", seqs)
    back = load_feature_archive(tmp_path / "f.npz")
    assert [s.utterance_id for s in back] == ["u1", "u2"]
    for a, b in zip(seqs, back):
        assert a.frames.tobytes() == b.frames.tobytes()
        assert (a.speaker_id, a.env_id, a.transcript) == (b.speaker_id, b.env_id, b.transcript)
    assert back[0].meta == {"snr": "5"}


def test_manifest_round_trip_with_extra_columns(tmp_path):
    entries = [ManifestEntry("u1", "s1", "e1", "a.wav", "hello there", ["snr=5", "seen=1"]), ManifestEntry("u2", "s2", "e2", "b.wav")]
    write_manifest(tmp_path / "m.tsv", entries, header="test")
    assert read_manifest(tmp_path / "m.tsv") == entries


def test_manifest_with_too_few_columns_is_rejected(tmp_path):
    (tmp_path / "m.tsv").write_text("u1\ts1\te1\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.tsv")
