import collections

import numpy as np
import pytest

from factoradapt.features import Waveform
from factoradapt.noise import (
    NOISE_GENERATORS,
    TEST_SNRS,
    TRAIN_SNRS,
    MixSpec,
    NoiseProfile,
    SNRError,
    build_augmented_corpus,
    build_nonaugmented_corpus,
    measured_snr,
    mix_at_snr,
    noise_segment,
    read_wav,
    render,
    signal_power,
    synthetic_noise_bank,
    training_conditions,
    write_wav,
)


def _clean(n=4000, seed=0):
    return Waveform(np.random.default_rng(seed).standard_normal(n) * 0.1, 8000)


@pytest.mark.parametrize("snr", TRAIN_SNRS + TEST_SNRS)
def test_mixed_snr_hits_the_target(snr):
    bank = synthetic_noise_bank(seconds=1.0)
    out = mix_at_snr(_clean(), bank["babble"], MixSpec("u", "babble", snr, 123, 0))
    assert measured_snr(_clean().samples, out.scaled_noise) == pytest.approx(snr, abs=1e-9)
    np.testing.assert_allclose(out.waveform.samples, _clean().samples + out.scaled_noise)


def test_noise_shorter_than_speech_wraps_around():
    noise = NoiseProfile("n", np.arange(1.0, 6.0))
    seg, wrapped = noise_segment(noise.samples, 3, 7)
    np.testing.assert_array_equal(seg, [4, 5, 1, 2, 3, 4, 5])
    assert wrapped
    out = mix_at_snr(_clean(50), noise, MixSpec("u", "n", 0.0, 4, 0))
    assert out.spec.wrapped
    assert measured_snr(_clean(50).samples, out.scaled_noise) == pytest.approx(0.0, abs=1e-9)


def test_zero_power_signals_raise():
    with pytest.raises(SNRError):
        NoiseProfile("z", np.zeros(10))
    with pytest.raises(SNRError):
        mix_at_snr(Waveform(np.zeros(10), 8000), NoiseProfile("n", np.ones(10)), MixSpec("u", "n", 0.0, 0, 0))


def test_seen_flag_follows_training_conditions():
    cond = training_conditions(["white"], TRAIN_SNRS)
    bank = synthetic_noise_bank(seconds=0.5)
    seen = mix_at_snr(_clean(), bank["white"], MixSpec("u", "white", 5.0, 0, 0), cond)
    unseen = mix_at_snr(_clean(), bank["white"], MixSpec("u", "white", -15.0, 0, 0), cond)
    other = mix_at_snr(_clean(), bank["hum"], MixSpec("u", "hum", 5.0, 0, 0), cond)
    assert (seen.seen_flag, unseen.seen_flag, other.seen_flag) == (True, False, False)
    assert seen.env_id == "white@5"


def test_bank_has_ten_unit_power_generators():
    bank = synthetic_noise_bank(seconds=0.5, unseen=("hum",))
    assert len(bank) == len(NOISE_GENERATORS) == 10
    for p in bank.values():
        assert signal_power(p.samples) == pytest.approx(1.0)
    assert bank["hum"].category == "unseen"


def test_bank_is_deterministic():
    a = synthetic_noise_bank(seconds=0.2, seed=4)
    b = synthetic_noise_bank(seconds=0.2, seed=4)
    for k in a:
        np.testing.assert_array_equal(a[k].samples, b[k].samples)


def _utts(n):
    return [(f"u{i}", f"s{i % 3}", 1000) for i in range(n)]


def test_nonaugmented_corpus_has_one_record_per_utterance():
    recs = build_nonaugmented_corpus(_utts(25), {"a": 500, "b": 700}, TRAIN_SNRS, seed=1)
    assert len(recs) == 25
    assert [r.utt_id for r in recs] == [u for u, _, _ in _utts(25)]
    assert all(0 <= r.noise_offset < {"a": 500, "b": 700}[r.noise_id] for r in recs)


def test_augmented_corpus_is_the_full_cross_product():
    noises = {"a": 500, "b": 700, "c": 300}
    recs = build_augmented_corpus(_utts(4), noises, TEST_SNRS, seed=1)
    assert len(recs) == 4 * 3 * len(TEST_SNRS)
    assert len({r.utt_id for r in recs}) == len(recs)
    per_utt = collections.Counter(r.source_utt_id for r in recs)
    assert set(per_utt.values()) == {3 * len(TEST_SNRS)}


def test_corpus_builders_are_deterministic_and_reject_empty_inputs():
    a = build_nonaugmented_corpus(_utts(10), {"a": 50}, TEST_SNRS, seed=3)
    b = build_nonaugmented_corpus(_utts(10), {"a": 50}, TEST_SNRS, seed=3)
    assert a == b
    with pytest.raises(ValueError):
        build_nonaugmented_corpus([], {"a": 50}, TEST_SNRS, seed=3)
    with pytest.raises(ValueError):
        build_augmented_corpus(_utts(2), {}, TEST_SNRS)


def test_render_reproduces_the_record():
    bank = synthetic_noise_bank(seconds=0.5)
    rec = build_nonaugmented_corpus([("u0", "s0", 4000)], {k: v.samples.size for k, v in bank.items()}, TEST_SNRS, seed=2)[0]
    out = render(rec, _clean(), bank)
    assert out.env_id == rec.env_id
    assert measured_snr(_clean().samples, out.scaled_noise) == pytest.approx(rec.snr_db, abs=1e-9)


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 40, 800)) * 0.5
    write_wav(tmp_path / "x.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "x.wav")
    assert back.sample_rate == 8000
    np.testing.assert_allclose(back.samples, x, atol=0.5 / 32768 + 1e-12)
