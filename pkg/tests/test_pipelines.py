import numpy as np
import pytest

from factoradapt.adaptation import ENV, HUB, SPEAKER, AdaptationMode
from factoradapt.pipelines import (
    COND_SEP,
    AdaptationDataset,
    EstimationConfig,
    SyntheticTaskSpec,
    TrainConfig,
    adaptive_train,
    build_condition_cache,
    decode_all,
    env_effect,
    estimate_transforms,
    generate_synthetic_corpus,
    make_batches,
    model_config_for,
    rapid_adapt_from_cache,
    rapid_pairing,
    reference_labels,
    speaker_effect,
    test_time_adapt as run_test_time_adapt,
    token_error_rate,
)

SMALL = dict(d_model=16, heads=2, ff_dim=32, conv_kernel=3, sub_channels=4)


@pytest.fixture(scope="module")
def corpora():
    tr = SyntheticTaskSpec(n_speakers=2, n_envs=2, utts_per_cell=4)
    te = SyntheticTaskSpec(n_speakers=2, n_envs=2, utts_per_cell=2, speaker_offset=50, env_offset=1, corpus_seed=1)
    return generate_synthetic_corpus(tr, "tr"), generate_synthetic_corpus(te, "te"), tr


@pytest.fixture(scope="module")
def trained(corpora):
    dtr, dte, spec = corpora
    cfg = model_config_for(spec, **SMALL)
    model, _, hist = adaptive_train(dtr, cfg, TrainConfig(epochs=2, batch_size=8))
    return model, cfg, hist


class TestSyntheticCorpus:
    def test_grid_and_ids(self, corpora):
        dtr, _, _ = corpora
        assert len(dtr) == 16
        assert dtr.speakers() == ["spk000", "spk001"] and dtr.envs() == ["env000", "env001"]
        u = dtr.cell("spk001", "env000")[0]
        assert u.utterance_id.startswith("tr-spk001-env000-")
        assert 3 <= len(u.transcript) <= 5 and u.frames.shape == (48, 24)

    def test_generation_is_deterministic(self):
        spec = SyntheticTaskSpec(n_speakers=1, n_envs=2, utts_per_cell=2)
        a, b = generate_synthetic_corpus(spec), generate_synthetic_corpus(spec)
        for x, y in zip(a.utterances(), b.utterances()):
            assert x.frames.tobytes() == y.frames.tobytes() and x.transcript == y.transcript

    def test_effects_depend_only_on_the_index(self):
        a = SyntheticTaskSpec(n_speakers=3, corpus_seed=0)
        b = SyntheticTaskSpec(n_speakers=1, corpus_seed=9, speaker_offset=2)
        np.testing.assert_array_equal(speaker_effect(a, 2), speaker_effect(b, 2))
        assert env_effect(a, 1)[2] == 1.0
        assert not np.array_equal(speaker_effect(a, 0), speaker_effect(a, 1))

    def test_env_gain_scales_the_clean_part(self):
        lo = SyntheticTaskSpec(env_gain=(0.5, 0.5))
        assert env_effect(lo, 3)[2] == 0.5
        np.testing.assert_array_equal(env_effect(lo, 3)[0], env_effect(SyntheticTaskSpec(), 3)[0])

    def test_invalid_specs_raise(self):
        with pytest.raises(ValueError):
            SyntheticTaskSpec(n_speakers=0)
        with pytest.raises(ValueError):
            SyntheticTaskSpec(frames=20)

    def test_unions(self, corpora):
        dtr, _, _ = corpora
        union = dtr.union("spk000", "env001")
        assert len(union) == 12
        assert len({u.utterance_id for u in union}) == 12
        with pytest.raises(ValueError, match="duplicate"):
            AdaptationDataset(dtr.utterances()[:1] * 2)

    def test_batches_group_equal_lengths(self, corpora):
        dtr, _, _ = corpora
        utts = dtr.utterances()
        batches = make_batches(utts, 5, np.random.default_rng(0))
        assert sorted(u.utterance_id for b in batches for u in b) == sorted(u.utterance_id for u in utts)
        assert all(len(b) <= 5 and len({u.num_frames for u in b}) == 1 for b in batches)


class TestTraining:
    def test_losses_are_finite(self, trained):
        _, _, hist = trained
        assert len(hist) == 2 and all(np.isfinite(hist))

    def test_training_is_deterministic(self, corpora, trained):
        dtr, _, spec = corpora
        model, cfg, _ = trained
        again, _, _ = adaptive_train(dtr, cfg, TrainConfig(epochs=2, batch_size=8))
        assert again.checksum() == model.checksum()

    def test_adaptive_training_returns_one_transform_per_owner(self, corpora):
        dtr, _, spec = corpora
        cfg = model_config_for(spec, **SMALL)
        mode = AdaptationMode("cfa", spk_kind=HUB, env_kind=HUB)
        _, ts, _ = adaptive_train(dtr, cfg, TrainConfig(epochs=1, batch_size=8), mode)
        assert set(ts.keys()) == {(SPEAKER, "spk000"), (SPEAKER, "spk001"), (ENV, "env000"), (ENV, "env001")}
        assert not all(t.is_identity() for t in ts.transforms.values())


class TestEstimation:
    def test_canonical_parameters_stay_frozen(self, corpora, trained):
        _, dte, _ = corpora
        model, cfg, _ = trained
        utts = dte.utterances()
        before = model.checksum()
        ts, hist = estimate_transforms(model, utts, reference_labels(utts, cfg), AdaptationMode("lfa"), EstimationConfig(epochs=2, steps_per_epoch=2))
        assert model.checksum() == before
        assert all(p.trainable for p in model.parameters())
        assert hist[-1] <= hist[0]
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))

    @pytest.mark.parametrize("bayesian", [False, True])
    def test_estimation_is_deterministic(self, corpora, trained, bayesian):
        _, dte, _ = corpora
        model, cfg, _ = trained
        utts = dte.utterances()
        labels = reference_labels(utts, cfg)
        mode = AdaptationMode("cfa", spk_kind=HUB, env_kind=HUB)
        est = EstimationConfig(epochs=1, steps_per_epoch=2, bayesian=bayesian)
        a, ha = estimate_transforms(model, utts, labels, mode, est)
        b, hb = estimate_transforms(model, utts, labels, mode, est)
        assert ha == hb
        for k in a.keys():
            assert a[k].mean.data.tobytes() == b[k].mean.data.tobytes()

    def test_owner_without_supervision_raises(self, corpora, trained):
        _, dte, _ = corpora
        model, cfg, _ = trained
        utts = dte.utterances()
        labels = {k: v for k, v in reference_labels(utts, cfg).items() if "spk050" not in k}
        with pytest.raises(ValueError, match="empty adaptation data"):
            estimate_transforms(model, utts, labels, AdaptationMode("speaker"), EstimationConfig(epochs=1, steps_per_epoch=1))

    @pytest.mark.parametrize("optimizer,schedule,objective", [("adam", "joint", "joint"), ("gd", "alternating", "joint"), ("gd", "joint", "marginal")])
    def test_estimation_variants_run(self, corpora, trained, optimizer, schedule, objective):
        _, dte, _ = corpora
        model, cfg, _ = trained
        utts = dte.utterances()
        est = EstimationConfig(epochs=1, steps_per_epoch=2, optimizer=optimizer, schedule=schedule, objective=objective)
        ts, hist = estimate_transforms(model, utts, reference_labels(utts, cfg), AdaptationMode("cfa"), est)
        assert np.all(np.isfinite(hist))
        assert not all(t.is_identity() for t in ts.transforms.values())


class TestTestTimeAdaptation:
    def test_zero_epochs_reproduces_the_first_pass(self, corpora, trained):
        _, dte, _ = corpora
        model, _, _ = trained
        res = run_test_time_adapt(model, dte.utterances(), AdaptationMode("speaker"), EstimationConfig(epochs=0))
        assert {k: h.tokens for k, h in res.adapted.items()} == {k: h.tokens for k, h in res.first_pass.items()}

    def test_given_pseudo_labels_match_the_pseudo_pipeline(self, corpora, trained):
        _, dte, _ = corpora
        model, _, _ = trained
        utts = dte.utterances()
        est = EstimationConfig(epochs=1, steps_per_epoch=2)
        mode = AdaptationMode("cfa", spk_kind=HUB, env_kind=HUB)
        a = run_test_time_adapt(model, utts, mode, est)
        b = run_test_time_adapt(model, utts, mode, est, supervision={k: h.tokens for k, h in a.first_pass.items()})
        assert a.adapted == b.adapted

    def test_error_rate_breakdown(self, corpora, trained):
        _, dte, _ = corpora
        model, cfg, _ = trained
        utts = dte.utterances()
        hyps = decode_all(model, utts)
        total = token_error_rate(utts, hyps, cfg)
        by_env = token_error_rate(utts, hyps, cfg, by="env")
        assert sum(r.errors for r in by_env.values()) == total.errors


@pytest.fixture(scope="module")
def cache(corpora, trained):
    _, dte, _ = corpora
    model, cfg, _ = trained
    utts = dte.utterances()
    mode = AdaptationMode("cfa", spk_kind=HUB, env_kind=HUB)
    return build_condition_cache(model, utts, reference_labels(utts, cfg), mode, EstimationConfig(epochs=1, steps_per_epoch=1))


class TestRapidAdaptation:
    def test_cache_holds_matched_and_per_condition_entries(self, cache):
        keys = set(cache.keys())
        assert (SPEAKER, "spk050") in keys and (ENV, "env001") in keys
        assert (SPEAKER, f"spk050{COND_SEP}env002") in keys
        assert (ENV, f"env001{COND_SEP}spk051") in keys

    def test_pairings_pick_the_requested_conditions(self, corpora, cache):
        _, dte, _ = corpora
        utts = dte.utterances()
        for u, (s, e) in zip(utts, rapid_pairing(cache, utts, "matched").values()):
            assert (s, e) == (u.speaker_id, u.env_id)
        for u in utts:
            s, e = rapid_pairing(cache, [u], "mm-both", seed=1)[u.utterance_id]
            assert s.startswith(u.speaker_id + COND_SEP) and not s.endswith(u.env_id)
            assert e.startswith(u.env_id + COND_SEP) and not e.endswith(u.speaker_id)

    def test_unknown_condition_is_a_key_error(self, corpora, cache, trained):
        _, dte, _ = corpora
        model, _, _ = trained
        other = generate_synthetic_corpus(SyntheticTaskSpec(n_speakers=1, n_envs=1, utts_per_cell=1, speaker_offset=7), "x").utterances()
        with pytest.raises(KeyError, match="spk007"):
            rapid_adapt_from_cache(model, cache, other, "matched")

    def test_rapid_decoding_is_deterministic(self, corpora, cache, trained):
        _, dte, _ = corpora
        model, _, _ = trained
        utts = dte.utterances()
        assert rapid_adapt_from_cache(model, cache, utts, "mm-env", seed=3) == rapid_adapt_from_cache(model, cache, utts, "mm-env", seed=3)
