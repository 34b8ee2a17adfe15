import numpy as np
import pytest

from factoradapt.cli import (
    EXIT_CHECK,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_USAGE,
    main,
    read_hypotheses,
)
from factoradapt.features import ManifestEntry, Waveform, write_manifest
from factoradapt.noise import write_wav

TINY = """
seed = 4
model.d_model = 16
model.heads = 2
model.ff_dim = 32
model.conv_kernel = 3
model.sub_channels = 4
train.epochs = 1
train.batch_size = 8
adapt.epochs = 1
adapt.steps_per_epoch = 2
data.train_speakers = 2
data.train_envs = 2
data.train_utts_per_cell = 3
data.test_speakers = 2
data.test_envs = 2
data.test_utts_per_cell = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "model")]) == EXIT_OK
    return root, cfg


def _summary(path):
    return dict(line.split(": ", 1) for line in path.read_text().splitlines())


def test_version_lists_every_format(capsys):
    assert main(["--version"]) == EXIT_OK
    out = capsys.readouterr().out
    for word in ("checkpoint", "transform cache", "feature archive", "experiment config", "hypothesis"):
        assert word in out


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["decode", "--bogus"]) == EXIT_USAGE


def test_missing_and_malformed_inputs(tmp_path, capsys):
    assert main(["decode", "--out", str(tmp_path / "o"), "--model", str(tmp_path / "nope")]) == EXIT_MISSING
    bad = tmp_path / "bad.cfg"
    bad.write_text("adapt.colour = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: malformed-config:")


def test_train_writes_a_run_directory(workspace):
    root, _ = workspace
    run = root / "model"
    for name in ("model.ckpt", "model.cfg", "config.txt", "seeds.txt", "summary.txt", "train_transforms.cache"):
        assert (run / name).exists()
    assert "checksum" in _summary(run / "summary.txt")


def test_adapt_then_decode_with_the_cache(workspace):
    root, cfg = workspace
    out = root / "adapt"
    assert main(["adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(out), "--mode", "lfa"]) == EXIT_OK
    summary = _summary(out / "summary.txt")
    assert summary["mode"] == "lfa(beta=0.7)"
    assert "adapted_ter" in summary and "first_pass_ter" in summary
    dec = root / "dec"
    assert main(["decode", "--config", str(cfg), "--model", str(root / "model"), "--out", str(dec), "--cache", str(out / "transforms.cache")]) == EXIT_OK
    assert read_hypotheses(dec / "hyp.txt") == read_hypotheses(out / "adapted.hyp")


def test_rerun_reproduces_metrics_bit_exactly(workspace):
    root, cfg = workspace
    runs = []
    for name in ("r1", "r2"):
        out = root / name
        assert main(["adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(out), "--bayesian"]) == EXIT_OK
        runs.append(((out / "summary.txt").read_text(), (out / "transforms.cache").read_text()))
    assert runs[0] == runs[1]


def test_rapid_adapt_builds_and_reuses_a_cache(workspace):
    root, cfg = workspace
    out = root / "rapid"
    assert main(["rapid-adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(out), "--pairing", "mm-both"]) == EXIT_OK
    again = root / "rapid2"
    args = ["rapid-adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(again)]
    assert main(args + ["--cache", str(out / "condition.cache"), "--pairing", "mm-both"]) == EXIT_OK
    assert read_hypotheses(out / "hyp.txt") == read_hypotheses(again / "hyp.txt")


def test_rapid_adapt_reports_a_missing_condition(workspace, capsys):
    root, cfg = workspace
    adapted = root / "adapt_for_rapid"
    assert main(["adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(adapted)]) == EXIT_OK
    code = main(
        ["rapid-adapt", "--config", str(cfg), "--model", str(root / "model"), "--out", str(root / "x"), "--cache", str(adapted / "transforms.cache"), "--pairing", "mm-env"]
    )
    assert code == EXIT_DATA
    assert "error: missing-cache-key:" in capsys.readouterr().err


def test_score_groups_by_manifest_attributes(tmp_path, capsys):
    ref = tmp_path / "ref.tsv"
    write_manifest(
        ref,
        [
            ManifestEntry("u1", "s1", "e1", "a.wav", "abc", ["snr=5"]),
            ManifestEntry("u2", "s2", "e1", "b.wav", "ab", ["snr=0"]),
        ],
    )
    hyp = tmp_path / "hyp.txt"
    hyp.write_text("# factoradapt hypotheses v1\nu1\tabd\t-1.0\nu2\tab\t-0.5\n")
    assert main(["score", "--ref", str(ref), "--hyp", str(hyp), "--group-by", "speaker,snr", "--out", str(tmp_path / "s")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "20.00" in out
    rows = (tmp_path / "s" / "score.tsv").read_text().strip().splitlines()
    assert len(rows) == 1 + 1 + 2 + 2


def test_simulate_noise_writes_manifest_and_features(tmp_path):
    clean = tmp_path / "clean"
    clean.mkdir()
    rng = np.random.default_rng(0)
    entries = []
    for i in range(3):
        write_wav(clean / f"c{i}.wav", Waveform(rng.standard_normal(4000) * 0.1, 8000))
        entries.append(ManifestEntry(f"c{i}", f"s{i}", "clean", f"c{i}.wav", "ab"))
    write_manifest(clean / "m.tsv", entries)
    out = tmp_path / "noisy"
    args = ["simulate-noise", "--clean", str(clean / "m.tsv"), "--out", str(out), "--protocol", "augmented", "--snr-set", "test", "--features"]
    assert main(args) == EXIT_OK
    lines = [x for x in (out / "manifest.tsv").read_text().splitlines() if not x.startswith("#")]
    assert len(lines) == 3 * 10 * 7
    assert (out / "features.npz").exists()


def test_selfcheck_reports_each_suite(capsys, monkeypatch):
    import factoradapt.selfcheck as sc

    monkeypatch.setattr(sc, "run_all", lambda quick: [("a", True, "ok"), ("b", False, "bad")])
    assert main(["selfcheck"]) == EXIT_CHECK
    out = capsys.readouterr().out.splitlines()
    assert out == ["PASS a ok", "FAIL b bad"]


def test_study_writes_a_table_and_per_seed_metrics(workspace, capsys):
    root, cfg = workspace
    out = root / "study"
    code = main(["study", "--config", str(cfg), "--out", str(out), "--seeds", "0,1"])
    assert code in (EXIT_OK, EXIT_CHECK)
    summary = _summary(out / "summary.txt")
    assert {"seed_0_baseline", "seed_1_rapid_mm-both", "mean_bayes_cfa_hub_hub"} <= set(summary)
    assert summary["checksum_stable"] == "True"
    text = (out / "study.txt").read_text()
    assert text.count("PASS") + text.count("FAIL") == 5
    assert main(["study", "--config", str(cfg), "--out", str(out), "--seeds", "a,b"]) == EXIT_USAGE
