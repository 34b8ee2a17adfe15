"""Command-line entry point: ``factoradapt <verb> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import CACHE_VERSION, AdaptationMode, load_cache, save_cache
from .autodiff import CHECKPOINT_VERSION
from .config import CONFIG_VERSION, ConfigError, ExperimentConfig, load_config
from .features import ARCHIVE_VERSION, FeatureSequence, ManifestEntry, load_feature_archive, read_manifest, save_feature_archive, write_manifest
from .model import ConformerASR, ModelConfig, decode_ids

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_RUNTIME = 6
EXIT_CHECK = 7

EXIT_HELP = """exit codes:
  0  success
  2  usage error (unknown verb or bad flag)
  3  malformed config
  4  missing input file
  5  malformed or inconsistent input data
  6  runtime failure (numerical or internal)
  7  selfcheck reported a failing suite

On failure a single line 'error: <category>: <message>' is written to stderr.
"""

HYP_VERSION = 1


class CLIError(Exception):
    def __init__(self, code: int, category: str, message: str):
        super().__init__(message)
        self.code = code
        self.category = category


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(EXIT_MISSING, "missing-input", f"{p} does not exist")
    return p


# ------------------------------------------------------------------ run directories


def _run_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _archive(run: Path, cfg: ExperimentConfig, verb: str, extra: dict | None = None):
    (run / "config.txt").write_text(cfg.to_text())
    seeds = {"root": cfg.seed, **cfg.seeds()}
    lines = [f"# factoradapt seed record v{CONFIG_VERSION}", f"verb = {verb}"] + [f"{k} = {v}" for k, v in seeds.items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    (run / "seeds.txt").write_text("\n".join(lines) + "\n")


def _summary(run: Path, rows: list[tuple[str, object]]):
    (run / "summary.txt").write_text("".join(f"{k}: {v}\n" for k, v in rows))


def write_hypotheses(path, hyps, cfg: ModelConfig):
    """``utt<TAB>text<TAB>score`` per line, after a version comment."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# factoradapt hypotheses v{HYP_VERSION}\n")
        for utt in sorted(hyps):
            h = hyps[utt]
            fh.write(f"{utt}\t{decode_ids(h.tokens, cfg)}\t{h.score!r}\n")


def read_hypotheses(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise CLIError(EXIT_DATA, "bad-hypothesis-file", f"{path}:{n}: expected utt<TAB>text")
            out[cols[0]] = cols[1]
    return out


# ------------------------------------------------------------------ data loading


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        try:
            cfg = load_config(_need(args.config))
        except ConfigError as exc:
            raise CLIError(EXIT_CONFIG, "malformed-config", str(exc)) from None
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _synthetic_split(cfg: ExperimentConfig, split: str):
    from .pipelines import generate_synthetic_corpus

    seed = cfg.seeds()["data"]
    spec = cfg.data.train_spec(seed) if split == "train" else cfg.data.test_spec(seed)
    return generate_synthetic_corpus(spec, split).utterances(), spec


def _utterances(args, cfg: ExperimentConfig, split: str) -> list[FeatureSequence]:
    path = getattr(args, "features", None) or (cfg.data.features if split == "train" else "")
    if path:
        try:
            return load_feature_archive(_need(path))
        except (ValueError, KeyError) as exc:
            raise CLIError(EXIT_DATA, "bad-feature-archive", str(exc)) from None
    utts, _ = _synthetic_split(cfg, split)
    return utts


def _model_cfg(cfg: ExperimentConfig, utts) -> ModelConfig:
    from dataclasses import replace

    feat_dim = utts[0].frames.shape[1]
    alphabet = cfg.model.alphabet
    chars = sorted({c for u in utts if u.transcript for c in u.transcript})
    if any(c not in alphabet for c in chars):
        alphabet = "".join(chars)
    return replace(cfg.model, input_dim=feat_dim, alphabet=alphabet, seed=cfg.seeds()["model"] % 2**31)


def _load_model(model_dir) -> ConformerASR:
    d = _need(model_dir)
    try:
        return ConformerASR.load(_need(d / "model.ckpt"), _need(d / "model.cfg"))
    except ValueError as exc:
        raise CLIError(EXIT_DATA, "bad-checkpoint", str(exc)) from None


def _mode(args, cfg: ExperimentConfig) -> AdaptationMode:
    a = cfg.adapt
    for key in ("mode", "beta", "spk_kind", "env_kind", "order"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(a, key, v)
    if getattr(args, "bayesian", False):
        a.bayesian = True
    if getattr(args, "epochs", None) is not None:
        a.epochs = args.epochs
    try:
        return a.mode_obj()
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, "bad-adaptation-mode", str(exc)) from None


def _wer_rows(utts, hyps, model_cfg, label):
    from .pipelines import token_error_rate

    if not all(u.transcript for u in utts):
        return []
    return [(f"{label}_ter", repr(token_error_rate(utts, hyps, model_cfg).wer))]


# ------------------------------------------------------------------ verbs


def cmd_simulate_noise(args) -> int:
    from .features import FrontendConfig, extract_logmel
    from .noise import (
        TEST_SNRS,
        TRAIN_SNRS,
        build_augmented_corpus,
        build_nonaugmented_corpus,
        load_noise_dir,
        load_waveform,
        render,
        synthetic_noise_bank,
        training_conditions,
        write_wav,
    )

    cfg = _config(args)
    seed = cfg.seeds()["noise"] % 2**31
    entries = read_manifest(_need(args.clean))
    unseen = tuple(x for x in args.unseen.split(",") if x)
    bank = load_noise_dir(_need(args.noise_dir), unseen) if args.noise_dir else synthetic_noise_bank(seed=seed, unseen=unseen)
    snrs = TRAIN_SNRS if args.snr_set == "train" else TEST_SNRS
    train_cond = training_conditions([n for n, p in bank.items() if p.category == "seen"], TRAIN_SNRS)
    base = Path(args.clean).parent
    clean = {}
    for e in entries:
        p = Path(e.path)
        clean[e.utt_id] = load_waveform(_need(p if p.is_absolute() else base / p))
    utts = [(e.utt_id, e.speaker_id, clean[e.utt_id].samples.size) for e in entries]
    lengths = {k: v.samples.size for k, v in bank.items()}
    build = build_augmented_corpus if args.protocol == "augmented" else build_nonaugmented_corpus
    records = build(utts, lengths, snrs, seed, train_cond)
    run = _run_dir(args.out)
    (run / "wav").mkdir(exist_ok=True)
    by_id = {e.utt_id: e for e in entries}
    out_entries, feats = [], []
    for r in records:
        mixed = render(r, clean[r.source_utt_id], bank, train_cond)
        rel = f"wav/{r.utt_id}.wav"
        write_wav(run / rel, mixed.waveform)
        src = by_id[r.source_utt_id]
        extra = [f"noise={r.noise_id}", f"snr={r.snr_db:g}", f"seen={int(r.seen_flag)}", f"gain={mixed.spec.gain!r}"]
        out_entries.append(ManifestEntry(r.utt_id, r.speaker_id, r.env_id, rel, src.transcript, extra))
        if args.features:
            meta = {"noise": r.noise_id, "snr": f"{r.snr_db:g}", "seen": str(int(r.seen_flag))}
            feats.append(
                FeatureSequence(extract_logmel(mixed.waveform, FrontendConfig()), r.speaker_id, r.env_id, r.utt_id, src.transcript or None, meta)
            )
    write_manifest(run / "manifest.tsv", out_entries, f"factoradapt corrupted manifest protocol={args.protocol}")
    if args.features:
        save_feature_archive(run / "features.npz", feats)
    _archive(run, cfg, "simulate-noise", {"noise_seed": seed})
    _summary(run, [("protocol", args.protocol), ("utterances", len(records)), ("noise_types", len(bank)), ("snrs", list(snrs))])
    print(f"wrote {len(records)} corrupted utterances to {run}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipelines import adaptive_train

    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    utts = _utterances(args, cfg, "train")
    model_cfg = _model_cfg(cfg, utts)
    mode = _mode(args, cfg) if cfg.adapt.adaptive_training and args.mode != "none" else None
    from dataclasses import replace

    from .pipelines import AdaptationDataset

    train_cfg = replace(cfg.train, seed=cfg.seeds()["train"] % 2**31)
    model, transforms, history = adaptive_train(AdaptationDataset(utts), model_cfg, train_cfg, mode)
    run = _run_dir(args.out)
    model.save(run / "model.ckpt", run / "model.cfg")
    rows = [("utterances", len(utts)), ("epochs", train_cfg.epochs), ("checksum", model.checksum())]
    rows += [(f"epoch_{i}_loss", repr(v)) for i, v in enumerate(history)]
    if transforms is not None:
        save_cache(run / "train_transforms.cache", transforms)
        rows.append(("adaptive_mode", mode.describe()))
    _archive(run, cfg, "train")
    _summary(run, rows)
    print(f"final loss {history[-1]:.6f}; model written to {run}")
    return EXIT_OK


def _test_utts(args, cfg, model):
    utts = _utterances(args, cfg, "test")
    if utts[0].frames.shape[1] != model.cfg.input_dim:
        raise CLIError(EXIT_DATA, "feature-dim-mismatch", f"features have {utts[0].frames.shape[1]} dims, model expects {model.cfg.input_dim}")
    return utts


def cmd_decode(args) -> int:
    from .pipelines import decode_all

    cfg = _config(args)
    model = _load_model(args.model)
    utts = _test_utts(args, cfg, model)
    cache = load_cache(_need(args.cache)) if args.cache else None
    if cache is not None and cache.variational:
        cache = cache.posterior_mean()
    hyps = decode_all(model, utts, cache, beam=args.beam or cfg.adapt.beam)
    run = _run_dir(args.out)
    write_hypotheses(run / "hyp.txt", hyps, model.cfg)
    if all(u.transcript is not None for u in utts):
        refs = [ManifestEntry(u.utterance_id, u.speaker_id, u.env_id, "-", u.transcript) for u in utts]
        write_manifest(run / "reference.tsv", refs, "factoradapt reference transcripts")
    _archive(run, cfg, "decode")
    _summary(run, [("utterances", len(utts)), *_wer_rows(utts, hyps, model.cfg, "decode")])
    return EXIT_OK


def cmd_adapt(args) -> int:
    from .pipelines import test_time_adapt

    cfg = _config(args)
    model = _load_model(args.model)
    first = _load_model(args.first_pass_model) if args.first_pass_model else None
    utts = _test_utts(args, cfg, model)
    mode = _mode(args, cfg)
    est = cfg.adapt.estimation(cfg.seeds()["adapt"] % 2**31)
    res = test_time_adapt(model, utts, mode, est, first_pass_model=first, beam=args.beam or cfg.adapt.beam)
    run = _run_dir(args.out)
    write_hypotheses(run / "first_pass.hyp", res.first_pass, model.cfg)
    write_hypotheses(run / "adapted.hyp", res.adapted, model.cfg)
    save_cache(run / "transforms.cache", res.transforms)
    rows = [("mode", mode.describe()), ("bayesian", est.bayesian), ("utterances", len(utts))]
    rows += [(f"objective_epoch_{i}", repr(v)) for i, v in enumerate(res.history)]
    rows += [(f"norm.{ot}.{oid}", repr(float(np.linalg.norm(t.mean.data)))) for (ot, oid), t in sorted(res.transforms.transforms.items())]
    rows += _wer_rows(utts, res.first_pass, model.cfg, "first_pass") + _wer_rows(utts, res.adapted, model.cfg, "adapted")
    _archive(run, cfg, "adapt")
    _summary(run, rows)
    return EXIT_OK


def cmd_rapid_adapt(args) -> int:
    from .pipelines import build_condition_cache, decode_all, rapid_adapt_from_cache

    cfg = _config(args)
    model = _load_model(args.model)
    utts = _test_utts(args, cfg, model)
    run = _run_dir(args.out)
    if args.cache:
        cache = load_cache(_need(args.cache))
    else:
        mode = _mode(args, cfg)
        first = decode_all(model, utts)
        labels = {k: h.tokens for k, h in first.items()}
        cache = build_condition_cache(model, utts, labels, mode, cfg.adapt.estimation(cfg.seeds()["adapt"] % 2**31))
        save_cache(run / "condition.cache", cache)
    try:
        hyps = rapid_adapt_from_cache(model, cache, utts, args.pairing, cfg.seeds()["decode"] % 2**31)
    except KeyError as exc:
        raise CLIError(EXIT_DATA, "missing-cache-key", str(exc).strip("'\"")) from None
    write_hypotheses(run / "hyp.txt", hyps, model.cfg)
    _archive(run, cfg, "rapid-adapt")
    _summary(run, [("pairing", args.pairing), ("utterances", len(utts)), *_wer_rows(utts, hyps, model.cfg, args.pairing)])
    return EXIT_OK


def cmd_score(args) -> int:
    from .scoring import format_report, score_corpus

    entries = read_manifest(_need(args.ref))
    hyps = read_hypotheses(_need(args.hyp))
    unit = args.unit
    split = (lambda s: s.split()) if unit == "word" else list
    refs, attrs = {}, {}
    for e in entries:
        refs[e.utt_id] = split(e.transcript)
        a = {"speaker": e.speaker_id, "env": e.env_id}
        for x in e.extra:
            k, _, v = x.partition("=")
            a[k] = v
        attrs[e.utt_id] = a
    report = score_corpus(refs, {k: split(v) for k, v in hyps.items()}, attrs)
    try:
        text, tsv = format_report(report, [k for k in args.group_by.split(",") if k])
    except ValueError as exc:
        raise CLIError(EXIT_DATA, "empty-reference", str(exc)) from None
    sys.stdout.write(text)
    if args.out:
        run = _run_dir(args.out)
        (run / "score.txt").write_text(text)
        (run / "score.tsv").write_text(tsv)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all(quick=not args.full)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name} {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_CHECK


def cmd_study(args) -> int:
    from dataclasses import asdict

    from .study import StudyConfig, direction_checks, rapid_checks, run_study

    cfg = _config(args)
    try:
        seeds = tuple(int(x) for x in args.seeds.split(",") if x.strip())
    except ValueError:
        raise CLIError(EXIT_USAGE, "usage", f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise CLIError(EXIT_USAGE, "usage", "--seeds is empty")
    overrides = {k: v for k, v in asdict(cfg.model).items() if k not in ("input_dim", "alphabet", "seed")}
    study_cfg = StudyConfig(seeds, cfg.data, overrides, cfg.train, cfg.adapt.estimation(0), rapid=not args.no_rapid)
    res = run_study(study_cfg, log=print)
    checks = direction_checks(res) + (rapid_checks(res) if study_cfg.rapid else [])
    lines = [res.table(), f"wall {res.seconds:.0f}s cpu {res.cpu_seconds:.0f}s"]
    lines += [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in checks]
    print("\n".join(lines))
    run = _run_dir(args.out)
    (run / "study.txt").write_text("\n".join(lines) + "\n")
    _archive(run, cfg, "study", {"seeds": args.seeds})
    rows = [(f"seed_{r.seed}_{k}", repr(v)) for r in res.runs for k, v in r.ter.items()]
    rows += [(f"mean_{k}", repr(res.mean(k))) for k in res.systems()]
    rows.append(("checksum_stable", all(r.checksum_stable for r in res.runs)))
    _summary(run, rows)
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_CHECK


def version_text() -> str:
    return "\n".join(
        [
            f"factoradapt {__version__}",
            f"checkpoint format {CHECKPOINT_VERSION}",
            f"transform cache format {CACHE_VERSION}",
            f"feature archive format {ARCHIVE_VERSION}",
            f"experiment config format {CONFIG_VERSION}",
            f"hypothesis file format {HYP_VERSION}",
        ]
    )


# ------------------------------------------------------------------ argument parsing


def _add_common(p, model=False, data=True):
    p.add_argument("--config", help="experiment config file (key = value)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", required=True, help="run directory")
    if model:
        p.add_argument("--model", required=True, help="directory holding model.ckpt and model.cfg")
    if data:
        p.add_argument("--features", help="feature archive (.npz); default: the synthetic split from the config")


def _add_mode(p):
    p.add_argument("--mode", choices=["speaker", "env", "joint", "lfa", "cfa"])
    p.add_argument("--beta", type=float)
    p.add_argument("--spk-kind", dest="spk_kind", choices=["lhuc", "hub"])
    p.add_argument("--env-kind", dest="env_kind", choices=["lhuc", "hub"])
    p.add_argument("--order", choices=["speaker-first", "env-first"])
    p.add_argument("--bayesian", action="store_true")
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="factoradapt",
        description="Factorised speaker-environment adaptation for a toy Conformer recogniser.",
        epilog=EXIT_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="store_true", help="print file format versions and exit")
    sub = parser.add_subparsers(dest="verb")

    p = sub.add_parser("simulate-noise", help="corrupt clean audio with noise at controlled SNRs")
    _add_common(p, data=False)
    p.add_argument("--clean", required=True, help="clean manifest (paths relative to the manifest)")
    p.add_argument("--noise-dir", help="directory of noise .wav/.npy files; default: built-in bank")
    p.add_argument("--unseen", default="", help="comma-separated noise ids absent from training")
    p.add_argument("--protocol", choices=["non-augmented", "augmented"], default="non-augmented")
    p.add_argument("--snr-set", choices=["train", "test"], default="train")
    p.add_argument("--features", action="store_true", help="also write a log-mel feature archive")
    p.set_defaults(func=cmd_simulate_noise)

    p = sub.add_parser("train", help="train the canonical model, optionally with SD/ED transforms")
    _add_common(p)
    p.add_argument("--mode", choices=["none", "speaker", "env", "joint", "lfa", "cfa"])
    p.add_argument("--beta", type=float)
    p.add_argument("--spk-kind", dest="spk_kind", choices=["lhuc", "hub"])
    p.add_argument("--env-kind", dest="env_kind", choices=["lhuc", "hub"])
    p.add_argument("--order", choices=["speaker-first", "env-first"])
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="unsupervised test-time adaptation: decode, estimate, re-decode")
    _add_common(p, model=True)
    _add_mode(p)
    p.add_argument("--first-pass-model", help="model directory used for the first pass (default: --model)")
    p.add_argument("--passes", type=int, default=2, choices=[2], help="decode passes (only 2 is supported)")
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("rapid-adapt", help="decode with cached transforms under a pairing")
    _add_common(p, model=True)
    _add_mode(p)
    p.add_argument("--cache", help="condition cache; default: build one from first-pass labels")
    p.add_argument("--pairing", choices=["matched", "mm-env", "mm-spk", "mm-both"], default="matched")
    p.set_defaults(func=cmd_rapid_adapt)

    p = sub.add_parser("decode", help="decode features with a model and optional transform cache")
    _add_common(p, model=True)
    p.add_argument("--cache")
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score a hypothesis file against a reference manifest")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--group-by", default="", help="comma-separated attributes, e.g. env,snr,seen")
    p.add_argument("--unit", choices=["char", "word"], default="char")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("selfcheck", help="run gradient and oracle suites")
    p.add_argument("--full", action="store_true", help="run the full-size suites")
    p.set_defaults(func=cmd_selfcheck)

    p = sub.add_parser("study", help="multi-seed comparison of adapted systems on the synthetic corpus")
    p.add_argument("--config", help="experiment config file (key = value)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated study seeds")
    p.add_argument("--no-rapid", dest="no_rapid", action="store_true", help="skip the cached-transform pairings")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.version:
        print(version_text())
        return EXIT_OK
    if not args.verb:
        parser.print_usage(sys.stderr)
        print("error: usage: no verb given", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as exc:
        print(f"error: bad-data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, RuntimeError) as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
