"""Command-line entry point: synth, train, predict, evaluate, bench.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .audio import AudioError, load_audio
from .checkpoint import CheckpointError
from .evaluation import MetricError, Scorer, bench, evaluate, write_atomic
from .features import FeatureError, StftConfig
from .labels import SPLITS, ManifestError, load_manifest, split_counts, synth_dataset
from .model import ModelConfig, ModelError
from .training import NumericError, TrainConfig, TrainingError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "stft": StftConfig}
_DATA_ERRORS = (ManifestError, AudioError, FeatureError, CheckpointError, MetricError,
                ModelError, TrainingError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- config ----------------------------------------------------------------------

def _field_owner():
    owner = {}
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            owner[f.name] = (section, f)
    return owner


def _convert(field, text: str):
    default = field.default
    if isinstance(default, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise UsageError(f"{field.name}: expected a number, got {text!r}") from None
    return text.strip()


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``[section]`` headers are allowed and ignored."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: config file not found")
    text = path.read_text()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string("[__top__]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    out = {}
    for sec in cp.sections():
        out.update(cp[sec])
    return out


def resolve_config(file_values: dict, overrides: dict):
    """Merge file values then overrides into (ModelConfig, TrainConfig,
    StftConfig).  Unknown keys raise UsageError."""
    owner = _field_owner()
    per = {s: {} for s in _SECTIONS}
    for source in (file_values, overrides):
        for key, text in source.items():
            if key not in owner:
                raise UsageError(f"unknown config key {key!r}")
            section, f = owner[key]
            per[section][key] = _convert(f, text) if isinstance(text, str) else text
    try:
        return tuple(cls(**per[s]) for s, cls in _SECTIONS.items())
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def config_text(model_cfg, train_cfg, stft_cfg) -> str:
    lines = []
    for section, cfg in zip(_SECTIONS, (model_cfg, train_cfg, stft_cfg)):
        lines.append(f"[{section}]")
        for k, v in dataclasses.asdict(cfg).items():
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


# -- commands --------------------------------------------------------------------

def cmd_synth(args):
    if args.n < 1:
        raise UsageError("--n must be a positive integer")
    manifest = synth_dataset(args.n, args.seed, args.out)
    print(manifest)
    return EXIT_OK


def cmd_train(args):
    file_values = read_config_file(args.config) if args.config else {}
    overrides = _parse_sets(args.set)
    for key, attr in (("activation", "activation"), ("positional_encoding", "pe"), ("lr", "lr"),
                      ("batch_size", "batch_size"), ("max_epochs", "max_epochs"),
                      ("early_stop_patience", "patience"), ("seed", "seed"),
                      ("clip_norm", "clip_norm")):
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = str(value)
    model_cfg, train_cfg, stft_cfg = resolve_config(file_values, overrides)
    if args.target_sr < 1:
        raise UsageError("--target-sr must be positive")
    entries = load_manifest(args.manifest)
    counts = split_counts(entries)
    print("manifest: " + ", ".join(f"{k} {v}" for k, v in counts.items()), file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "config.ini", config_text(model_cfg, train_cfg, stft_cfg))
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    result = train(entries, train_cfg, model_cfg, out, stft_cfg, resume=args.resume, log=log,
                   fb_kwargs={"sample_rate": args.target_sr})
    print(result.best_path)
    return EXIT_OK


def cmd_predict(args):
    scorer = Scorer.load(args.checkpoint)
    status = EXIT_OK
    for path in args.wav:
        try:
            score = scorer.score_file(path)
        except (AudioError, FeatureError, ModelError) as exc:
            print(f"{path}\terror: {exc}", file=sys.stderr)
            status = EXIT_DATA
            continue
        print(f"{path}\t{score:.6f}", flush=True)
    return status


def _split_entries(manifest, split):
    entries = load_manifest(manifest)
    if split != "all":
        entries = [e for e in entries if e.split == split]
    if not entries:
        raise ManifestError(f"{manifest}: split {split!r} has no entries")
    return entries


def _echo_checkpoint_config(scorer, out):
    out.mkdir(parents=True, exist_ok=True)
    tc = scorer.ckpt.meta.get("train_cfg")
    train_cfg = TrainConfig(**tc) if tc else TrainConfig()
    write_atomic(out / "config.ini", config_text(scorer.cfg, train_cfg, scorer.stft_cfg))


def cmd_evaluate(args):
    scorer = Scorer.load(args.checkpoint)
    entries = _split_entries(args.manifest, args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    _echo_checkpoint_config(scorer, out)
    condition = "unseen" if args.split == "unseen" else "seen"
    report = evaluate(scorer, entries, out, condition)
    print(f"n={len(report.pairs)} mse={report.mse:.6f} lcc={report.lcc:.4f} srcc={report.srcc:.4f} "
          f"failures={len(report.failures)}")
    for path, msg in report.failures:
        print(f"{path}\terror: {msg}", file=sys.stderr)
    return EXIT_DATA if report.failures else EXIT_OK


def cmd_bench(args):
    if args.n < 1 or args.repetitions < 1:
        raise UsageError("--n and --repetitions must be positive")
    scorer = Scorer.load(args.checkpoint)
    entries = _split_entries(args.manifest, args.split)
    rng = np.random.default_rng(args.seed)
    if len(entries) > args.n:
        entries = [entries[i] for i in sorted(rng.choice(len(entries), args.n, replace=False))]
    signals = [load_audio(e.audio_path, scorer.fb.sample_rate).samples for e in entries]
    with threadpool_limits(1):
        stats = bench(scorer, signals, args.repetitions, args.warmup, args.forward_only)
    stats["utterances"] = len(signals)
    text = json.dumps(stats, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _echo_checkpoint_config(scorer, out)
        write_atomic(out / "bench.json", text)
    sys.stdout.write(text)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="deepgesi", description="Non-intrusive GESI intelligibility prediction.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic labelled dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value file with model/train/stft settings")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    t.add_argument("--activation", choices=("maxout", "relu", "leaky_relu", "prelu"))
    t.add_argument("--pe", choices=("rope", "sinusoidal", "learned", "none"))
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--clip-norm", type=float, help="clip gradients to this global norm (e.g. 5)")
    t.add_argument("--target-sr", type=int, default=16000,
                   help="rate audio is resampled to before feature extraction")
    t.add_argument("--resume", help="continue from a last.ckpt")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="score WAV files")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--wav", nargs="+", required=True)
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score a manifest split and write a report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=SPLITS + ("all",))
    e.add_argument("--out", help="report directory (default: the checkpoint's directory)")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="time per-utterance inference")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--manifest", required=True)
    b.add_argument("--split", default="all", choices=SPLITS + ("all",))
    b.add_argument("--n", type=int, default=500)
    b.add_argument("--repetitions", type=int, default=1)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--forward-only", action="store_true", help="exclude feature extraction")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
