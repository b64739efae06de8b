"""Agreement metrics, scoring of manifests, and latency benchmarking."""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .audio import AudioError, load_audio
from .features import FeatureError, extract, stft_features
from .model import ModelError, RopeTable, forward_utterance


class MetricError(ValueError):
    pass


def _pair(preds, targets, min_len=1):
    p = np.asarray(preds, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise MetricError(f"length mismatch: {p.size} predictions, {t.size} targets")
    if p.size < min_len:
        raise MetricError(f"need at least {min_len} pairs, got {p.size}")
    return p, t


def mse(preds, targets) -> float:
    p, t = _pair(preds, targets)
    d = p - t
    return float(np.dot(d, d) / d.size)


def lcc(preds, targets) -> float:
    """Pearson correlation.  A constant input raises instead of returning NaN."""
    p, t = _pair(preds, targets, 2)
    pc, tc = p - p.mean(), t - t.mean()
    vp, vt = np.dot(pc, pc), np.dot(tc, tc)
    if vp == 0.0:
        raise MetricError("predictions are constant; correlation is undefined")
    if vt == 0.0:
        raise MetricError("targets are constant; correlation is undefined")
    # one sqrt of the product: identical inputs then give exactly 1
    r = np.dot(pc, tc) / np.sqrt(vp * vt)
    return float(min(1.0, max(-1.0, r)))


def srcc(preds, targets) -> float:
    """Spearman correlation: Pearson on average (fractional) ranks."""
    p, t = _pair(preds, targets, 2)
    return lcc(rankdata(p, method="average"), rankdata(t, method="average"))


# -- scoring -------------------------------------------------------------------

class Scorer:
    """Frozen model ready for inference on audio files or buffers."""

    def __init__(self, ckpt: ckpt_io.Checkpoint):
        self.ckpt = ckpt
        self.params, self.fb, self.norm = ckpt.build()
        self.cfg = ckpt.model_cfg
        self.stft_cfg = ckpt.stft_cfg
        self.rope = RopeTable(self.cfg.head_dim) if self.cfg.positional_encoding == "rope" else None

    @classmethod
    def load(cls, path):
        return cls(ckpt_io.load(path))

    def score_samples(self, samples) -> tuple:
        """(frame scores, utterance score) for 16 kHz mono samples."""
        with ad.no_grad():
            fp = extract(samples, self.stft_cfg, self.fb,
                         stft_features(samples, self.stft_cfg, self.fb.dtype))
            frames, mean = forward_utterance(fp, self.params, self.cfg, self.norm, self.rope)
        return frames.value, float(mean.value)

    def score_file(self, path) -> float:
        """Utterance score for a WAV file, resampled to the model's rate."""
        buf = load_audio(path, self.fb.sample_rate)
        return self.score_samples(buf.samples)[1]


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    pairs: list  # (utt_id, prediction, target)
    mse: float
    lcc: float
    srcc: float
    latency: dict = field(default_factory=dict)
    condition: str = "seen"
    failures: list = field(default_factory=list)  # (path, message)

    def to_text(self) -> str:
        """Key-value summary followed by CSV sections, in a fixed order."""
        out = io.StringIO()
        out.write(f"condition: {self.condition}\n")
        out.write(f"n: {len(self.pairs)}\n")
        out.write(f"mse: {self.mse:.10g}\n")
        out.write(f"lcc: {self.lcc:.10g}\n")
        out.write(f"srcc: {self.srcc:.10g}\n")
        for key in ("mean", "p50", "p95", "throughput"):
            if key in self.latency:
                out.write(f"latency_{key}: {self.latency[key]:.6g}\n")
        out.write(f"failures: {len(self.failures)}\n")
        out.write("\n[scatter]\n")
        out.write(scatter_csv(self.pairs))
        if self.failures:
            out.write("\n[failures]\npath,error\n")
            w = csv.writer(out, lineterminator="\n")
            for path, msg in self.failures:
                w.writerow([path, msg])
        return out.getvalue()


def scatter_csv(pairs) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "prediction", "target"])
    for uid, pred, tgt in pairs:
        w.writerow([uid, f"{pred:.8f}", f"{tgt:.8f}"])
    return out.getvalue()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def worker_count() -> int:
    try:
        n = int(os.environ.get("DEEPGESI_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, n)


def evaluate(scorer: Scorer, entries, out_dir=None, condition: str = "seen") -> EvalReport:
    """Score every entry.  Unreadable files are collected as failures and the
    rest are still evaluated."""
    entries = list(entries)
    if not entries:
        raise MetricError("no utterances to evaluate")

    def one(entry):
        t0 = time.perf_counter()
        try:
            score = scorer.score_file(entry.audio_path)
        except (AudioError, FeatureError, ModelError) as exc:
            return entry, None, str(exc), 0.0
        return entry, score, None, time.perf_counter() - t0

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]

    pairs, failures, times = [], [], []
    for entry, score, err, dt in results:
        if err is not None:
            failures.append((entry.audio_path, err))
        else:
            pairs.append((entry.utt_id, score, entry.target))
            times.append(dt)
    if not pairs:
        raise MetricError(f"all {len(entries)} utterances failed to score")
    preds = [p for _, p, _ in pairs]
    tgts = [t for _, _, t in pairs]
    report = EvalReport(
        pairs=pairs, mse=mse(preds, tgts), lcc=lcc(preds, tgts), srcc=srcc(preds, tgts),
        latency=latency_stats(times), condition=condition, failures=failures,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_atomic(out / f"scatter_{condition}.csv", scatter_csv(pairs))
        write_atomic(out / f"report_{condition}.txt", report.to_text())
    return report


# -- latency -------------------------------------------------------------------

def latency_stats(times) -> dict:
    t = np.asarray(times, dtype=np.float64)
    if t.size == 0:
        return {}
    return {
        "mean": float(t.mean()),
        "p50": float(np.percentile(t, 50)),
        "p95": float(np.percentile(t, 95)),
        "throughput": float(t.size / t.sum()) if t.sum() > 0 else float("inf"),
        "n": int(t.size),
    }


def bench(scorer: Scorer, signals, repetitions: int = 1, warmup: int = 2,
          forward_only: bool = False) -> dict:
    """Per-utterance inference latency over in-memory signals.

    Times feature extraction plus the forward pass unless ``forward_only``,
    in which case features are computed once outside the timed region.
    Warm-up runs on the first signal are discarded.
    """
    signals = [np.asarray(s, dtype=np.float64) for s in signals]
    if not signals:
        raise MetricError("bench needs at least one utterance")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    prepared = None
    if forward_only:
        with ad.no_grad():
            prepared = [extract(s, scorer.stft_cfg, scorer.fb) for s in signals]

    def run(i):
        if forward_only:
            with ad.no_grad():
                forward_utterance(prepared[i], scorer.params, scorer.cfg, scorer.norm, scorer.rope)
        else:
            scorer.score_samples(signals[i])

    for _ in range(warmup):
        run(0)
    times = []
    for _ in range(repetitions):
        for i in range(len(signals)):
            t0 = time.perf_counter()
            run(i)
            times.append(time.perf_counter() - t0)
    stats = latency_stats(times)
    stats["forward_only"] = forward_only
    return stats
