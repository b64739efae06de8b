"""Regression targets: manifest loading and a synthetic intelligibility set.

The synthetic oracle is a stand-in for GESI so that training and evaluation
can run end to end without external data.  It is an intrusive score: the
mean, over 8 octave bands, of the correlation between clean and degraded
band envelopes, mapped affinely so that independent noise lands near 0 and
an undistorted signal at 1.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import AudioBuffer, write_wav

SPLITS = ("train", "val", "test", "unseen")
SYNTH_SR = 16000

# Octave bands 31.25-62.5 Hz ... 4-8 kHz.
BAND_EDGES_HZ = 31.25 * 2.0 ** np.arange(9)
ENVELOPE_HOP = 160  # 10 ms envelope frames

# Mean raw score (1 + mean band correlation) / 2 of a synthetic carrier
# against independent white noise, from noise_floor_estimate(1000, seed=2024):
# 0.500950 (std 0.0149, 99th percentile 0.5386, max 0.5523 over the 1000
# trials).  Frozen here so that targets do not depend on rerunning the
# estimate.
NOISE_FLOOR = 0.500950


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    target: float
    split: str

    @property
    def utt_id(self) -> str:
        return Path(self.audio_path).stem


def load_manifest(path, check_files: bool = True) -> list:
    """Read a ``audio_path,target,split`` CSV.  Relative audio paths are
    resolved against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}: no entries")
        if [h.strip() for h in header] != ["audio_path", "target", "split"]:
            raise ManifestError(f"{path}: header must be 'audio_path,target,split', got {','.join(header)!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}: row {row_no}: expected 3 fields, got {len(row)}")
            audio, target, split = (c.strip() for c in row)
            try:
                y = float(target)
            except ValueError:
                raise ManifestError(f"{path}: row {row_no}: target {target!r} is not a number") from None
            if not 0.0 <= y <= 1.0:
                raise ManifestError(f"{path}: row {row_no}: target {y} outside [0, 1]")
            if split not in SPLITS:
                raise ManifestError(f"{path}: row {row_no}: split {split!r} not one of {SPLITS}")
            full = Path(audio) if os.path.isabs(audio) else base / audio
            if check_files and not full.is_file():
                raise ManifestError(f"{path}: row {row_no}: audio file {full} not found")
            entries.append(ManifestEntry(str(full), y, split))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return entries


def split_counts(entries) -> dict:
    counts = {s: 0 for s in SPLITS}
    for e in entries:
        counts[e.split] += 1
    return counts


def write_manifest(path, entries, base=None) -> None:
    """Write entries as CSV; paths under ``base`` are stored relative to it."""
    path = Path(path)
    base = Path(base) if base is not None else path.parent
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["audio_path", "target", "split"])
        for e in entries:
            p = Path(e.audio_path)
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([p.as_posix(), repr(float(e.target)), e.split])
    os.replace(tmp, path)


# -- splits --------------------------------------------------------------------

def assign_splits(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> list:
    """Split labels for n items: val and test get round(n * r) items, train
    the remainder.  Deterministic in ``seed``."""
    if n < 10:
        raise ValueError(f"need at least 10 entries to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    if n_val + n_test > n:
        raise ValueError("ratios leave no room for training data")
    order = np.random.default_rng(seed).permutation(n)
    labels = ["train"] * n
    for i in order[:n_val]:
        labels[i] = "val"
    for i in order[n_val:n_val + n_test]:
        labels[i] = "test"
    return labels


# -- synthetic oracle ------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def utterance_seed(master: int, index: int) -> int:
    return splitmix64(splitmix64(master & _MASK64) ^ index)


def _band_filters(sr=SYNTH_SR):
    sos = []
    for lo, hi in zip(BAND_EDGES_HZ[:-1], BAND_EDGES_HZ[1:]):
        hi = min(hi, 0.999 * sr / 2)
        sos.append(signal.butter(4, [lo, hi], btype="band", fs=sr, output="sos"))
    return sos


_BANDS = _band_filters()


def band_envelopes(x) -> np.ndarray:
    """Rectified octave-band outputs averaged over 10 ms frames, [8, frames]."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size // ENVELOPE_HOP * ENVELOPE_HOP
    return np.stack([
        np.abs(signal.sosfilt(sos, x))[:n].reshape(-1, ENVELOPE_HOP).mean(axis=1)
        for sos in _BANDS
    ])


def raw_oracle(clean, degraded) -> float:
    """(1 + mean band envelope correlation) / 2, in [0, 1]."""
    ec, ed = band_envelopes(clean), band_envelopes(degraded)
    ec = ec - ec.mean(axis=1, keepdims=True)
    ed = ed - ed.mean(axis=1, keepdims=True)
    den = np.sqrt((ec * ec).sum(axis=1) * (ed * ed).sum(axis=1))
    # a silent band has no defined correlation; count it as uncorrelated
    r = np.where(den > 0, (ec * ed).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
    return float((1.0 + r.mean()) / 2.0)


def oracle_score(clean, degraded, floor: float = NOISE_FLOOR) -> float:
    raw = raw_oracle(clean, degraded)
    return float(np.clip((raw - floor) / (1.0 - floor), 0.0, 1.0))


def synth_carrier(rng: np.random.Generator, n: int, sr: int = SYNTH_SR) -> np.ndarray:
    """Harmonic complex plus noise under a slow syllable-like envelope."""
    t = np.arange(n) / sr
    f0 = rng.uniform(90.0, 250.0)
    harmonics = np.arange(1, int(7000.0 / f0))
    amps = rng.uniform(0.2, 1.0, harmonics.size) / harmonics
    phases = rng.uniform(0.0, 2 * np.pi, harmonics.size)
    x = np.zeros(n)
    # chunked to bound the [harmonics, chunk] temporary
    for s in range(0, n, 16000):
        tt = t[s:s + 16000]
        x[s:s + 16000] = amps @ np.sin(2 * np.pi * f0 * np.outer(harmonics, tt) + phases[:, None])
    x /= np.std(x)
    x += 0.5 * rng.standard_normal(n)
    rates = rng.uniform(2.0, 8.0, 3)
    weights = rng.uniform(0.3, 1.0, 3)
    offsets = rng.uniform(0.0, 2 * np.pi, 3)
    m = weights @ np.sin(2 * np.pi * np.outer(rates, t) + offsets[:, None])
    env = np.maximum(0.0, 0.3 + m / np.max(np.abs(m)))
    return x * env


@dataclass(frozen=True)
class SynthUtterance:
    clean: np.ndarray
    degraded: np.ndarray
    snr_db: float
    target: float


def _quantize16(x):
    return np.clip(np.round(x * 32768.0), -32768, 32767) / 32768.0


def synth_utterance(seed: int, snr_db: float | None = None, min_s: float = 1.0,
                    max_s: float = 4.0, sr: int = SYNTH_SR) -> SynthUtterance:
    """One clean/degraded pair.  The degraded signal is already quantized to
    16 bits so the target describes exactly what gets written to disk."""
    rng = np.random.default_rng(seed)
    n = int(round(sr * rng.uniform(min_s, max_s)))
    clean = synth_carrier(rng, n, sr)
    snr = rng.uniform(-10.0, 15.0) if snr_db is None else float(snr_db)
    noise = rng.standard_normal(n)
    noise *= np.std(clean) / np.std(noise) * 10.0 ** (-snr / 20.0)
    mix = clean + noise
    # presentation level varies by +-6 dB around -26 dBFS RMS
    level = 0.05 * 10.0 ** (rng.uniform(-6.0, 6.0) / 20.0)
    mix *= level / np.sqrt(np.mean(mix ** 2))
    peak = np.max(np.abs(mix))
    if peak > 0.99:
        mix *= 0.99 / peak
    degraded = _quantize16(mix)
    return SynthUtterance(clean, degraded, snr, oracle_score(clean, degraded))


def noise_floor_estimate(trials: int = 1000, seed: int = 2024, min_s: float = 1.0,
                         max_s: float = 4.0) -> tuple:
    """Mean and std of the raw score of a carrier against independent noise."""
    vals = np.empty(trials)
    for i in range(trials):
        rng = np.random.default_rng(utterance_seed(seed, i))
        n = int(round(SYNTH_SR * rng.uniform(min_s, max_s)))
        clean = synth_carrier(rng, n)
        vals[i] = raw_oracle(clean, rng.standard_normal(n))
    return float(vals.mean()), float(vals.std()), vals


def synth_dataset(n: int, seed: int, out_dir, ratios=(0.8, 0.1, 0.1)) -> Path:
    """Write n synthetic PCM-16 utterances and ``manifest.csv`` to out_dir.

    Sets of 10 or more are split with ``assign_splits``; smaller sets are all
    ``train``.  Returns the manifest path.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"{out}: output directory is not writable ({exc.strerror or exc})") from exc
    splits = assign_splits(n, ratios, seed) if n >= 10 else ["train"] * n
    width = max(4, len(str(n - 1)))
    entries = []
    for i in range(n):
        utt = synth_utterance(utterance_seed(seed, i))
        wav = out / f"utt{i:0{width}d}.wav"
        write_wav(wav, AudioBuffer(utt.degraded, SYNTH_SR, str(wav)))
        entries.append(ManifestEntry(str(wav), round(utt.target, 6), splits[i]))
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries, out)
    return manifest
