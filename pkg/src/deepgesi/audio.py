"""WAV input/output and resampling to the model rate."""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal

TARGET_SR = 16000

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(Exception):
    """Base class for audio ingestion failures."""


class UnreadableAudioError(AudioError):
    pass


class UnsupportedEncodingError(AudioError):
    pass


class EmptyAudioError(AudioError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate_hz: int
    source_path: str = ""

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise EmptyAudioError(f"{self.source_path or 'buffer'}: no samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _parse_chunks(data: bytes, path: str):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnreadableAudioError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = int.from_bytes(data[pos + 4:pos + 8], "little")
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise UnreadableAudioError(f"{path}: missing or truncated fmt chunk")
    if payload is None:
        raise UnreadableAudioError(f"{path}: missing data chunk")
    return fmt, payload


def _decode(fmt: bytes, payload: bytes, path: str):
    tag = int.from_bytes(fmt[0:2], "little")
    channels = int.from_bytes(fmt[2:4], "little")
    rate = int.from_bytes(fmt[4:8], "little")
    bits = int.from_bytes(fmt[14:16], "little")
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        tag = int.from_bytes(fmt[24:26], "little")
    if channels < 1 or rate < 1:
        raise UnreadableAudioError(f"{path}: invalid header ({channels} channels, {rate} Hz)")

    width = bits // 8
    frame = width * channels
    nframes = len(payload) // frame if frame else 0
    if nframes == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    raw = payload[:nframes * frame]

    if tag == _WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == _WAVE_FORMAT_PCM and bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v & 0x800000, v - (1 << 24), v)
        x = v.astype(np.float64) / 8388608.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 64:
        x = np.frombuffer(raw, dtype="<f8").copy()
    else:
        raise UnsupportedEncodingError(
            f"{path}: unsupported encoding (format tag {tag}, {bits} bits); "
            "expected PCM-16, PCM-24 or IEEE float"
        )
    return x.reshape(nframes, channels), rate


def load_wav(path) -> AudioBuffer:
    """Read a WAV file as a mono buffer; channels are averaged."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise UnreadableAudioError(f"{path}: {exc.strerror or exc}") from exc
    fmt, payload = _parse_chunks(data, path)
    frames, rate = _decode(fmt, payload, path)
    mono = frames.mean(axis=1) if frames.shape[1] > 1 else frames[:, 0]
    return AudioBuffer(np.clip(mono, -1.0, 1.0), rate, path)


def write_wav(path, buf: AudioBuffer, encoding: str = "pcm16") -> None:
    """Write a mono buffer as PCM-16 (default) or IEEE float32."""
    x = np.asarray(buf.samples, dtype=np.float64)
    if encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        with wave.open(os.fspath(path), "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(buf.sample_rate_hz)
            w.writeframes(q.tobytes())
        return
    if encoding != "float32":
        raise ValueError(f"unknown encoding {encoding!r}")
    payload = x.astype("<f4").tobytes()
    fmt = (
        _WAVE_FORMAT_IEEE_FLOAT.to_bytes(2, "little")
        + (1).to_bytes(2, "little")
        + buf.sample_rate_hz.to_bytes(4, "little")
        + (buf.sample_rate_hz * 4).to_bytes(4, "little")
        + (4).to_bytes(2, "little")
        + (32).to_bytes(2, "little")
    )
    body = b"WAVE" + b"fmt " + len(fmt).to_bytes(4, "little") + fmt
    body += b"data" + len(payload).to_bytes(4, "little") + payload
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + len(body).to_bytes(4, "little") + body)


def _polyphase_filter(up: int, down: int, taps_per_phase: int = 64, beta: float = 8.6):
    """Kaiser-windowed sinc low-pass for rational resampling.

    Each of the `up` polyphase components is scaled to unit DC gain, which
    keeps constant signals exactly constant for any ratio.  The result is
    divided by `up` because resample_poly multiplies it back.
    """
    h = signal.firwin(taps_per_phase * up + 1, 1.0 / max(up, down), window=("kaiser", beta))
    # phase p and phase -p mod up have equal sums, so this keeps h symmetric
    for p in range(up):
        h[p::up] /= h[p::up].sum()
    return h / up


def resample(buf: AudioBuffer, target_hz: int = TARGET_SR) -> AudioBuffer:
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if buf.sample_rate_hz == target_hz:
        return buf
    ratio = Fraction(target_hz, buf.sample_rate_hz)
    up, down = ratio.numerator, ratio.denominator
    h = _polyphase_filter(up, down)
    y = signal.resample_poly(buf.samples, up, down, window=h, padtype="edge")
    return AudioBuffer(y, target_hz, buf.source_path)


def load_audio(path, target_hz: int = TARGET_SR, normalize_rms: float | None = None) -> AudioBuffer:
    """Full ingestion: read, reduce to mono, resample to `target_hz`.

    `normalize_rms` optionally rescales to the given RMS level; off by default.
    """
    buf = resample(load_wav(path), target_hz)
    if normalize_rms is not None:
        rms = float(np.sqrt(np.mean(buf.samples ** 2)))
        if rms > 0:
            buf = AudioBuffer(buf.samples * (normalize_rms / rms), buf.sample_rate_hz, buf.source_path)
    return buf
