"""Front-end features: log-magnitude STFT and a learnable sinc filterbank.

Both streams use the same frame length and hop, so their frame counts agree
and alignment only has to trim.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import _kernels
from . import autodiff as ad
from .audio import AudioBuffer

EPS = 1e-8


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 400
    hop_length: int = 160
    fft_size: int = 512
    window: str = "hann"
    eps: float = EPS

    def __post_init__(self):
        if not 0 < self.win_length <= self.fft_size:
            raise ValueError(f"need 0 < win_length <= fft_size, got {self.win_length}, {self.fft_size}")
        if not 0 < self.hop_length <= self.win_length:
            raise ValueError(f"need 0 < hop_length <= win_length, got {self.hop_length}")
        if self.window not in ("hann", "hamming"):
            raise ValueError(f"window must be 'hann' or 'hamming', got {self.window!r}")

    @property
    def num_bins(self) -> int:
        return self.fft_size // 2 + 1


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return 0 if n_samples < win else 1 + (n_samples - win) // hop


def _samples(buf):
    return buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf)


def stft_features(buf, cfg: StftConfig = StftConfig(), dtype=np.float32) -> np.ndarray:
    """Log-magnitude spectrogram, [T frames, fft_size/2 + 1 bins]."""
    x = np.asarray(_samples(buf), dtype=np.float64)
    if x.size < cfg.win_length:
        raise FeatureError(f"utterance of {x.size} samples is shorter than one window ({cfg.win_length})")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[::cfg.hop_length]
    win = signal.get_window(cfg.window, cfg.win_length)
    spec = np.fft.rfft(frames * win, n=cfg.fft_size, axis=1)
    return np.log(np.abs(spec) + cfg.eps).astype(dtype)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


@dataclass
class SincFilterbank:
    """Band-pass sinc filters parameterized by their cutoff frequencies.

    ``low_hz`` and ``band_hz`` are unconstrained learnable tensors; the
    effective cutoffs are ``f1 = min_hz + |low_hz|`` (capped below Nyquist)
    and ``f2 = min(f1 + |band_hz|, sample_rate / 2)``.
    """

    num_filters: int = 64
    kernel_length: int = 129
    sample_rate: int = 16000
    min_hz: float = 50.0
    frame_win: int = 400
    frame_hop: int = 160
    eps: float = EPS
    dtype: type = np.float32
    low_hz: ad.Tensor = field(default=None, repr=False)
    band_hz: ad.Tensor = field(default=None, repr=False)

    def __post_init__(self):
        if self.kernel_length % 2 == 0:
            raise ValueError(f"kernel_length must be odd, got {self.kernel_length}")
        if self.low_hz is None or self.band_hz is None:
            f1, f2 = mel_initial_bands(self.num_filters, self.min_hz, self.sample_rate / 2)
            self.low_hz = ad.Tensor(f1 - self.min_hz, dtype=self.dtype, requires_grad=True, name="sinc.low_hz")
            self.band_hz = ad.Tensor(f2 - f1, dtype=self.dtype, requires_grad=True, name="sinc.band_hz")

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0

    def hyperparameters(self) -> dict:
        return {
            "num_filters": self.num_filters,
            "kernel_length": self.kernel_length,
            "sample_rate": self.sample_rate,
            "min_hz": self.min_hz,
            "frame_win": self.frame_win,
            "frame_hop": self.frame_hop,
            "eps": self.eps,
        }

    def parameters(self) -> dict:
        return {"sinc.low_hz": self.low_hz, "sinc.band_hz": self.band_hz}


def mel_initial_bands(num_filters, low_hz, high_hz):
    """Adjacent bands with edges evenly spaced on the mel scale."""
    edges = mel_to_hz(np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), num_filters + 1))
    return edges[:-1], edges[1:]


def cutoffs(fb: SincFilterbank):
    """Effective (f1, f2) in Hz as differentiable tensors."""
    nyq = fb.nyquist
    f1 = ad.minimum(ad.add(ad.abs_(fb.low_hz), fb.min_hz), nyq - fb.min_hz)
    f2 = ad.minimum(ad.add(f1, ad.abs_(fb.band_hz)), nyq)
    return f1, f2


def _lowpass_terms(a, n):
    """2a*sinc(2*pi*a*n) for normalized cutoff a, and its derivative in a."""
    arg = 2.0 * np.pi * np.outer(a, n)
    safe_n = np.where(n == 0, 1.0, n)
    val = np.where(n == 0, 2.0 * a[:, None], np.sin(arg) / (np.pi * safe_n))
    deriv = 2.0 * np.cos(arg)
    return val, deriv


def sinc_bandpass(f1, f2, kernel_length, sample_rate, dtype=None):
    """Hamming-windowed ideal band-pass kernels, [C, L].

    g[n] = 2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n) with f in cycles per
    sample, sinc(x) = sin(x)/x and the n = 0 tap taken at its limit.  Only
    the non-negative half is evaluated; the other half is its mirror, so the
    kernels are exactly symmetric.
    """
    dtype = dtype or f1.dtype
    M = kernel_length // 2
    n = np.arange(M + 1, dtype=np.float64)
    w = np.hamming(kernel_length)[M:]
    a1 = np.asarray(f1.value, dtype=np.float64) / sample_rate
    a2 = np.asarray(f2.value, dtype=np.float64) / sample_rate
    v1, d1 = _lowpass_terms(a1, n)
    v2, d2 = _lowpass_terms(a2, n)
    half = (v2 - v1) * w
    kernels = np.concatenate([half[:, :0:-1], half], axis=1).astype(dtype)

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        gh = g[:, M:].copy()
        gh[:, 1:] += g[:, M - 1::-1]
        gh *= w
        g1 = -(gh * d1).sum(axis=1) / sample_rate
        g2 = (gh * d2).sum(axis=1) / sample_rate
        return g1.astype(f1.dtype), g2.astype(f2.dtype)

    return ad.make_node(kernels, (f1, f2), backward, "sinc_bandpass")


def sinc_kernels(fb: SincFilterbank) -> ad.Tensor:
    f1, f2 = cutoffs(fb)
    return sinc_bandpass(f1, f2, fb.kernel_length, fb.sample_rate, fb.dtype)


def filter_pool(samples: np.ndarray, kernels: ad.Tensor, win: int, hop: int) -> ad.Tensor:
    """Convolve the signal with every kernel ("same"), rectify and average
    over frames.  Returns [C, T]; differentiable in the kernels."""
    x = np.ascontiguousarray(samples, dtype=kernels.dtype)
    keep = ad.grad_enabled() and kernels.requires_grad
    y, pooled = _kernels.lfb_forward(x, kernels.value, win, hop, keep)
    L = kernels.shape[1]

    def backward(g):
        return (_kernels.lfb_backward(x, y, g, L, win, hop).astype(kernels.dtype),)

    return ad.make_node(pooled, (kernels,), backward, "filter_pool")


def lfb_features(buf, fb: SincFilterbank, kernels: ad.Tensor | None = None) -> ad.Tensor:
    """Log pooled filterbank envelopes, [T frames, C channels]."""
    x = _samples(buf)
    if x.size < fb.frame_win:
        raise FeatureError(f"utterance of {x.size} samples is shorter than one window ({fb.frame_win})")
    if kernels is None:
        kernels = sinc_kernels(fb)
    pooled = filter_pool(x, kernels, fb.frame_win, fb.frame_hop)
    return ad.transpose(ad.log(ad.add(pooled, fb.eps)))


@dataclass
class FeaturePair:
    stft_feats: object
    lfb_feats: object

    @property
    def num_frames(self) -> int:
        return self.stft_feats.shape[0]


def align(stft_feats, lfb_feats) -> FeaturePair:
    """Trim both streams to their common frame count (they differ by <= 1)."""
    ts, tl = stft_feats.shape[0], lfb_feats.shape[0]
    if abs(ts - tl) > 1:
        raise FeatureError(f"frame counts {ts} and {tl} differ by more than one; check win/hop settings")
    T = min(ts, tl)
    if T == 0:
        raise FeatureError("no overlapping frames")
    if ts > T:
        stft_feats = stft_feats[:T]
    if tl > T:
        lfb_feats = lfb_feats[:T]
    return FeaturePair(stft_feats, lfb_feats)


def extract(buf, stft_cfg: StftConfig, fb: SincFilterbank, stft_cache=None) -> FeaturePair:
    """Both streams for one utterance, aligned.  ``stft_cache`` may supply the
    (parameter-free) STFT stream computed earlier."""
    s = stft_cache if stft_cache is not None else stft_features(buf, stft_cfg, fb.dtype)
    return align(s, lfb_features(buf, fb))
