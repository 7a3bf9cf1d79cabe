"""Constant-Q transform by direct evaluation of windowed complex kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio_io import Waveform
from .dsp import SpectroMatrix

DEFAULT_FMIN_HZ = 20.0
DEFAULT_BINS_PER_OCTAVE = 24


@dataclass(frozen=True)
class CqtConfig:
    f_min_hz: float = DEFAULT_FMIN_HZ
    bins_per_octave: int = DEFAULT_BINS_PER_OCTAVE
    n_bins: int = 0
    hop_len: int = 160
    q_scale: float = 1.0

    def __post_init__(self):
        if not self.f_min_hz > 0:
            raise ValueError("f_min_hz must be positive")
        if self.bins_per_octave < 1:
            raise ValueError("bins_per_octave must be >= 1")
        if self.n_bins < 0 or self.hop_len < 1:
            raise ValueError("n_bins must be >= 1 (0 = auto) and hop_len >= 1")
        if not 0 < self.q_scale <= 1:
            raise ValueError("q_scale must lie in (0, 1]")

    @classmethod
    def for_rate(cls, sample_rate_hz: int, f_min_hz: float = DEFAULT_FMIN_HZ,
                 bins_per_octave: int = DEFAULT_BINS_PER_OCTAVE,
                 hop_ms: float = 10.0, q_scale: float = 1.0) -> "CqtConfig":
        """Defaults with ``n_bins`` filling the range up to (but excluding) Nyquist."""
        octaves = math.log2(sample_rate_hz / 2.0 / f_min_hz)
        n_bins = max(1, math.ceil(bins_per_octave * octaves))
        hop = max(1, int(round(sample_rate_hz * hop_ms / 1000.0)))
        return cls(f_min_hz, bins_per_octave, n_bins, hop, q_scale)

    @property
    def q_factor(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def resolved(self, sample_rate_hz: int) -> "CqtConfig":
        if self.n_bins:
            return self
        auto = CqtConfig.for_rate(sample_rate_hz, self.f_min_hz, self.bins_per_octave)
        return CqtConfig(self.f_min_hz, self.bins_per_octave, auto.n_bins, self.hop_len, self.q_scale)


def cqt_center_frequencies(cfg: CqtConfig) -> np.ndarray:
    k = np.arange(cfg.n_bins)
    return cfg.f_min_hz * 2.0 ** (k / cfg.bins_per_octave)


def kernel_lengths(cfg: CqtConfig, sample_rate_hz: int) -> np.ndarray:
    freqs = cqt_center_frequencies(cfg)
    return np.ceil(cfg.q_scale * cfg.q_factor * sample_rate_hz / freqs).astype(int)


def check_nyquist(cfg: CqtConfig, sample_rate_hz: int) -> None:
    f_top = cfg.f_min_hz * 2.0 ** ((cfg.n_bins - 1) / cfg.bins_per_octave)
    if not f_top < sample_rate_hz / 2.0:
        raise ValueError(
            f"highest CQT bin {f_top:.1f} Hz is not below Nyquist ({sample_rate_hz / 2.0:.1f} Hz)"
        )


@lru_cache(maxsize=16)
def _kernels(cfg: CqtConfig, sample_rate_hz: int) -> tuple:
    """Hann-windowed complex exponentials, each normalised by its length."""
    freqs = cqt_center_frequencies(cfg)
    lengths = kernel_lengths(cfg, sample_rate_hz)
    kernels = []
    for f_k, n_k in zip(freqs, lengths):
        n = np.arange(n_k)
        centre = (n_k - 1) / 2.0
        win = np.hanning(n_k + 2)[1:-1] if n_k > 1 else np.ones(1)
        ker = win * np.exp(-2j * np.pi * f_k * (n - centre) / sample_rate_hz) / n_k
        ker.setflags(write=False)
        kernels.append(ker)
    return tuple(kernels)


def cqtgram(wave: Waveform, cfg: CqtConfig) -> SpectroMatrix:
    """Frames x n_bins CQT magnitude; frame m is centred on sample m*hop_len."""
    fs = wave.sample_rate_hz
    cfg = cfg.resolved(fs)
    check_nyquist(cfg, fs)
    x = np.asarray(wave.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot transform an empty waveform")
    kernels = _kernels(cfg, fs)
    n_frames = 1 + (x.size - 1) // cfg.hop_len
    half = max(k.size for k in kernels) // 2 + 1
    padded = np.concatenate([np.zeros(half), x, np.zeros(half + cfg.hop_len)])
    out = np.empty((n_frames, cfg.n_bins))
    for b, ker in enumerate(kernels):
        n_k = ker.size
        start = half - n_k // 2
        stop = start + (n_frames - 1) * cfg.hop_len + n_k
        view = np.lib.stride_tricks.sliding_window_view(padded[start:stop], n_k)[:: cfg.hop_len]
        out[:, b] = np.abs(view[:n_frames] @ ker)
    return SpectroMatrix(
        out,
        axis="cqt_bin",
        bin_spacing=1.0 / cfg.bins_per_octave,
        bin_unit="octave",
        frame_rate_hz=fs / cfg.hop_len,
        meta={"f_min_hz": cfg.f_min_hz, "bins_per_octave": cfg.bins_per_octave},
    )
