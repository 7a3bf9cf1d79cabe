"""Framing, windowing, magnitude spectra, orthonormal DCT and log1p compression."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import fft as sp_fft
from scipy.signal import get_window

from .audio_io import Waveform

WINDOWS = ("hann", "hamming", "blackman", "rectangular")
AXES = ("frequency_hz", "quefrency_s", "cepstral_index", "filter_index", "cqt_bin")

DEFAULT_FRAME_MS = 25.0
DEFAULT_HOP_MS = 10.0
DEFAULT_WINDOW = "hann"


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n) - 1).bit_length()


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int
    hop_len: int
    window: str = DEFAULT_WINDOW
    fft_len: int = 0

    def __post_init__(self):
        if self.fft_len == 0:
            object.__setattr__(self, "fft_len", next_pow2(self.frame_len))
        if self.window not in WINDOWS:
            raise ValueError(f"unknown window {self.window!r}; choose from {WINDOWS}")
        if not 0 < self.hop_len <= self.frame_len <= self.fft_len:
            raise ValueError(
                f"need 0 < hop_len <= frame_len <= fft_len, got "
                f"{self.hop_len}, {self.frame_len}, {self.fft_len}"
            )
        if self.fft_len & (self.fft_len - 1):
            raise ValueError(f"fft_len must be a power of two, got {self.fft_len}")

    @classmethod
    def for_rate(cls, sample_rate_hz: int, frame_ms: float = DEFAULT_FRAME_MS,
                 hop_ms: float = DEFAULT_HOP_MS, window: str = DEFAULT_WINDOW,
                 fft_len: int = 0) -> "FrameConfig":
        frame_len = int(round(sample_rate_hz * frame_ms / 1000.0))
        hop_len = int(round(sample_rate_hz * hop_ms / 1000.0))
        return cls(frame_len, hop_len, window, fft_len)

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1


@dataclass
class SpectroMatrix:
    """Frames x bins feature matrix plus axis metadata.

    ``bin_spacing`` is expressed in ``bin_unit`` (Hz between frequency bins,
    seconds between quefrency bins, 1 for plain indices).
    """

    data: np.ndarray
    axis: str
    bin_spacing: float = 1.0
    bin_unit: str = "index"
    frame_rate_hz: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if self.data.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {self.data.shape}")
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}")
        if self.data.shape[0] < 1:
            raise ValueError("a SpectroMatrix needs at least one frame")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("SpectroMatrix entries must be finite")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> int:
        return self.data.shape[1]

    def with_data(self, data, **changes) -> "SpectroMatrix":
        return replace(self, data=data, meta=dict(self.meta), **changes)


def make_window(name: str, length: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(length)
    # periodic (DFT-even) windows, the usual STFT convention
    return get_window(name, length, fftbins=True)


def frame_signal(wave: Waveform, cfg: FrameConfig) -> np.ndarray:
    """Slice ``wave`` into windowed frames of ``cfg.frame_len`` samples.

    A signal shorter than one frame yields a single zero-padded frame.
    """
    x = np.asarray(wave.samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot frame an empty waveform")
    if x.size < cfg.frame_len:
        frames = np.zeros((1, cfg.frame_len))
        frames[0, : x.size] = x
    else:
        n = 1 + (x.size - cfg.frame_len) // cfg.hop_len
        view = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)
        frames = view[:: cfg.hop_len][:n].copy()
    return frames * make_window(cfg.window, cfg.frame_len)


def magnitude_spectrum(frame, fft_len: int) -> np.ndarray:
    """One-sided |DFT| of a frame (or of each row of a frame matrix), zero-padded to fft_len."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] > fft_len:
        raise ValueError(f"frame length {frame.shape[-1]} exceeds fft_len {fft_len}")
    return np.abs(np.fft.rfft(frame, n=fft_len, axis=-1))


def dct2_orthonormal(vec, axis: int = -1) -> np.ndarray:
    """Orthonormal DCT-II along ``axis``."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[axis] < 1:
        raise ValueError("DCT of an empty vector")
    return sp_fft.dct(vec, type=2, norm="ortho", axis=axis)


def idct2_orthonormal(vec, axis: int = -1) -> np.ndarray:
    return sp_fft.idct(np.asarray(vec, dtype=np.float64), type=2, norm="ortho", axis=axis)


def compress_log1p(mat: SpectroMatrix) -> SpectroMatrix:
    if np.any(mat.data < 0):
        raise ValueError("log1p compression needs non-negative entries")
    return mat.with_data(np.log1p(mat.data))


def stft_magnitude(wave: Waveform, cfg: FrameConfig) -> SpectroMatrix:
    frames = frame_signal(wave, cfg)
    fs = wave.sample_rate_hz
    return SpectroMatrix(
        magnitude_spectrum(frames, cfg.fft_len),
        axis="frequency_hz",
        bin_spacing=fs / cfg.fft_len,
        bin_unit="Hz",
        frame_rate_hz=fs / cfg.hop_len,
    )
