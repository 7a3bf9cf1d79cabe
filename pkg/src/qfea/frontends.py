"""The five evaluated front-ends (Spec, Ceps, DCT, LFCC, CQT) and the QFEA feature file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import Waveform
from .cqt import CqtConfig, cqtgram
from .dsp import (
    AXES,
    FrameConfig,
    SpectroMatrix,
    compress_log1p,
    dct2_orthonormal,
    frame_signal,
    magnitude_spectrum,
    stft_magnitude,
)

FRONTENDS = ("spec", "ceps", "dct", "lfcc", "cqt")
LOG_FLOOR = 1e-10
DEFAULT_DCT_LEN = 100


class FeatureFormatError(ValueError):
    pass


class FeatureCorruptError(FeatureFormatError):
    pass


def spectrogram(wave: Waveform, cfg: FrameConfig) -> SpectroMatrix:
    """log1p-compressed STFT magnitude."""
    return compress_log1p(stft_magnitude(wave, cfg))


def quefrency_spacing_s(cfg: FrameConfig, sample_rate_hz: int) -> float:
    """Seconds per cepstral index; slightly under 1/fs because of the one-sided bin count."""
    return cfg.fft_len / (cfg.n_bins * sample_rate_hz * 2.0)


def cepstrogram(wave: Waveform, cfg: FrameConfig, compression: str = "log1p") -> SpectroMatrix:
    """Per-frame orthonormal DCT-II of the compressed magnitude spectrum.

    ``compression`` is ``"log1p"`` (default) or ``"log"`` (natural log with a
    1e-10 floor).
    """
    mag = stft_magnitude(wave, cfg)
    if compression == "log1p":
        logmag = np.log1p(mag.data)
    elif compression == "log":
        logmag = np.log(np.maximum(mag.data, LOG_FLOOR))
    else:
        raise ValueError(f"unknown compression {compression!r}")
    return SpectroMatrix(
        dct2_orthonormal(logmag, axis=1),
        axis="quefrency_s",
        bin_spacing=quefrency_spacing_s(cfg, wave.sample_rate_hz),
        bin_unit="s",
        frame_rate_hz=mag.frame_rate_hz,
        meta={"compression": compression},
    )


def fit_time_axis(data: np.ndarray, length: int) -> np.ndarray:
    """Zero-pad or truncate rows to exactly ``length``."""
    if data.shape[0] >= length:
        return data[:length]
    pad = np.zeros((length - data.shape[0], data.shape[1]))
    return np.vstack([data, pad])


def dctgram(wave: Waveform, cfg: FrameConfig, out_len: int = DEFAULT_DCT_LEN,
            pad_len: int | None = None) -> SpectroMatrix:
    """Time-axis DCT of the log1p spectrogram, one column per frequency bin.

    The spectrogram is first fitted to ``pad_len`` frames (default ``out_len``)
    and the first ``out_len`` time-DCT coefficients are kept, so the output is
    always ``out_len x bins``.
    """
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    pad_len = out_len if pad_len is None else pad_len
    if pad_len < out_len:
        raise ValueError("pad_len must be >= out_len")
    spec = spectrogram(wave, cfg)
    coeffs = dct2_orthonormal(fit_time_axis(spec.data, pad_len), axis=0)[:out_len]
    return SpectroMatrix(
        coeffs,
        axis="cepstral_index",
        bin_spacing=spec.bin_spacing,
        bin_unit="Hz",
        frame_rate_hz=0.0,
        meta={"pad_len": pad_len},
    )


@dataclass(frozen=True)
class LfccConfig:
    frame: FrameConfig
    n_filters: int = 20
    n_coeffs: int = 20
    include_deltas: bool = True

    def __post_init__(self):
        if not 1 <= self.n_coeffs <= self.n_filters:
            raise ValueError("need 1 <= n_coeffs <= n_filters")


def linear_filterbank(n_filters: int, fft_len: int, sample_rate_hz: int) -> np.ndarray:
    """Triangular filters with linearly spaced peaks, each peaking at 1.

    Edges are ``n_filters + 2`` equally spaced points on [0, fs/2]; filter i
    rises from edge i to its peak at edge i+1 and falls to zero at edge i+2.
    Returns an ``n_filters x (fft_len/2+1)`` weight matrix.
    """
    n_bins = fft_len // 2 + 1
    if n_filters < 1:
        raise ValueError("n_filters must be >= 1")
    edges = np.linspace(0.0, sample_rate_hz / 2.0, n_filters + 2)
    freqs = np.arange(n_bins) * sample_rate_hz / fft_len
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    empty = np.flatnonzero(weights.sum(axis=1) == 0)
    if n_filters + 2 > n_bins or empty.size:
        raise ValueError(
            f"{n_filters} filters are too many for {n_bins} FFT bins "
            f"(filters without any bin: {empty.tolist()})"
        )
    return weights


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-width frames, edges replicated."""
    T = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    num = np.zeros_like(feat, dtype=np.float64)
    for n in range(1, width + 1):
        num += n * (padded[width + n : width + n + T] - padded[width - n : width - n + T])
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def lfcc(wave: Waveform, cfg: LfccConfig) -> SpectroMatrix:
    fs = wave.sample_rate_hz
    fb = linear_filterbank(cfg.n_filters, cfg.frame.fft_len, fs)
    power = magnitude_spectrum(frame_signal(wave, cfg.frame), cfg.frame.fft_len) ** 2
    energies = np.log(np.maximum(power @ fb.T, LOG_FLOOR))
    static = dct2_orthonormal(energies, axis=1)[:, : cfg.n_coeffs]
    if cfg.include_deltas:
        d1 = deltas(static)
        static = np.hstack([static, d1, deltas(d1)])
    return SpectroMatrix(
        static,
        axis="filter_index",
        frame_rate_hz=fs / cfg.frame.hop_len,
        meta={"n_filters": cfg.n_filters},
    )


@dataclass(frozen=True)
class FrontendConfig:
    """All front-end parameters.

    ``input_scale`` multiplies the waveform before analysis. The default
    restores PCM16 units so spectral magnitudes are well above 1 and log1p
    behaves like a logarithm on everything but near-silent bins.
    """

    input_scale: float = 32768.0
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    window: str = "hann"
    fft_len: int = 0
    ceps_compression: str = "log1p"
    ceps_keep: int = 0
    dct_out_len: int = DEFAULT_DCT_LEN
    lfcc_filters: int = 20
    lfcc_coeffs: int = 20
    lfcc_deltas: bool = True
    cqt_fmin_hz: float = 20.0
    cqt_bins_per_octave: int = 24
    cqt_q_scale: float = 1.0

    def frame_config(self, sample_rate_hz: int) -> FrameConfig:
        return FrameConfig.for_rate(sample_rate_hz, self.frame_ms, self.hop_ms, self.window, self.fft_len)


def extract(name: str, wave: Waveform, cfg: FrontendConfig | None = None) -> SpectroMatrix:
    """Run the named front-end on ``wave``."""
    cfg = cfg or FrontendConfig()
    fs = wave.sample_rate_hz
    if cfg.input_scale != 1.0:
        wave = Waveform(wave.samples * cfg.input_scale, fs)
    frame = cfg.frame_config(fs)
    if name == "spec":
        return spectrogram(wave, frame)
    if name == "ceps":
        mat = cepstrogram(wave, frame, cfg.ceps_compression)
        if cfg.ceps_keep:
            mat = mat.with_data(mat.data[:, : cfg.ceps_keep])
        return mat
    if name == "dct":
        return dctgram(wave, frame, cfg.dct_out_len)
    if name == "lfcc":
        return lfcc(wave, LfccConfig(frame, cfg.lfcc_filters, cfg.lfcc_coeffs, cfg.lfcc_deltas))
    if name == "cqt":
        ccfg = CqtConfig.for_rate(fs, cfg.cqt_fmin_hz, cfg.cqt_bins_per_octave, cfg.hop_ms, cfg.cqt_q_scale)
        return compress_log1p(cqtgram(wave, ccfg))
    raise ValueError(f"unknown front-end {name!r}; choose from {FRONTENDS}")


# QFEA feature file: "QFEA" | u16 version | u32 rows | u32 cols | u8 axis | f32 payload (row-major, LE)
FEATURE_MAGIC = b"QFEA"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sHIIB")


def write_feature(mat: SpectroMatrix, path) -> None:
    rows, cols = mat.data.shape
    if rows == 0 or cols == 0:
        raise ValueError("refusing to write an empty feature matrix")
    header = _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols, AXES.index(mat.axis))
    payload = np.ascontiguousarray(mat.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_feature(path) -> SpectroMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FeatureFormatError(f"{path}: file shorter than the header")
    magic, version, rows, cols, axis = _HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if axis >= len(AXES):
        raise FeatureFormatError(f"{path}: unknown axis code {axis}")
    payload = blob[_HEADER.size:]
    if len(payload) != rows * cols * 4:
        raise FeatureCorruptError(
            f"{path}: payload is {len(payload)} bytes, header promises {rows * cols * 4}"
        )
    if rows == 0:
        raise FeatureCorruptError(f"{path}: zero rows")
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)
    return SpectroMatrix(data, axis=AXES[axis])
