"""Echo synthesis, spectral-ripple prediction, rahmonic peak detection and the synthetic replay corpus."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import butter, sosfilt

from .audio_io import BONAFIDE, SPOOF, Protocol, TrialRecord, Waveform, write_protocol, write_wav
from .dsp import SpectroMatrix

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_BONA_CHAIN = "0.4:6.0"
DEFAULT_SPLIT = (0.4, 0.2, 0.4)  # train, dev, eval
DEFAULT_SPOOF_CHAIN = "0.5:3.75,0.3:1.25;band:100-7000"


@dataclass(frozen=True)
class EchoSpec:
    alpha: float
    tau_samples: int

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if int(self.tau_samples) != self.tau_samples or self.tau_samples < 0:
            raise ValueError(f"tau_samples must be a non-negative integer, got {self.tau_samples}")


@dataclass(frozen=True)
class ReplayChain:
    echoes: tuple[EchoSpec, ...] = ()
    band: tuple[float, float] | None = None
    noise_snr_db: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "echoes", tuple(sorted(self.echoes, key=lambda e: e.tau_samples)))
        if self.band is not None:
            lo, hi = self.band
            if not 0 < lo < hi:
                raise ValueError(f"pass-band must satisfy 0 < low < high, got {self.band}")

    def check_rate(self, sample_rate_hz: int) -> None:
        if self.band is not None and not self.band[1] < sample_rate_hz / 2.0:
            raise ValueError(f"pass-band {self.band} reaches Nyquist for fs={sample_rate_hz}")


class ChainSyntaxError(ValueError):
    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.position = position


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_TAP = re.compile(rf"({_NUM}):({_NUM})\Z")
_BAND = re.compile(rf"band:({_NUM})-({_NUM})\Z")
_SNR = re.compile(rf"snr:({_NUM})\Z")


def parse_chain(text: str, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> ReplayChain:
    """Parse ``"alpha:tau_ms[,alpha:tau_ms...][;band:lo-hi][;snr:db]"``.

    Delays are rounded to whole samples at ``sample_rate_hz``.
    """
    sections = text.split(";")
    echoes = []
    band = None
    snr = None
    pos = 0
    head = sections[0]
    if head.strip():
        for token in head.split(","):
            m = _TAP.match(token.strip())
            if not m:
                raise ChainSyntaxError(f"bad echo tap {token!r} (want alpha:tau_ms)", text, pos)
            alpha, tau_ms = float(m.group(1)), float(m.group(2))
            if tau_ms < 0:
                raise ChainSyntaxError("negative delay", text, pos)
            echoes.append(EchoSpec(alpha, int(round(tau_ms * sample_rate_hz / 1000.0))))
            pos += len(token) + 1
    else:
        pos += 1
    for section in sections[1:]:
        s = section.strip()
        if (m := _BAND.match(s)):
            band = (float(m.group(1)), float(m.group(2)))
            if not 0 < band[0] < band[1]:
                raise ChainSyntaxError("band needs 0 < lo < hi", text, pos)
        elif (m := _SNR.match(s)):
            snr = float(m.group(1))
        else:
            raise ChainSyntaxError(f"unknown chain section {section!r}", text, pos)
        pos += len(section) + 1
    if not echoes and band is None and snr is None:
        raise ChainSyntaxError("empty chain", text, 0)
    return ReplayChain(tuple(echoes), band, snr)


def format_chain(chain: ReplayChain, sample_rate_hz: int = DEFAULT_SAMPLE_RATE) -> str:
    parts = [",".join(f"{e.alpha:g}:{1000.0 * e.tau_samples / sample_rate_hz:g}" for e in chain.echoes)]
    if chain.band:
        parts.append(f"band:{chain.band[0]:g}-{chain.band[1]:g}")
    if chain.noise_snr_db is not None:
        parts.append(f"snr:{chain.noise_snr_db:g}")
    return ";".join(parts)


def apply_echo(wave: Waveform, spec: EchoSpec, mode: str = "linear") -> Waveform:
    """x[n] = s[n] + alpha * s[n - tau].

    ``linear`` extends the output by tau samples; ``circular`` keeps the
    length and wraps the delayed copy.
    """
    s = wave.samples
    tau = int(spec.tau_samples)
    if mode == "linear":
        x = np.zeros(s.size + tau)
        x[: s.size] += s
        x[tau:] += spec.alpha * s
    elif mode == "circular":
        if tau >= s.size:
            raise ValueError(f"circular echo needs tau < N (tau={tau}, N={s.size})")
        x = s + spec.alpha * np.roll(s, tau)
    else:
        raise ValueError(f"unknown echo mode {mode!r}")
    return Waveform(x, wave.sample_rate_hz)


def ripple_gain(omega_tau, alpha):
    """Magnitude gain of a single echo at phase omega*tau."""
    return np.sqrt(1.0 + alpha * alpha + 2.0 * alpha * np.cos(omega_tau))


def log_ripple(omega_tau, alpha):
    """Additive log-magnitude component 0.5*log(1 + a^2 + 2a cos(omega*tau))."""
    arg = 1.0 + np.square(alpha) + 2.0 * np.multiply(alpha, np.cos(omega_tau))
    if np.any(arg <= 0):
        raise ValueError(
            "log ripple is singular: 1 + alpha^2 + 2*alpha*cos(omega*tau) <= 0 "
            "(alpha = 1 at omega*tau = pi cancels the spectrum)"
        )
    return 0.5 * np.log(arg)


def apply_chain(wave: Waveform, chain: ReplayChain, rng: np.random.Generator | None = None) -> Waveform:
    """Multi-tap echo, optional band-pass, optional additive noise; length is preserved."""
    fs = wave.sample_rate_hz
    chain.check_rate(fs)
    s = wave.samples
    x = s.copy()
    for e in chain.echoes:
        if e.tau_samples < s.size:
            x[e.tau_samples:] += e.alpha * s[: s.size - e.tau_samples]
    if chain.band is not None:
        sos = butter(4, chain.band, btype="bandpass", fs=fs, output="sos")
        x = sosfilt(sos, x)
    if chain.noise_snr_db is not None:
        if rng is None:
            raise ValueError("a noisy chain needs an rng")
        p_sig = float(np.mean(x * x))
        x = x + rng.standard_normal(x.size) * math.sqrt(p_sig * 10.0 ** (-chain.noise_snr_db / 10.0))
    return Waveform(x, fs)


@dataclass(frozen=True)
class Peak:
    index: int
    quefrency_s: float
    magnitude: float


@dataclass
class PeakReport:
    peaks: list[Peak] = field(default_factory=list)
    threshold: float = 0.0

    @property
    def indices(self) -> list[int]:
        return [p.index for p in self.peaks]

    def to_tsv(self) -> str:
        lines = ["index\tquefrency_s\tmagnitude"]
        lines += [f"{p.index}\t{p.quefrency_s:.6f}\t{p.magnitude:.6f}" for p in self.peaks]
        return "\n".join(lines) + "\n"

    def near(self, index: int, tol: int = 2) -> bool:
        return any(abs(p.index - index) <= tol for p in self.peaks)


def average_cepstrum(cep: SpectroMatrix) -> np.ndarray:
    return cep.data.mean(axis=0)


def detect_rahmonic_peaks(cep: SpectroMatrix, min_index: int = 1, max_peaks: int = 5,
                          max_index: int | None = None, k_mad: float = 4.0) -> PeakReport:
    """Local maxima of the frame-averaged cepstrum above median + k*MAD.

    The statistic is taken over indices ``min_index..max_index``; candidate
    peaks must have both neighbours inside the matrix.
    """
    if min_index < 1:
        raise ValueError("min_index must be >= 1")
    avg = average_cepstrum(cep)
    last = avg.size - 1 if max_index is None else min(max_index, avg.size - 1)
    if last < min_index:
        raise ValueError(f"empty quefrency search range [{min_index}, {last}]")
    region = avg[min_index : last + 1]
    med = float(np.median(region))
    mad = float(np.median(np.abs(region - med)))
    thr = med + k_mad * mad
    idx = np.arange(max(min_index, 1), min(last, avg.size - 2) + 1)
    if idx.size == 0:
        return PeakReport([], thr)
    v = avg[idx]
    is_peak = (v > avg[idx - 1]) & (v > avg[idx + 1]) & (v > thr)
    found = idx[is_peak]
    order = found[np.argsort(-avg[found], kind="stable")][:max_peaks]
    peaks = [Peak(int(i), float(i * cep.bin_spacing), float(avg[i])) for i in order]
    return PeakReport(peaks, thr)


def pseudo_speech(rng: np.random.Generator, duration_s: float, sample_rate_hz: int,
                  n_harmonics: int = 10, noise_db: float = -20.0) -> np.ndarray:
    """Harmonic-plus-noise signal with a random F0 in [80, 300] Hz.

    Harmonic h has amplitude 1/h and a random phase; a slow random
    amplitude envelope stands in for syllabic modulation, and white noise is
    added 20 dB below the harmonic power.
    """
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    f0 = rng.uniform(80.0, 300.0)
    # mild F0 drift keeps harmonics from being perfectly stationary
    drift = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * f0 * np.cumsum(drift) / sample_rate_hz
    x = np.zeros(n)
    for h in range(1, n_harmonics + 1):
        if h * f0 * 1.03 >= sample_rate_hz / 2:
            break
        x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    am_rate = rng.uniform(2.0, 6.0)
    envelope = 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    x *= envelope
    p = float(np.mean(x * x))
    x += rng.standard_normal(n) * math.sqrt(p * 10.0 ** (noise_db / 10.0))
    return x


@dataclass(frozen=True)
class CorpusConfig:
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE
    min_duration_s: float = 0.8
    max_duration_s: float = 1.6
    peak_level: float = 0.25
    level_range_db: float = 12.0
    capture_snr_db: tuple[float, float] | None = (10.0, 35.0)
    prefix: str = "QF"


def trial_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def make_trial_pair(seed: int, index: int, chain_bona: ReplayChain, chain_spoof: ReplayChain,
                    cfg: CorpusConfig = CorpusConfig()) -> tuple[Waveform, Waveform]:
    """Bona fide trial and the spoof replayed from it, both from base signal ``index``."""
    rng = trial_rng(seed, index, 0)
    fs = cfg.sample_rate_hz
    duration = rng.uniform(cfg.min_duration_s, cfg.max_duration_s)
    base = pseudo_speech(rng, duration, fs)
    level_db = -rng.uniform(0.0, cfg.level_range_db)
    base *= cfg.peak_level * 10.0 ** (level_db / 20.0) / np.max(np.abs(base))
    bona = apply_chain(Waveform(base, fs), chain_bona, trial_rng(seed, index, 1))
    if cfg.capture_snr_db is not None:
        bona = add_capture_noise(bona, cfg.capture_snr_db, trial_rng(seed, index, 3))
    # the replay re-records the bona fide recording, capture noise included
    spoof = apply_chain(bona, chain_spoof, trial_rng(seed, index, 2))
    if cfg.capture_snr_db is not None:
        spoof = add_capture_noise(spoof, cfg.capture_snr_db, trial_rng(seed, index, 4))
    return bona, spoof


def add_capture_noise(wave: Waveform, snr_range_db: tuple[float, float],
                      rng: np.random.Generator) -> Waveform:
    """White recording noise at an SNR drawn uniformly from ``snr_range_db``."""
    snr = rng.uniform(*snr_range_db)
    x = wave.samples
    sd = math.sqrt(float(np.mean(x * x)) * 10.0 ** (-snr / 10.0))
    return Waveform(x + sd * rng.standard_normal(x.size), wave.sample_rate_hz)


def synthesize_corpus(seed: int, n_per_class: int, out_dir, chain_bona: ReplayChain,
                      chain_spoof: ReplayChain, cfg: CorpusConfig = CorpusConfig(),
                      partition: str = "train", jobs: int = 1) -> Protocol:
    """Write ``2 * n_per_class`` WAVs plus ``protocol.txt`` and return the protocol.

    Records alternate bona fide / spoof; spoof i is bona fide i replayed
    through ``chain_spoof``. Every trial draws from its own seeded stream,
    so the output does not depend on ``jobs``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    chain_bona.check_rate(cfg.sample_rate_hz)
    chain_spoof.check_rate(cfg.sample_rate_hz)

    def one(i: int) -> list[TrialRecord]:
        bona, spoof = make_trial_pair(seed, i, chain_bona, chain_spoof, cfg)
        speaker = f"{cfg.prefix}_S{i % 20:03d}"
        recs = []
        for k, (label, w, attack) in enumerate(((BONAFIDE, bona, "-"), (SPOOF, spoof, "RP"))):
            trial_id = f"{cfg.prefix}_{2 * i + k:07d}"
            write_wav(w, out / "wav" / f"{trial_id}.wav")
            recs.append(TrialRecord(speaker, trial_id, "sim", attack, label))
        return recs

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            groups = list(pool.map(one, range(n_per_class)))
    else:
        groups = [one(i) for i in range(n_per_class)]
    protocol = Protocol([r for g in groups for r in g], partition=partition)
    write_protocol(protocol, out / "protocol.txt")
    return protocol


def split_protocol(protocol: Protocol, fractions: Sequence[float] = DEFAULT_SPLIT) -> dict[str, Protocol]:
    """Stratified, order-preserving train/dev/eval split.

    Within each class the first ``fractions[0]`` of records go to train, the
    next block to dev and the rest to eval, so bona fide/spoof pairs created
    together land in the same partition.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("need three fractions summing to 1")
    parts: dict[str, list] = {"train": [], "dev": [], "eval": []}
    for label in (BONAFIDE, SPOOF):
        recs = [r for r in protocol.records if r.label == label]
        n = len(recs)
        a = int(round(fractions[0] * n))
        b = a + int(round(fractions[1] * n))
        for r_i, rec in enumerate(recs):
            parts["train" if r_i < a else "dev" if r_i < b else "eval"].append(rec)
    order = {r.trial_id: i for i, r in enumerate(protocol.records)}
    return {
        name: Protocol(sorted(recs, key=lambda r: order[r.trial_id]), partition=name)
        for name, recs in parts.items()
    }
