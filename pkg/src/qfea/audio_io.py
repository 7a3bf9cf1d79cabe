"""WAV ingestion and trial-protocol parsing."""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

BONAFIDE = "bonafide"
SPOOF = "spoof"
PARTITIONS = ("train", "dev", "eval")


class WavFormatError(ValueError):
    """Malformed or empty RIFF/WAVE file."""


class UnsupportedFormatError(WavFormatError):
    """Well-formed WAV that is not PCM16 mono."""


class ProtocolError(ValueError):
    """Malformed protocol file."""


class DuplicateTrialError(ProtocolError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class TrialRecord:
    speaker_id: str
    trial_id: str
    environment: str
    attack_id: str
    label: str

    def __post_init__(self):
        if self.label not in (BONAFIDE, SPOOF):
            raise ValueError(f"label must be {BONAFIDE!r} or {SPOOF!r}, got {self.label!r}")

    def to_line(self) -> str:
        return f"{self.speaker_id} {self.trial_id} {self.environment} {self.attack_id} {self.label}"


@dataclass
class Protocol:
    records: list[TrialRecord] = field(default_factory=list)
    partition: str = "train"

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        seen = set()
        for rec in self.records:
            if rec.trial_id in seen:
                raise DuplicateTrialError(f"duplicate trial_id {rec.trial_id!r}")
            seen.add(rec.trial_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.records)

    @property
    def trial_ids(self) -> list[str]:
        return [r.trial_id for r in self.records]

    def labels(self) -> dict[str, str]:
        return {r.trial_id: r.label for r in self.records}

    def count(self, label: str) -> int:
        return sum(1 for r in self.records if r.label == label)

    def require_both_classes(self) -> None:
        """Raise if the protocol cannot support an evaluation."""
        if self.count(BONAFIDE) == 0 or self.count(SPOOF) == 0:
            raise ValueError(
                "evaluation needs at least one bonafide and one spoof trial "
                f"(have {self.count(BONAFIDE)} / {self.count(SPOOF)})"
            )

    def subset(self, trial_ids: Sequence[str], partition: str | None = None) -> "Protocol":
        keep = set(trial_ids)
        return Protocol(
            [r for r in self.records if r.trial_id in keep],
            partition=partition or self.partition,
        )


def read_wav(path) -> Waveform:
    """Read a PCM16 mono WAV file into samples scaled by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormatError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if n_channels != 1:
        raise UnsupportedFormatError(f"{path}: {n_channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormatError(f"{path}: {8 * width}-bit samples, only 16-bit PCM is supported")
    if rate <= 0:
        raise WavFormatError(f"{path}: invalid sample rate {rate}")
    if n_frames == 0 or len(raw) == 0:
        raise WavFormatError(f"{path}: empty data chunk")
    pcm = np.frombuffer(raw[: 2 * (len(raw) // 2)], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples) -> np.ndarray:
    """Round to nearest and saturate to the int16 range."""
    x = np.rint(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(x, -32768, 32767).astype("<i2")


def write_wav(wave_: Waveform, path) -> None:
    path = Path(path)
    pcm = to_pcm16(wave_.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(wave_.sample_rate_hz)
        wf.writeframes(pcm.tobytes())


def parse_protocol(path, partition: str = "train") -> Protocol:
    """Parse a five-column ASVspoof-style protocol file.

    Columns are ``speaker_id trial_id environment attack_id key``. Blank
    lines are skipped; any other malformed line raises ProtocolError with
    its 1-based line number.
    """
    records = []
    seen: dict[str, int] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        cols = line.split()
        if not cols:
            continue
        if len(cols) != 5:
            raise ProtocolError(f"{path}:{lineno}: expected 5 columns, got {len(cols)}: {line.strip()!r}")
        speaker, trial, env, attack, key = cols
        if key not in (BONAFIDE, SPOOF):
            raise ProtocolError(f"{path}:{lineno}: unknown key {key!r}")
        if trial in seen:
            raise DuplicateTrialError(
                f"{path}:{lineno}: duplicate trial_id {trial!r} (first seen on line {seen[trial]})"
            )
        seen[trial] = lineno
        records.append(TrialRecord(speaker, trial, env, attack, key))
    return Protocol(records, partition=partition)


def write_protocol(protocol: Protocol, path) -> None:
    lines = [r.to_line() for r in protocol.records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
