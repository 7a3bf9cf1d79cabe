"""Corpus-level batch stages shared by the command-line tools."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import BONAFIDE, SPOOF, Protocol, read_wav
from .frontends import FrontendConfig, extract, read_feature, write_feature
from .gmm import DEFAULT_COMPONENTS, DEFAULT_MAX_ITERS, DEFAULT_TOL, GmmModel, llr_score, train_countermeasure
from .metrics import ScoreSet

log = logging.getLogger(__name__)

FEATURE_SUFFIX = ".qfea"
WAV_SUFFIX = ".wav"


class MissingTrialsError(ValueError):
    def __init__(self, what: str, missing: list[str]):
        shown = ", ".join(missing[:20]) + (" ..." if len(missing) > 20 else "")
        super().__init__(f"{len(missing)} trials have no {what}: {shown}")
        self.missing = missing


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("QFEA_JOBS", "1")))
    except ValueError:
        return 1


def _extract_one(args) -> str | None:
    frontend, wav_path, out_path, cfg = args
    try:
        write_feature(extract(frontend, read_wav(wav_path), cfg), out_path)
    except Exception as exc:  # reported per trial, the batch carries on
        return f"{type(exc).__name__}: {exc}"
    return None


@dataclass
class ExtractResult:
    written: list[str]
    failures: dict[str, str]


def extract_corpus(frontend: str, protocol: Protocol, audio_dir, out_dir, cfg: FrontendConfig,
                   force: bool = False, jobs: int = 1) -> ExtractResult:
    """Write one feature file per trial, in protocol order.

    Existing outputs are an error unless ``force`` is set; per-trial
    failures are collected rather than raised.
    """
    audio_dir, out_dir = Path(audio_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    targets = [out_dir / f"{r.trial_id}{FEATURE_SUFFIX}" for r in protocol]
    if not force:
        existing = [p.name for p in targets if p.exists()]
        if existing:
            raise FileExistsError(
                f"{len(existing)} feature files already exist in {out_dir} (e.g. {existing[0]}); use --force"
            )
    tasks = [(frontend, audio_dir / f"{r.trial_id}{WAV_SUFFIX}", t, cfg) for r, t in zip(protocol, targets)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            errors = list(pool.map(_extract_one, tasks, chunksize=8))
    else:
        errors = [_extract_one(t) for t in tasks]
    failures = {r.trial_id: e for r, e in zip(protocol, errors) if e is not None}
    written = [r.trial_id for r, e in zip(protocol, errors) if e is None]
    return ExtractResult(written, failures)


def load_features(protocol: Protocol, feat_dir) -> dict[str, np.ndarray]:
    feat_dir = Path(feat_dir)
    paths = {r.trial_id: feat_dir / f"{r.trial_id}{FEATURE_SUFFIX}" for r in protocol}
    missing = [t for t, p in paths.items() if not p.exists()]
    if missing:
        raise MissingTrialsError("feature file", missing)
    return {t: read_feature(p).data for t, p in paths.items()}


@dataclass(frozen=True)
class GmmConfig:
    n_components: int = DEFAULT_COMPONENTS
    seed: int = 0
    max_iters: int = DEFAULT_MAX_ITERS
    tol: float = DEFAULT_TOL


def train_from_features(protocol: Protocol, feats: dict[str, np.ndarray],
                        cfg: GmmConfig = GmmConfig()) -> tuple[GmmModel, GmmModel]:
    protocol.require_both_classes()
    pooled = {
        label: np.vstack([feats[r.trial_id] for r in protocol if r.label == label])
        for label in (BONAFIDE, SPOOF)
    }
    return train_countermeasure(pooled[BONAFIDE], pooled[SPOOF], cfg.n_components,
                                cfg.seed, cfg.max_iters, cfg.tol)


def score_features(m_bona: GmmModel, m_spoof: GmmModel, protocol: Protocol,
                   feats: dict[str, np.ndarray]) -> ScoreSet:
    missing = [r.trial_id for r in protocol if r.trial_id not in feats]
    if missing:
        raise MissingTrialsError("features", missing)
    return ScoreSet([(r.trial_id, llr_score(m_bona, m_spoof, feats[r.trial_id])) for r in protocol])
