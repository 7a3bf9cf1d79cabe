"""EER, min t-DCF, score normalisation and score-level fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audio_io import BONAFIDE, SPOOF, Protocol


class UndefinedMetricError(ValueError):
    pass


class DegenerateScoresError(ValueError):
    pass


class ScoreSet:
    """Ordered (trial_id, score) pairs with unique ids and finite scores."""

    def __init__(self, entries: Sequence[tuple[str, float]] | Mapping[str, float]):
        if isinstance(entries, Mapping):
            entries = list(entries.items())
        ids = [str(t) for t, _ in entries]
        scores = np.array([float(s) for _, s in entries], dtype=np.float64)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate trial_id in score set")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        self.trial_ids = ids
        self.scores = scores

    def __len__(self) -> int:
        return len(self.trial_ids)

    def __eq__(self, other) -> bool:
        return (isinstance(other, ScoreSet) and self.trial_ids == other.trial_ids
                and np.array_equal(self.scores, other.scores))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.trial_ids, self.scores.tolist()))

    def split(self, protocol: Protocol) -> tuple[np.ndarray, np.ndarray]:
        """Bona fide and spoof score arrays; every scored trial must be in the protocol."""
        labels = protocol.labels()
        missing = [t for t in self.trial_ids if t not in labels]
        if missing:
            raise ValueError(f"{len(missing)} scored trials are not in the protocol: {missing[:10]}")
        is_bona = np.array([labels[t] == BONAFIDE for t in self.trial_ids], dtype=bool)
        bona, spoof = self.scores[is_bona], self.scores[~is_bona]
        if bona.size == 0 or spoof.size == 0:
            raise ValueError(
                f"evaluation needs both classes (bonafide={bona.size}, spoof={spoof.size})"
            )
        return bona, spoof


def read_scores(path) -> ScoreSet:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'trial_id<TAB>score'")
        try:
            entries.append((parts[0].strip(), float(parts[1])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad score {parts[1]!r}") from exc
    return ScoreSet(entries)


def write_scores(scores: ScoreSet, path) -> None:
    lines = [f"{t}\t{s:.10f}\n" for t, s in zip(scores.trial_ids, scores.scores.tolist())]
    Path(path).write_text("".join(lines), encoding="utf-8")


def error_rates(bona: np.ndarray, spoof: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FRR and FAR for the rule "bona fide iff score >= threshold".

    Thresholds are every distinct score followed by +inf, so the sweep runs
    from (FRR=0, FAR=1) to (FRR=1, FAR=0).
    """
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    bona_sorted = np.sort(bona)
    spoof_sorted = np.sort(spoof)
    frr = np.searchsorted(bona_sorted, thresholds, side="left") / bona.size
    far = 1.0 - np.searchsorted(spoof_sorted, thresholds, side="left") / spoof.size
    return thresholds, frr, far


def eer_from_rates(thresholds, frr, far) -> tuple[float, float]:
    diff = frr - far
    best = int(np.argmin(np.abs(diff)))
    if diff[best] == 0:
        return float((frr[best] + far[best]) / 2.0), float(thresholds[best])
    # first sign change of FRR - FAR; diff runs monotonically from -1 to +1
    j = int(np.flatnonzero(diff > 0)[0])
    i = j - 1
    t = diff[i] / (diff[i] - diff[j])
    eer = frr[i] + t * (frr[j] - frr[i])
    return float(eer), float(thresholds[best])


def compute_eer(scores: ScoreSet, protocol: Protocol) -> tuple[float, float]:
    """Equal error rate (fraction) and the threshold closest to FRR == FAR."""
    bona, spoof = scores.split(protocol)
    return eer_from_rates(*error_rates(bona, spoof))


def det_points(scores: ScoreSet, protocol: Protocol) -> list[tuple[float, float, float]]:
    """(threshold, FRR, FAR) staircase over increasing thresholds."""
    bona, spoof = scores.split(protocol)
    thr, frr, far = error_rates(bona, spoof)
    return list(zip(thr.tolist(), frr.tolist(), far.tolist()))


@dataclass(frozen=True)
class TdcfCostModel:
    """ASVspoof 2019 (t-DCF v1) priors and costs plus the ASV operating point.

    The ASV error rates default to a nominal operating point; pass the
    rates of the actual ASV system when one is available.
    """

    pi_tar: float = 0.9405
    pi_non: float = 0.0095
    pi_spoof: float = 0.05
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    p_miss_asv: float = 0.025
    p_fa_asv: float = 0.025
    p_miss_spoof_asv: float = 0.5

    def __post_init__(self):
        priors = (self.pi_tar, self.pi_non, self.pi_spoof)
        if any(p < 0 for p in priors) or abs(sum(priors) - 1.0) > 1e-9:
            raise ValueError(f"priors must lie on the simplex, got {priors}")
        for name in ("c_miss_asv", "c_fa_asv", "c_miss_cm", "c_fa_cm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("p_miss_asv", "p_fa_asv", "p_miss_spoof_asv"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def c1(self) -> float:
        return (self.pi_tar * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
                - self.pi_non * self.c_fa_asv * self.p_fa_asv)

    @property
    def c2(self) -> float:
        return self.c_fa_cm * self.pi_spoof * (1.0 - self.p_miss_spoof_asv)

    def check(self) -> None:
        if self.c1 <= 0 or self.c2 <= 0:
            raise UndefinedMetricError(
                f"t-DCF undefined for this ASV operating point (C1={self.c1:g}, C2={self.c2:g})"
            )

    @classmethod
    def from_file(cls, path) -> "TdcfCostModel":
        """Read ``key=value`` lines (unknown keys are an error)."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise ValueError(f"{path}:{lineno}: expected one of {sorted(cls.__dataclass_fields__)}=value")
            values[key] = float(val)
        return cls(**values)


def tdcf_curve(bona, spoof, cost: TdcfCostModel) -> tuple[np.ndarray, np.ndarray]:
    cost.check()
    thr, p_miss, p_fa = error_rates(np.asarray(bona, float), np.asarray(spoof, float))
    tdcf = (cost.c1 * p_miss + cost.c2 * p_fa) / min(cost.c1, cost.c2)
    return thr, tdcf


def compute_min_tdcf(scores: ScoreSet, protocol: Protocol,
                     cost: TdcfCostModel = TdcfCostModel()) -> tuple[float, float]:
    """Minimum normalised t-DCF over the threshold sweep, and its threshold."""
    bona, spoof = scores.split(protocol)
    thr, tdcf = tdcf_curve(bona, spoof, cost)
    best = int(np.argmin(tdcf))
    return float(tdcf[best]), float(thr[best])


def normalize_scores(scores: ScoreSet, reference: ScoreSet) -> ScoreSet:
    """Affine map making ``reference`` zero-mean and unit-variance."""
    if len(reference) == 0:
        raise ValueError("empty reference score set")
    mu = float(np.mean(reference.scores))
    sd = float(np.std(reference.scores))
    if not sd > 0 or not math.isfinite(sd):
        raise DegenerateScoresError("reference scores have zero variance")
    return ScoreSet(list(zip(scores.trial_ids, ((scores.scores - mu) / sd).tolist())))


def fuse_scores(sets: Sequence[ScoreSet], weights: Sequence[float] | None = None) -> ScoreSet:
    """Per-trial weighted average; output follows the first set's trial order.

    Inputs are expected to be normalised already (see ``normalize_scores``).
    """
    if not sets:
        raise ValueError("nothing to fuse")
    if weights is None:
        weights = [1.0 / len(sets)] * len(sets)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sets),):
        raise ValueError(f"{len(sets)} score sets but {w.size} weights")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("fusion weights must be non-negative and sum to 1")
    ids = sets[0].trial_ids
    wanted = set(ids)
    columns = []
    for k, s in enumerate(sets):
        if set(s.trial_ids) != wanted:
            missing = sorted(wanted - set(s.trial_ids))[:10]
            extra = sorted(set(s.trial_ids) - wanted)[:10]
            raise ValueError(f"score set {k} covers different trials (missing {missing}, extra {extra})")
        lookup = s.as_dict()
        columns.append([lookup[t] for t in ids])
    mat = np.array(columns)
    fused = np.zeros(len(ids))
    for k in range(len(sets)):
        fused += w[k] * mat[k]
    return ScoreSet(list(zip(ids, fused.tolist())))


def fuse_normalized(sets: Sequence[ScoreSet], references: Sequence[ScoreSet],
                    weights: Sequence[float] | None = None) -> ScoreSet:
    """z-normalise each system on its development reference, then fuse."""
    if len(sets) != len(references):
        raise ValueError("need one reference per score set")
    return fuse_scores([normalize_scores(s, r) for s, r in zip(sets, references)], weights)
