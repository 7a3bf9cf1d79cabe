"""Diagonal-covariance GMM countermeasure: EM training and frame-averaged LLR scoring."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .audio_io import BONAFIDE, SPOOF

VARIANCE_FLOOR = 1e-6
DEFAULT_COMPONENTS = 64
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-4
_LOG_2PI = np.log(2.0 * np.pi)


class DegenerateComponentError(RuntimeError):
    pass


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    trained_on: str = BONAFIDE
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    loglik_history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape or self.weights.shape != (self.means.shape[0],):
            raise ValueError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {self.weights.sum()}, not 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")
        if self.trained_on not in (BONAFIDE, SPOOF):
            raise ValueError(f"trained_on must be a class label, got {self.trained_on!r}")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def feature_dims(self) -> int:
        return self.means.shape[1]

    def normalize(self, feat: np.ndarray) -> np.ndarray:
        if self.norm_mean is None:
            return feat
        return (feat - self.norm_mean) / self.norm_std


def fit_normalizer(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation; constant dims keep unit scale."""
    mean = frames.mean(axis=0)
    std = frames.std(axis=0)
    std[std <= 1e-12] = 1.0
    return mean, std


def component_loglik(feat: np.ndarray, weights, means, variances) -> np.ndarray:
    """T x C matrix of log(w_c) + log N(x_t; mu_c, diag var_c)."""
    inv = 1.0 / variances
    # expand (x - mu)^2 / var without a T x C x D temporary
    quad = (feat ** 2) @ inv.T - 2.0 * feat @ (means * inv).T + np.sum(means ** 2 * inv, axis=1)
    log_det = np.sum(np.log(variances), axis=1)
    d = feat.shape[1]
    return np.log(weights) - 0.5 * (d * _LOG_2PI + log_det + quad)


def _kmeanspp(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centres = [frames[rng.integers(n)]]
    d2 = np.sum((frames - centres[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centres.append(frames[idx])
        d2 = np.minimum(d2, np.sum((frames - frames[idx]) ** 2, axis=1))
    return np.array(centres)


def gmm_train(frames, n_components: int = DEFAULT_COMPONENTS, seed: int = 0,
              max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
              trained_on: str = BONAFIDE) -> GmmModel:
    """Fit a diagonal GMM by EM from k-means++ seeded means.

    Stops once the per-frame average log-likelihood improves by less than
    ``tol``. Variances are floored at 1e-6 of the global per-dimension
    variance. A component that loses all responsibility is re-seeded on the
    worst-explained frame once; a second collapse raises
    DegenerateComponentError. ``loglik_history`` holds the average
    log-likelihood of every E-step.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("frames must be a 2-D (frames x dims) matrix")
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"{n} frames cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    global_var = x.var(axis=0)
    floor = np.maximum(VARIANCE_FLOOR * global_var, np.finfo(float).tiny)
    means = _kmeanspp(x, n_components, rng)
    variances = np.tile(np.maximum(global_var, floor), (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)
    history: list[float] = []
    reseeded = False
    for _ in range(max_iters):
        ll = component_loglik(x, weights, means, variances)
        frame_ll = logsumexp(ll, axis=1)
        history.append(float(frame_ll.mean()))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        resp = np.exp(ll - frame_ll[:, None])
        nk = resp.sum(axis=0)
        dead = np.flatnonzero(nk < 1e-10 * n)
        if dead.size:
            if reseeded:
                raise DegenerateComponentError(f"components {dead.tolist()} collapsed twice")
            reseeded = True
            worst = np.argsort(frame_ll, kind="stable")[: dead.size]
            means[dead] = x[worst]
            variances[dead] = np.maximum(global_var, floor)
            weights[dead] = 1.0 / n_components
            weights /= weights.sum()
            continue
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        variances = np.maximum((resp.T @ (x * x)) / nk[:, None] - means ** 2, floor)
    return GmmModel(weights / weights.sum(), means, variances, trained_on, loglik_history=history)


def gmm_loglik(model: GmmModel, feat) -> float:
    """Average over frames of log sum_c w_c N(x_t; mu_c, var_c)."""
    feat = np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if feat.shape[1] != model.feature_dims:
        raise ValueError(f"feature dims {feat.shape[1]} do not match model dims {model.feature_dims}")
    feat = model.normalize(feat)
    ll = component_loglik(feat, model.weights, model.means, model.variances)
    return float(np.mean(logsumexp(ll, axis=1)))


def llr_score(m_bona: GmmModel, m_spoof: GmmModel, feat) -> float:
    """Bona fide minus spoof average log-likelihood; higher means more bona fide."""
    if m_bona.feature_dims != m_spoof.feature_dims:
        raise ValueError("models disagree on feature dimensionality")
    return gmm_loglik(m_bona, feat) - gmm_loglik(m_spoof, feat)


def train_countermeasure(bona_frames, spoof_frames, n_components: int = DEFAULT_COMPONENTS,
                         seed: int = 0, max_iters: int = DEFAULT_MAX_ITERS,
                         tol: float = DEFAULT_TOL) -> tuple[GmmModel, GmmModel]:
    """Train the two class GMMs on features normalised with pooled training statistics."""
    bona = np.asarray(bona_frames, dtype=np.float64)
    spoof = np.asarray(spoof_frames, dtype=np.float64)
    mean, std = fit_normalizer(np.vstack([bona, spoof]))
    models = []
    for label, frames, s in ((BONAFIDE, bona, seed), (SPOOF, spoof, seed + 1)):
        m = gmm_train((frames - mean) / std, n_components, s, max_iters, tol, trained_on=label)
        m.norm_mean, m.norm_std = mean.copy(), std.copy()
        models.append(m)
    return models[0], models[1]


# QGMM model file: "QGMM" | u16 version | u32 dims | u32 components | u8 label | u8 has_norm
# then f64 LE: weights[C], means[C*D], variances[C*D], (norm_mean[D], norm_std[D])
GMM_MAGIC = b"QGMM"
GMM_VERSION = 1
_HEADER = struct.Struct("<4sHIIBB")


def save_model(model: GmmModel, path) -> None:
    has_norm = model.norm_mean is not None
    header = _HEADER.pack(GMM_MAGIC, GMM_VERSION, model.feature_dims, model.n_components,
                          (BONAFIDE, SPOOF).index(model.trained_on), int(has_norm))
    parts = [model.weights, model.means.ravel(), model.variances.ravel()]
    if has_norm:
        parts += [model.norm_mean, model.norm_std]
    Path(path).write_bytes(header + np.concatenate(parts).astype("<f8").tobytes())


def load_model(path) -> GmmModel:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: truncated model header")
    magic, version, d, c, label, has_norm = _HEADER.unpack_from(blob)
    if magic != GMM_MAGIC or version != GMM_VERSION:
        raise ValueError(f"{path}: not a QGMM v{GMM_VERSION} file")
    values = np.frombuffer(blob[_HEADER.size:], dtype="<f8").astype(np.float64)
    expected = c + 2 * c * d + (2 * d if has_norm else 0)
    if values.size != expected:
        raise ValueError(f"{path}: payload holds {values.size} values, expected {expected}")
    w, rest = values[:c], values[c:]
    means, rest = rest[: c * d].reshape(c, d), rest[c * d:]
    var, rest = rest[: c * d].reshape(c, d), rest[c * d:]
    model = GmmModel(w, means, var, (BONAFIDE, SPOOF)[label])
    if has_norm:
        model.norm_mean, model.norm_std = rest[:d].copy(), rest[d:].copy()
    return model
