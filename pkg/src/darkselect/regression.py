"""Utterance-level regression of speaker pseudo-MOS.

Each utterance is a training row whose target is its speaker's pseudo-MOS;
the fitted model then scores utterances individually, so that acoustically
similar data receives similar predicted naturalness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .manifest import CorpusManifest, read_matrix


def pool_features(frames: np.ndarray) -> np.ndarray:
    """Concatenate per-dimension mean and (population) standard deviation."""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"expected a non-empty frames x dims matrix, got shape {x.shape}")
    return np.concatenate([x.mean(axis=0), x.std(axis=0)])


def spectral_features(samples: np.ndarray, sample_rate: int = 16000, frame_ms: float = 25.0) -> np.ndarray:
    """Deterministic frame-level spectral statistics.

    Columns: log energy, spectral centroid (Hz), 85% roll-off (Hz) and
    spectral flatness.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    n = max(8, int(round(sample_rate * frame_ms / 1000.0)))
    n_frames = max(1, x.size // n)
    if x.size < n:
        x = np.pad(x, (0, n - x.size))
    frames = x[: n_frames * n].reshape(n_frames, n) * np.hanning(n)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2 + 1e-12
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    total = power.sum(axis=1)
    centroid = (power * freqs).sum(axis=1) / total
    cumulative = np.cumsum(power, axis=1)
    rolloff = freqs[np.argmax(cumulative >= 0.85 * total[:, None], axis=1)]
    flatness = np.exp(np.log(power).mean(axis=1)) / power.mean(axis=1)
    return np.column_stack([np.log(total), centroid, rolloff, flatness])


@dataclass(frozen=True)
class RegressorModel:
    """Ridge regression on standardized features with an unpenalized bias.

    ``weights[:-1]`` apply to standardized features, ``weights[-1]`` is the
    bias.
    """

    weights: np.ndarray
    lam: float
    feature_mean: np.ndarray
    feature_std: np.ndarray
    kind: str = "ridge-pooled"

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValidationError("ridge coefficient must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise ValidationError("non-finite regressor weights")

    @property
    def feature_dim(self) -> int:
        return self.feature_mean.size

    def predict(self, features: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if X.shape[1] != self.feature_dim:
            raise ValidationError(f"expected {self.feature_dim} features, got {X.shape[1]}")
        Z = (X - self.feature_mean) / self.feature_std
        return Z @ self.weights[:-1] + self.weights[-1]

    def coefficients(self) -> tuple[np.ndarray, float]:
        """Slope and intercept in the original feature units."""
        slope = self.weights[:-1] / self.feature_std
        return slope, float(self.weights[-1] - slope @ self.feature_mean)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "lambda": self.lam,
                "weights": [float(w) for w in self.weights],
                "feature_mean": [float(v) for v in self.feature_mean],
                "feature_std": [float(v) for v in self.feature_std],
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "RegressorModel":
        obj = json.loads(text)
        return cls(
            np.array(obj["weights"]),
            obj["lambda"],
            np.array(obj["feature_mean"]),
            np.array(obj["feature_std"]),
            obj["kind"],
        )


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float = 1.0) -> RegressorModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam <= 0:
        raise ValidationError("ridge coefficient must be positive")
    if X.ndim != 2 or X.shape[0] != y.size or X.shape[0] == 0:
        raise ValidationError(f"incompatible design {X.shape} and targets {y.shape}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std
    ybar = y.mean()
    # centered design: the bias decouples and is left unpenalized
    w = np.linalg.solve(Z.T @ Z + lam * np.eye(Z.shape[1]), Z.T @ (y - ybar))
    return RegressorModel(np.append(w, ybar), float(lam), mean, std)


def train_regressor(
    features: Mapping[str, np.ndarray],
    manifest: CorpusManifest,
    speaker_scores: Mapping[str, float],
    lam: float = 1.0,
) -> RegressorModel:
    """Fit one row per utterance against its speaker's pseudo-MOS.

    Args:
        features: pooled feature vector per utterance_id.
        manifest: the utterances to train on (all pre-screened data).
        speaker_scores: pseudo-MOS per speaker_id.
        lam: ridge coefficient.
    """
    rows, targets = [], []
    for rec in manifest:
        if rec.speaker_id not in speaker_scores:
            raise ValidationError(f"{rec.utterance_id}: no target for speaker {rec.speaker_id!r}")
        if rec.utterance_id not in features:
            raise ValidationError(f"{rec.utterance_id}: missing features")
        rows.append(features[rec.utterance_id])
        targets.append(speaker_scores[rec.speaker_id])
    if not rows:
        raise ValidationError("no training rows")
    return fit_ridge(np.vstack(rows), np.array(targets), lam)


def predict_utterance_scores(
    model: RegressorModel,
    manifest: CorpusManifest,
    features: Mapping[str, np.ndarray],
) -> CorpusManifest:
    ids = [r.utterance_id for r in manifest]
    missing = [i for i in ids if i not in features]
    if missing:
        raise ValidationError(f"{missing[0]}: missing features")
    if not ids:
        return manifest
    preds = model.predict(np.vstack([features[i] for i in ids]))
    out = [rec.replace(utt_score=float(p)) for rec, p in zip(manifest, preds)]
    return manifest.with_records(out).with_stage("predict_utterance_scores", kind=model.kind, lam=model.lam)


def load_pooled_features(
    manifest: CorpusManifest,
    source: str = "matrix",
    root: str | Path = ".",
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Pooled features per utterance.

    ``source="matrix"`` reads each record's ``feature_path`` MatrixFile;
    ``source="spectral"`` computes spectral statistics from the audio slice.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .speaker_screen import read_wav

    root = Path(root)

    def one(rec) -> np.ndarray:
        if source == "matrix":
            if not rec.feature_path:
                raise ValidationError(f"{rec.utterance_id}: no feature_path")
            return pool_features(read_matrix(root / rec.feature_path))
        if source == "spectral":
            samples, rate = read_wav(root / rec.audio_path)
            seg = samples[int(rec.start_s * rate): int(np.ceil(rec.end_s * rate))]
            return pool_features(spectral_features(seg, rate))
        raise ValidationError(f"unknown feature source {source!r}")

    recs: Sequence = list(manifest)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vecs = list(pool.map(one, recs))
    else:
        vecs = [one(r) for r in recs]
    return {r.utterance_id: v for r, v in zip(recs, vecs)}
