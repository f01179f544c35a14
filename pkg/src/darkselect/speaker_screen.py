"""Speaker-side pre-screening.

Groups (source videos) are kept when they contain speech, have enough
utterances to estimate intra-group statistics, and their speaker embeddings
are neither too tight (synthetic voices) nor too spread (several speakers).
Surviving groups that share a channel are merged into one speaker.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DarkselectError, ValidationError
from .manifest import CorpusManifest, read_matrix, write_matrix

log = logging.getLogger(__name__)

DEFAULT_MIN_GROUP_UTTS = 5
DEFAULT_COMPACT_WINDOW = (1.0, 7.0)
SAMPLE_RATE = 16000


@dataclass(frozen=True)
class EmbeddingSet:
    ids: tuple[str, ...]
    vectors: np.ndarray
    reducer_id: str = "none"
    zero_variance: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2:
            raise ValidationError("embedding vectors must form a 2-D array")
        object.__setattr__(self, "vectors", vecs)
        object.__setattr__(self, "ids", tuple(self.ids))
        if len(self.ids) != vecs.shape[0]:
            raise ValidationError(f"{len(self.ids)} ids for {vecs.shape[0]} vectors")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate embedding ids")
        if vecs.size and not np.all(np.isfinite(vecs)):
            raise ValidationError("embedding vectors contain non-finite values")

    @classmethod
    def from_mapping(cls, vectors: Mapping[str, Sequence[float]]) -> "EmbeddingSet":
        ids = list(vectors)
        return cls(tuple(ids), np.array([vectors[i] for i in ids], dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.vectors))

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        index = {k: i for i, k in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise ValidationError(f"no embedding for {missing[0]!r}")
        rows = [index[i] for i in ids]
        return EmbeddingSet(tuple(ids), self.vectors[rows], self.reducer_id)


@dataclass(frozen=True)
class CompactnessResult:
    group_id: str
    n_utts: int
    score: float
    reducer_id: str


@dataclass(frozen=True)
class VadResult:
    speech_fraction: float
    segments: list[tuple[float, float]] = field(default_factory=list)


def energy_vad(
    samples: np.ndarray,
    frame_ms: float = 25.0,
    energy_ratio_threshold: float = 0.5,
    sample_rate: int = SAMPLE_RATE,
) -> VadResult:
    """Mark frames whose RMS exceeds ``energy_ratio_threshold`` times the
    global RMS as speech."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValidationError("cannot run VAD on an empty signal")
    frame_len = max(1, int(round(sample_rate * frame_ms / 1000.0)))
    n_frames = -(-x.size // frame_len)
    padded = np.zeros(n_frames * frame_len)
    padded[: x.size] = x
    counts = np.full(n_frames, frame_len, dtype=np.float64)
    counts[-1] = x.size - (n_frames - 1) * frame_len
    frame_rms = np.sqrt((padded.reshape(n_frames, frame_len) ** 2).sum(axis=1) / counts)
    global_rms = np.sqrt(np.mean(x**2))
    speech = frame_rms > energy_ratio_threshold * global_rms

    segments = []
    start = None
    for i, flag in enumerate(np.append(speech, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            end_sample = min(i * frame_len, x.size)
            segments.append((start * frame_len / sample_rate, end_sample / sample_rate))
            start = None
    return VadResult(float(speech.mean()), segments)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read 16-bit PCM WAV as mono float samples in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise ValidationError(f"{path}: only 16-bit PCM is supported")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
        channels = wf.getnchannels()
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return data, rate


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def annotate_speech_fraction(
    manifest: CorpusManifest,
    audio_root: str | Path = ".",
    frame_ms: float = 25.0,
    energy_ratio_threshold: float = 0.5,
) -> CorpusManifest:
    """Fill ``speech_fraction`` from each record's audio segment where absent."""
    cache: dict[str, tuple[np.ndarray, int]] = {}
    out = []
    for rec in manifest:
        if rec.speech_fraction is None:
            path = Path(audio_root) / rec.audio_path
            if str(path) not in cache:
                cache[str(path)] = read_wav(path)
            samples, rate = cache[str(path)]
            seg = samples[int(rec.start_s * rate): int(np.ceil(rec.end_s * rate))]
            frac = energy_vad(seg, frame_ms, energy_ratio_threshold, rate).speech_fraction if seg.size else 0.0
            rec = rec.replace(speech_fraction=frac)
        out.append(rec)
    return manifest.with_records(out)


def drop_nonspeech_and_short(
    manifest: CorpusManifest,
    min_speech_fraction: float = 0.5,
    min_group_utts: int = DEFAULT_MIN_GROUP_UTTS,
) -> CorpusManifest:
    """Remove groups with too little speech or too few utterances.

    A group's speech fraction is the duration-weighted mean over its records.
    """
    keep: set[str] = set()
    for gid, recs in manifest.groups().items():
        if len(recs) < min_group_utts:
            continue
        missing = [r.utterance_id for r in recs if r.speech_fraction is None]
        if missing:
            raise ValidationError(f"{missing[0]}: speech_fraction not computed")
        total = sum(r.duration_s for r in recs)
        frac = sum(r.speech_fraction * r.duration_s for r in recs) / total
        if frac >= min_speech_fraction:
            keep.add(gid)
    kept = [r for r in manifest if r.group_id in keep]
    return manifest.with_records(kept).with_stage(
        "drop_nonspeech_and_short",
        min_speech_fraction=min_speech_fraction,
        min_group_utts=min_group_utts,
        n_in=len(manifest),
        n_out=len(kept),
    )


def _pca(vectors: np.ndarray, target_dim: int) -> tuple[np.ndarray, np.ndarray]:
    centered = vectors - vectors.mean(axis=0)
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:target_dim].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    if comps.shape[0] < target_dim:
        pad = np.zeros((target_dim - comps.shape[0], vectors.shape[1]))
        comps = np.vstack([comps, pad])
    variances = np.zeros(target_dim)
    k = min(target_dim, sing.size)
    variances[:k] = sing[:k] ** 2 / max(vectors.shape[0] - 1, 1)
    return centered @ comps.T, variances


def _external_reduce(vectors: np.ndarray, command: str, target_dim: int) -> np.ndarray:
    with tempfile.TemporaryDirectory(prefix="darkselect-reduce-") as tmp:
        src, dst = Path(tmp) / "in.mtx", Path(tmp) / "out.mtx"
        write_matrix(vectors, src)
        cmd = shlex.split(command) + ["--in", str(src), "--out", str(dst), "--dim", str(target_dim)]
        proc = subprocess.run(cmd, capture_output=True, text=True, check=False)
        if proc.returncode != 0:
            raise DarkselectError(f"reducer exited with {proc.returncode}: {proc.stderr.strip()}")
        out = read_matrix(dst).astype(np.float64)
    if out.shape != (vectors.shape[0], target_dim):
        raise ValidationError(f"reducer returned shape {out.shape}, expected {(vectors.shape[0], target_dim)}")
    return out


def reduce_embeddings(emb: EmbeddingSet, reducer: str = "pca", target_dim: int = 2) -> EmbeddingSet:
    """Project embeddings to ``target_dim`` dimensions.

    ``"pca"`` projects onto the leading principal components (descending
    variance; each component's largest-magnitude loading is positive).
    ``"identity"`` requires ``emb.dim == target_dim``. ``"external:<cmd>"``
    runs ``<cmd> --in <mtx> --out <mtx> --dim <k>``.
    """
    if reducer == "identity":
        if emb.dim != target_dim:
            raise ValidationError(f"identity reducer needs dim {target_dim}, got {emb.dim}")
        return EmbeddingSet(emb.ids, emb.vectors.copy(), "identity")
    if reducer == "pca":
        if len(emb) < target_dim + 1:
            raise ValidationError(f"PCA to {target_dim} dims needs at least {target_dim + 1} vectors")
        proj, variances = _pca(emb.vectors, target_dim)
        scale = max(float(variances.max()), float(np.abs(emb.vectors).max()) ** 2, 1.0)
        flat = tuple(int(i) for i in np.flatnonzero(variances <= 1e-12 * scale))
        if flat:
            log.warning("zero-variance components %s in PCA reduction", flat)
            proj[:, list(flat)] = 0.0
        return EmbeddingSet(emb.ids, proj, "pca", flat)
    if reducer.startswith("external:"):
        return EmbeddingSet(emb.ids, _external_reduce(emb.vectors, reducer[len("external:"):], target_dim), reducer)
    raise ValidationError(f"unknown reducer {reducer!r}")


def compactness_score(reduced: EmbeddingSet, group_id: str = "") -> CompactnessResult:
    """Determinant of the sample covariance (n - 1 denominator)."""
    n = len(reduced)
    if n < 2:
        raise ValidationError(f"group {group_id!r}: compactness needs at least 2 vectors")
    cov = np.atleast_2d(np.cov(reduced.vectors, rowvar=False, ddof=1))
    score = max(float(np.linalg.det(cov)), 0.0)
    return CompactnessResult(group_id, n, score, reduced.reducer_id)


def group_compactness(
    manifest: CorpusManifest,
    embeddings: EmbeddingSet,
    reducer: str = "pca",
    target_dim: int = 2,
) -> dict[str, CompactnessResult]:
    results = {}
    for gid, recs in manifest.groups().items():
        sub = embeddings.subset([r.utterance_id for r in recs])
        results[gid] = compactness_score(reduce_embeddings(sub, reducer, target_dim), gid)
    return results


def annotate_compactness(manifest: CorpusManifest, results: Mapping[str, CompactnessResult]) -> CorpusManifest:
    out = []
    for rec in manifest:
        res = results.get(rec.group_id)
        if res is None:
            raise ValidationError(f"no compactness result for group {rec.group_id!r}")
        out.append(rec.replace(compactness=res.score))
    return manifest.with_records(out)


def filter_groups_by_compactness(
    manifest: CorpusManifest,
    lo: float = DEFAULT_COMPACT_WINDOW[0],
    hi: float = DEFAULT_COMPACT_WINDOW[1],
) -> CorpusManifest:
    """Keep records whose group compactness lies in ``[lo, hi]``."""
    if lo > hi:
        raise ValidationError(f"empty compactness window [{lo}, {hi}]")
    kept = []
    for rec in manifest:
        if rec.compactness is None:
            raise ValidationError(f"{rec.utterance_id}: missing compactness")
        if lo <= rec.compactness <= hi:
            kept.append(rec)
    return manifest.with_records(kept).with_stage(
        "filter_groups_by_compactness", lo=lo, hi=hi, n_in=len(manifest), n_out=len(kept)
    )


def speaker_id_for_channel(channel_id: str) -> str:
    return f"spk-{channel_id}"


def group_to_speakers(manifest: CorpusManifest) -> CorpusManifest:
    """Assign one speaker per channel."""
    out = []
    for rec in manifest:
        if not rec.channel_id:
            raise ValidationError(f"{rec.utterance_id}: missing channel_id")
        out.append(rec.replace(speaker_id=speaker_id_for_channel(rec.channel_id)))
    return manifest.with_records(out).with_stage("group_to_speakers")
