"""Seeded synthetic corpus for desk-scale runs of the whole pipeline.

Every utterance carries a planted quality ``q`` in [0, 1]. Mixed-quality
speakers have both clearly good (``q >= 0.8``) and clearly bad (``q <= 0.2``)
utterances; the others scatter around a per-speaker base quality. Acoustic
scores, pooled features and embeddings are generated so that each
pre-screening and selection step has something real to find:

* features: column 0 tracks ``q`` (the regressor's signal), column 1 a
  nuisance shared with the acoustic scores, the rest is noise;
* acoustic scores mix ``q`` with the nuisance, so thresholding them is a
  noisy proxy of quality;
* embeddings: one cluster per speaker with a known within-group
  covariance; distractor groups are TTS-like (tiny spread) or mix two
  speakers (large spread);
* posteriors: one grid per group, clean spikes for matching text and spikes
  for unrelated text on a few mismatched utterances;
* distractor groups also cover non-speech videos and rolling auto-captions.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ctc_align import PosteriorGrid, write_posteriors
from .errors import ValidationError
from .manifest import CorpusManifest, UtteranceRecord, atomic_write_bytes, write_id_list, write_manifest, write_matrix
from .text_screen import SubtitleDoc, SubtitleLine, Vocabulary, format_vtt

ACOUSTIC_SCORE_NAMES = ("dnsmos_bak", "dnsmos_ovr", "dnsmos_sig", "nisqa", "snr_mos")
FRAME_S = 0.01
SAMPLES_PER_FRAME = 160
LETTERS = string.ascii_lowercase


@dataclass
class SyntheticSpec:
    n_speakers: int = 200
    utts_per_speaker: tuple[int, int] = (6, 14)
    mixed_fraction: float = 0.3
    base_quality: tuple[float, float] = (0.1, 0.95)
    quality_jitter: float = 0.05
    mixed_high: tuple[float, float] = (0.8, 1.0)
    mixed_low: tuple[float, float] = (0.0, 0.2)
    embedding_dim: int = 32
    cluster_spread: float = 3.0
    within_group_var: float = 2.0
    feature_noise: float = 0.05
    mismatch_fraction: float = 0.06
    n_tts_groups: int = 4
    n_multi_speaker_groups: int = 4
    n_nonspeech_groups: int = 4
    n_auto_caption_groups: int = 3
    n_reference_speakers: int = 10
    reference_quality: tuple[float, float] = (0.78, 0.95)
    seed: int = 0

    def validate(self) -> None:
        if self.n_speakers < 1:
            raise ValidationError("n_speakers must be >= 1")
        lo, hi = self.utts_per_speaker
        if not 1 <= lo <= hi:
            raise ValidationError("utts_per_speaker must be an ordered pair of positive counts")
        for name in ("mixed_fraction", "mismatch_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        for name in ("base_quality", "mixed_high", "mixed_low", "reference_quality"):
            a, b = getattr(self, name)
            if not 0.0 <= a <= b <= 1.0:
                raise ValidationError(f"{name} must be an ordered pair within [0, 1]")
        if self.embedding_dim < 2 or self.within_group_var <= 0 or self.cluster_spread < 0:
            raise ValidationError("embedding parameters out of range")
        if min(self.n_tts_groups, self.n_multi_speaker_groups, self.n_nonspeech_groups,
               self.n_auto_caption_groups, self.n_reference_speakers) < 0:
            raise ValidationError("group counts must be nonnegative")

    def as_dict(self) -> dict:
        return asdict(self)


def vocabulary() -> Vocabulary:
    return Vocabulary(["<blank>", *LETTERS, Vocabulary.SPACE])


def _sentence(rng: np.random.Generator, n_words: int | None = None) -> str:
    n_words = n_words or int(rng.integers(2, 4))
    return " ".join("".join(rng.choice(list(LETTERS), size=int(rng.integers(2, 6)))) for _ in range(n_words))


def _log_rows(target: np.ndarray, clarity: np.ndarray, V: int) -> np.ndarray:
    """Rows putting ``clarity`` on ``target`` and spreading the rest."""
    probs = np.repeat(((1.0 - clarity) / (V - 1))[:, None], V, axis=1)
    probs[np.arange(target.size), target] = clarity
    return np.log(probs)


def _emit_frames(rng, tokens: list[int], clarity: float, blank: int = 0) -> tuple[list[int], list[float]]:
    """Frame targets for one utterance: each token for 2-3 frames then a blank."""
    targets, clar = [], []
    for k, tok in enumerate(tokens):
        n = int(rng.integers(2, 4))
        targets += [tok] * n
        clar += [clarity] * n
        if k < len(tokens) - 1:
            targets.append(blank)
            clar.append(clarity)
    return targets, clar


def _whitened(rng, n: int, var: float) -> np.ndarray:
    """n x 2 points whose sample covariance is exactly ``var * I``."""
    z = rng.normal(size=(n, 2))
    z -= z.mean(axis=0)
    u, _, _ = np.linalg.svd(z, full_matrices=False)
    return u * np.sqrt(var * (n - 1))


def _group_embeddings(rng, center: np.ndarray, n: int, var: float, split: float = 0.0) -> np.ndarray:
    dim = center.size
    basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
    pts = center + _whitened(rng, n, var) @ basis.T
    if split:
        pts[: n // 2] += split * basis[:, 0]
    return pts + rng.normal(scale=0.01, size=pts.shape)


def _acoustic_scores(rng, q: float, nuisance: float) -> dict[str, float]:
    base = 1.0 + 4.0 * (0.55 * q + 0.45 * nuisance)
    return {name: float(np.clip(base + rng.normal(scale=0.15), 1.0, 5.0)) for name in ACOUSTIC_SCORE_NAMES}


def _round(x: float) -> float:
    return float(f"{x:.9g}")


def generate_corpus(spec: SyntheticSpec, out_dir: str | Path) -> dict:
    """Write a run-ready corpus under ``out_dir`` and return its run config.

    Layout: ``manifest.jsonl``, ``reference.jsonl``, ``vocab.txt``,
    ``posteriors/<group>.mtx`` (+ ``.hdr``), ``embeddings/<group>.mtx``
    (+ ``.ids``), ``features/<utt>.mtx``, ``subtitles/<group>.vtt`` and
    ``config.json`` pointing at all of them.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    out = Path(out_dir)
    for sub in ("posteriors", "embeddings", "features", "subtitles"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    vocab = vocabulary()
    V = len(vocab)

    # group plans: (group_id, channel_id, kind, qualities, embedding params)
    plans = []
    n_mixed = int(round(spec.mixed_fraction * spec.n_speakers))
    mixed = set(rng.permutation(spec.n_speakers)[:n_mixed].tolist())
    lo, hi = spec.utts_per_speaker
    for s in range(spec.n_speakers):
        n = int(rng.integers(lo, hi + 1))
        if s in mixed:
            n_high = int(rng.integers(1, n))
            q = np.concatenate([rng.uniform(*spec.mixed_high, n_high), rng.uniform(*spec.mixed_low, n - n_high)])
            q = rng.permutation(q)
        else:
            base = rng.uniform(*spec.base_quality)
            q = np.clip(base + rng.normal(scale=spec.quality_jitter, size=n), 0.0, 1.0)
        center = rng.normal(scale=spec.cluster_spread, size=spec.embedding_dim)
        channel = f"ch{s:04d}"
        parts = [n] if n < 12 else [n // 2, n - n // 2]
        offset = 0
        for g, m in enumerate(parts):
            plans.append((f"{channel}-v{g}", channel, "clean", q[offset:offset + m], center, spec.within_group_var, 0.0))
            offset += m
    extra = [
        ("tts", spec.n_tts_groups, 0.02, 0.0),
        ("multi", spec.n_multi_speaker_groups, spec.within_group_var, 4.0 * spec.cluster_spread),
        ("nonspeech", spec.n_nonspeech_groups, spec.within_group_var, 0.0),
        ("autocap", spec.n_auto_caption_groups, spec.within_group_var, 0.0),
    ]
    for kind, count, var, split in extra:
        for i in range(count):
            n = int(rng.integers(max(lo, 6), hi + 1))
            channel = f"x{kind}{i:02d}"
            center = rng.normal(scale=spec.cluster_spread, size=spec.embedding_dim)
            plans.append((f"{channel}-v0", channel, kind, rng.uniform(0.0, 1.0, n), center, var, split))

    records = []
    for group_id, channel, kind, qualities, center, var, split in plans:
        n = len(qualities)
        if kind == "autocap":
            # rolling captions: each line drops one word and appends one
            words = _sentence(rng, n + 6).split()
            texts = [" ".join(words[i:i + 7]) for i in range(n)]
        else:
            texts = [_sentence(rng) for _ in range(n)]
        frames: list[int] = []
        clar: list[float] = []
        cursor = int(rng.integers(10, 20))
        frames += [0] * cursor
        clar += [0.95] * cursor
        lines, group_recs = [], []
        emb = _group_embeddings(rng, center, n, var, split)
        for k in range(n):
            uid = f"{group_id}-u{k:02d}"
            q = float(qualities[k])
            mismatch = kind == "clean" and rng.random() < spec.mismatch_fraction
            spoken = _sentence(rng) if mismatch else texts[k]
            tgt, cl = _emit_frames(rng, vocab.encode(spoken), float(rng.uniform(0.85, 0.97)))
            onset = len(frames)
            frames += tgt
            clar += cl
            offset_frame = len(frames) - 1
            gap = int(rng.integers(8, 20))
            frames += [0] * gap
            clar += [0.95] * gap
            start_s = _round(max(0, onset - 2) * FRAME_S)
            end_s = _round((offset_frame + 3) * FRAME_S)
            lines.append(SubtitleLine(start_s, end_s, texts[k]))

            nuisance = float(rng.uniform())
            n_feat = offset_frame - onset + 1
            feats = np.column_stack([
                q + rng.normal(scale=spec.feature_noise, size=n_feat),
                nuisance + rng.normal(scale=0.1, size=n_feat),
                rng.normal(size=n_feat),
                rng.normal(size=n_feat),
            ])
            write_matrix(feats, out / "features" / f"{uid}.mtx")
            speech = rng.uniform(0.05, 0.3) if kind == "nonspeech" else rng.uniform(0.75, 1.0)
            group_recs.append(UtteranceRecord(
                utterance_id=uid,
                group_id=group_id,
                channel_id=channel,
                text=texts[k],
                audio_path=f"audio/{group_id}.wav",
                start_s=start_s,
                end_s=end_s,
                acoustic_scores={k2: _round(v) for k2, v in _acoustic_scores(rng, q, nuisance).items()},
                planted_quality=_round(q),
                speech_fraction=_round(float(speech)),
                feature_path=f"{uid}.mtx",
                extras={"mismatched": True} if mismatch else {},
            ))
        grid = PosteriorGrid(
            _log_rows(np.array(frames), np.array(clar), V), 0, FRAME_S, SAMPLES_PER_FRAME
        )
        write_posteriors(grid, out / "posteriors" / f"{group_id}.mtx")
        write_matrix(emb, out / "embeddings" / f"{group_id}.mtx")
        write_id_list([r.utterance_id for r in group_recs], out / "embeddings" / f"{group_id}.ids")
        atomic_write_bytes(out / "subtitles" / f"{group_id}.vtt", format_vtt(SubtitleDoc(group_id, tuple(lines))).encode("utf-8"))
        records += group_recs

    write_manifest(CorpusManifest(tuple(records), {"created_by": "synthcorpus", "seed": spec.seed}), out / "manifest.jsonl")

    ref = []
    for s in range(spec.n_reference_speakers):
        base = rng.uniform(*spec.reference_quality)
        channel = f"ref{s:02d}"
        for k in range(10):
            q = float(np.clip(base + rng.normal(scale=0.01), 0.0, 1.0))
            ref.append(UtteranceRecord(
                utterance_id=f"{channel}-u{k:02d}",
                group_id=f"{channel}-v0",
                channel_id=channel,
                speaker_id=f"spk-{channel}",
                text=_sentence(rng),
                audio_path=f"audio/{channel}.wav",
                start_s=_round(2.0 * k),
                end_s=_round(2.0 * k + 1.5),
                planted_quality=_round(q),
            ))
    write_manifest(CorpusManifest(tuple(ref), {"created_by": "synthcorpus", "role": "reference"}), out / "reference.jsonl")
    vocab.write(out / "vocab.txt")

    config = {
        "manifest": "manifest.jsonl",
        "reference_manifest": "reference.jsonl",
        "vocab": "vocab.txt",
        "posterior_dir": "posteriors",
        "embedding_dir": "embeddings",
        "feature_dir": "features",
        "subtitle_dir": "subtitles",
        "seed": spec.seed,
    }
    atomic_write_bytes(out / "config.json", (json.dumps(config, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    atomic_write_bytes(out / "synthetic_spec.json", (json.dumps(spec.as_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return config


def mock_posterior_inference(
    signal: np.ndarray,
    n_symbols: int = 8,
    samples_per_frame: int = SAMPLES_PER_FRAME,
    radius: int = 60,
    frame_duration_s: float = FRAME_S,
) -> PosteriorGrid:
    """Deterministic stand-in for acoustic-model inference with locality.

    Frame ``t`` depends only on the samples of frames ``t - radius`` to
    ``t + radius`` that exist in ``signal``. Contributions are accumulated
    in a fixed order, so a frame with the same neighbourhood yields the same
    bits whether it is computed on the whole signal or on a block.
    """
    x = np.asarray(signal, dtype=np.float64)
    T = x.size // samples_per_frame
    if T < 1:
        raise ValidationError("signal shorter than one frame")
    energy = x[: T * samples_per_frame].reshape(T, samples_per_frame).sum(axis=1)
    padded = np.concatenate([np.zeros(radius), energy, np.zeros(radius)])
    acc = np.zeros(T)
    for d in range(-radius, radius + 1):
        acc = acc + (1.0 / (1 + abs(d))) * padded[radius + d: radius + d + T]
    scale = np.linspace(-1.0, 1.0, n_symbols)
    bias = np.cos(np.arange(n_symbols))
    z = acc[:, None] * scale[None, :] + bias[None, :]
    z = z - z.max(axis=1, keepdims=True)
    logits = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return PosteriorGrid(logits, 0, frame_duration_s, samples_per_frame)
