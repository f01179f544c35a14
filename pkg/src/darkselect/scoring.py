"""Speaker-wise pseudo-MOS: the external scorer contract and a mock scorer.

An external scorer wraps "train a TTS model on the given manifest, synthesize
a common sentence set per speaker, predict MOS and average per speaker". It
is invoked as::

    <command> --manifest <path> --sentences <id> --out <path>

and writes one ``speaker_id<TAB>score`` line per speaker to ``--out``. The
manifest's metadata may carry ``training_tag``: the selection tag marking
the utterances the model is trained on.
"""

from __future__ import annotations

import hashlib
import math
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ScorerError, ValidationError
from .manifest import CorpusManifest, atomic_write_bytes, write_manifest

MOS_MIN, MOS_MAX = 1.0, 5.0
DEFAULT_SENTENCE_SET = "common-100"


@dataclass(frozen=True)
class SpeakerScoreTable:
    scores: Mapping[str, float]
    sentence_set_id: str = DEFAULT_SENTENCE_SET
    scorer_id: str = ""

    def __post_init__(self) -> None:
        for spk, value in self.scores.items():
            if not MOS_MIN <= value <= MOS_MAX:
                raise ValidationError(f"speaker {spk!r}: pseudo-MOS {value} outside [1, 5]")

    def __len__(self) -> int:
        return len(self.scores)

    def __getitem__(self, speaker_id: str) -> float:
        return self.scores[speaker_id]

    def shifted(self, delta: float) -> "SpeakerScoreTable":
        """Scores plus a constant, clipped to the MOS scale."""
        return SpeakerScoreTable(
            {k: min(MOS_MAX, max(MOS_MIN, v + delta)) for k, v in self.scores.items()},
            self.sentence_set_id,
            self.scorer_id,
        )

    def to_tsv(self) -> str:
        return "".join(f"{spk}\t{self.scores[spk]:.9g}\n" for spk in sorted(self.scores))


def parse_score_lines(text: str, source: str = "<scorer output>") -> dict[str, float]:
    scores: dict[str, float] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ScorerError(f"{source}:{lineno}: expected 'speaker_id<TAB>score', got {line!r}")
        spk, raw = parts[0].strip(), parts[1].strip()
        try:
            value = float(raw)
        except ValueError:
            raise ScorerError(f"{source}:{lineno}: score {raw!r} is not a number") from None
        if not spk:
            raise ScorerError(f"{source}:{lineno}: empty speaker id")
        if spk in scores:
            raise ScorerError(f"{source}:{lineno}: speaker {spk!r} scored twice")
        if not (math.isfinite(value) and MOS_MIN <= value <= MOS_MAX):
            raise ScorerError(f"{source}:{lineno}: speaker {spk!r} score {value} outside [1, 5]")
        scores[spk] = value
    return scores


def read_score_table(path: str | Path, sentence_set_id: str = DEFAULT_SENTENCE_SET, scorer_id: str = "") -> SpeakerScoreTable:
    path = Path(path)
    return SpeakerScoreTable(parse_score_lines(path.read_text(encoding="utf-8"), str(path)), sentence_set_id, scorer_id)


def write_score_table(table: SpeakerScoreTable, path: str | Path) -> None:
    atomic_write_bytes(path, table.to_tsv().encode("utf-8"))


def _command_list(command: str | Sequence[str]) -> list[str]:
    """Split a command; the token ``{python}`` becomes the running interpreter."""
    parts = shlex.split(command) if isinstance(command, str) else list(command)
    return [sys.executable if p == "{python}" else p for p in parts]


def run_scorer(
    command: str | Sequence[str],
    manifest: CorpusManifest,
    sentence_set_id: str = DEFAULT_SENTENCE_SET,
    training_tag: str | None = None,
    timeout: float | None = None,
) -> SpeakerScoreTable:
    """Run an external scorer and validate its per-speaker output.

    Raises:
        ScorerError: nonzero exit, malformed output, a speaker missing from
            or unknown to the manifest, or a score outside [1, 5].
    """
    cmd = _command_list(command)
    speakers = {r.speaker_id for r in manifest if r.speaker_id}
    if training_tag is not None:
        manifest = CorpusManifest(manifest.records, {**manifest.metadata, "training_tag": training_tag})
    with tempfile.TemporaryDirectory(prefix="darkselect-score-") as tmp:
        mpath, out = Path(tmp) / "manifest.jsonl", Path(tmp) / "scores.tsv"
        write_manifest(manifest, mpath)
        full = cmd + ["--manifest", str(mpath), "--sentences", sentence_set_id, "--out", str(out)]
        try:
            proc = subprocess.run(full, capture_output=True, text=True, timeout=timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ScorerError(f"scorer {cmd[0]!r} failed: {exc}") from exc
        if proc.returncode != 0:
            raise ScorerError(f"scorer exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}")
        if not out.exists():
            raise ScorerError("scorer did not write its output file")
        scores = parse_score_lines(out.read_text(encoding="utf-8"))
    missing = sorted(speakers - set(scores))
    if missing:
        raise ScorerError(f"scorer output misses speaker {missing[0]!r} ({len(missing)} missing)")
    unknown = sorted(set(scores) - speakers)
    if unknown:
        raise ScorerError(f"scorer output has unknown speaker {unknown[0]!r}")
    return SpeakerScoreTable(scores, sentence_set_id, " ".join(cmd))


def speaker_noise(seed: int, speaker_id: str, sigma: float) -> float:
    """Deterministic zero-mean Gaussian draw keyed by (seed, speaker)."""
    if sigma == 0:
        return 0.0
    digest = hashlib.sha256(f"{seed}:{speaker_id}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return float(rng.normal(0.0, sigma))


def mock_speaker_scorer(
    manifest: CorpusManifest,
    seed: int = 0,
    sigma: float = 0.1,
    training_tag: str | None = None,
    sentence_set_id: str = DEFAULT_SENTENCE_SET,
) -> SpeakerScoreTable:
    """Closed-form stand-in for train-synthesize-predict.

    ``pseudo_mos = clip(1 + 4 * mean(planted_quality) + noise, 1, 5)`` over
    the speaker's utterances carrying ``training_tag`` (any tag when it is
    None). Speakers without such utterances are scored from all of theirs.
    """
    if training_tag is None:
        training_tag = manifest.metadata.get("training_tag")
    scores = {}
    for spk, recs in sorted(manifest.speakers().items()):
        for r in recs:
            if r.planted_quality is None:
                raise ValidationError(f"{r.utterance_id}: missing planted_quality")
        if training_tag is None:
            chosen = [r for r in recs if r.selected]
        else:
            chosen = [r for r in recs if training_tag in r.selected]
        pool = chosen or recs
        quality = sum(r.planted_quality for r in pool) / len(pool)
        value = 1.0 + 4.0 * quality + speaker_noise(seed, spk, sigma)
        scores[spk] = min(MOS_MAX, max(MOS_MIN, value))
    return SpeakerScoreTable(scores, sentence_set_id, f"mock(seed={seed},sigma={sigma})")
