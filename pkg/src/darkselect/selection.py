"""Training-data selection methods.

``unselected``        every pre-screened utterance.
``acoustic-quality``  utterances whose every acoustic score exceeds a threshold.
``ours-utt``          the top-``B`` utterances by regressed utterance score.
``ours-spk``          whole speakers in descending pseudo-MOS order while the
                      running total stays within ``B`` utterances.

Selecting with a method tags the chosen records with the method name and
removes the tag from the others, so re-running a selection is idempotent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Mapping, Sequence

from . import METHODS
from .errors import ValidationError
from .manifest import CorpusManifest, UtteranceRecord

DEFAULT_ACOUSTIC_THRESHOLD = 3.5


@dataclass
class SelectionConfig:
    method: str = "ours-utt"
    theta: float = -0.3
    compact_lo: float = 1.0
    compact_hi: float = 7.0
    acoustic_threshold: float = DEFAULT_ACOUSTIC_THRESHOLD
    target_size: int | None = None
    scorer_command: str = "{python} -m darkselect.mock_scorer"
    feature_source: str = "matrix"
    seed: int = 0
    ridge_lambda: float = 1.0
    iterations: int = 1
    compare_methods: list[str] = field(default_factory=lambda: list(METHODS))

    def validate(self) -> None:
        for m in [self.method, *self.compare_methods]:
            if m not in METHODS:
                raise ValidationError(f"unknown selection method {m!r}")
        if self.compact_lo > self.compact_hi:
            raise ValidationError("compact_lo must not exceed compact_hi")
        if self.target_size is not None and self.target_size < 1:
            raise ValidationError("target_size must be >= 1")
        if not self.ridge_lambda > 0:
            raise ValidationError("ridge_lambda must be positive")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def threshold_for_budget(scores: Sequence[float], target_size: int) -> float:
    """The ``target_size``-th largest score."""
    if not scores:
        raise ValidationError("no scores to threshold")
    if not 1 <= target_size <= len(scores):
        raise ValidationError(f"target_size {target_size} outside [1, {len(scores)}]")
    return sorted(scores, reverse=True)[target_size - 1]


def top_by_utt_score(records: Sequence[UtteranceRecord], target_size: int) -> list[UtteranceRecord]:
    """Exactly ``target_size`` records scoring at or above the budget
    threshold; ties at the threshold resolve by utterance_id."""
    missing = [r.utterance_id for r in records if r.utt_score is None]
    if missing:
        raise ValidationError(f"{missing[0]}: missing utt_score")
    threshold = threshold_for_budget([r.utt_score for r in records], target_size)
    above = [r for r in records if r.utt_score > threshold]
    at = sorted((r for r in records if r.utt_score == threshold), key=lambda r: r.utterance_id)
    return above + at[: target_size - len(above)]


def passes_acoustic(rec: UtteranceRecord, threshold: float = DEFAULT_ACOUSTIC_THRESHOLD) -> bool:
    if not rec.acoustic_scores:
        raise ValidationError(f"{rec.utterance_id}: missing acoustic_scores")
    return all(v > threshold for v in rec.acoustic_scores.values())


def speakers_within_budget(
    manifest: CorpusManifest,
    speaker_scores: Mapping[str, float],
    target_size: int,
) -> list[str]:
    """Speakers in descending score order (ties by id), stopping before the
    first one whose utterances would push the total past ``target_size``."""
    sizes = {spk: len(recs) for spk, recs in manifest.speakers().items()}
    missing = sorted(set(sizes) - set(speaker_scores))
    if missing:
        raise ValidationError(f"no pseudo-MOS for speaker {missing[0]!r}")
    ranked = sorted(sizes, key=lambda s: (-speaker_scores[s], s))
    chosen, total = [], 0
    for spk in ranked:
        if total + sizes[spk] > target_size:
            break
        chosen.append(spk)
        total += sizes[spk]
    return chosen


def _apply_tag(manifest: CorpusManifest, tag: str, chosen_ids: set[str], **info: Any) -> CorpusManifest:
    out = [r.with_tag(tag) if r.utterance_id in chosen_ids else r.without_tag(tag) for r in manifest]
    return manifest.with_records(out).with_stage(f"select:{tag}", n_selected=len(chosen_ids), **info)


def select(
    manifest: CorpusManifest,
    config: SelectionConfig,
    speaker_scores: Mapping[str, float] | None = None,
    target_size: int | None = None,
) -> CorpusManifest:
    """Tag the records chosen by ``config.method``.

    ``target_size`` (or ``config.target_size``) is the utterance budget for
    the evaluation-in-the-loop methods; ``speaker_scores`` is required for
    ``ours-spk``.
    """
    method = config.method
    budget = target_size if target_size is not None else config.target_size
    records = list(manifest)
    if method == "unselected":
        chosen = {r.utterance_id for r in records}
        return _apply_tag(manifest, method, chosen)
    if method == "acoustic-quality":
        chosen = {r.utterance_id for r in records if passes_acoustic(r, config.acoustic_threshold)}
        return _apply_tag(manifest, method, chosen, threshold=config.acoustic_threshold)
    if budget is None:
        raise ValidationError(f"method {method!r} needs a target size")
    if method == "ours-utt":
        budget_eff = min(budget, len(records))
        chosen = {r.utterance_id for r in top_by_utt_score(records, budget_eff)} if budget_eff else set()
        return _apply_tag(manifest, method, chosen, target_size=budget)
    if method == "ours-spk":
        if speaker_scores is None:
            raise ValidationError("ours-spk needs speaker pseudo-MOS scores")
        speakers = set(speakers_within_budget(manifest, speaker_scores, budget))
        chosen = {r.utterance_id for r in records if r.speaker_id in speakers}
        return _apply_tag(manifest, method, chosen, target_size=budget)
    raise ValidationError(f"unknown selection method {method!r}")


def acoustic_budget(manifest: CorpusManifest, threshold: float = DEFAULT_ACOUSTIC_THRESHOLD) -> int:
    """Size of the acoustic-quality selection, used to match budgets."""
    return sum(1 for r in manifest if passes_acoustic(r, threshold))
