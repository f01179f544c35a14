"""Curate TTS training corpora from unvetted audio/subtitle collections.

Pre-screening works on externally supplied CTC log-posteriors and speaker
embeddings; selection ranks utterances by pseudo-MOS regressed from a
trained model's per-speaker scores.
"""

__version__ = "0.1.0"

METHODS = ("unselected", "acoustic-quality", "ours-utt", "ours-spk")
