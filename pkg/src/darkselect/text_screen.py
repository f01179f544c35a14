"""Subtitle-side cleansing: auto-caption detection and text normalization."""

from __future__ import annotations

import re
import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .errors import DarkselectError, ValidationError

DEFAULT_AUTO_THRESHOLD = 0.5

INSUFFICIENT = "insufficient data"
AUTO = "auto"
MANUAL = "manual"


@dataclass(frozen=True)
class SubtitleLine:
    start_s: float
    end_s: float
    text: str


@dataclass(frozen=True)
class SubtitleDoc:
    group_id: str
    lines: tuple[SubtitleLine, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lines", tuple(self.lines))
        for ln in self.lines:
            if ln.start_s < 0 or ln.end_s < 0:
                raise ValidationError(f"{self.group_id}: negative subtitle timing")
        starts = [ln.start_s for ln in self.lines]
        if starts != sorted(starts):
            raise ValidationError(f"{self.group_id}: subtitle lines are not ordered by start time")

    def shifted(self, offset_s: float) -> "SubtitleDoc":
        return SubtitleDoc(
            self.group_id,
            tuple(SubtitleLine(ln.start_s + offset_s, ln.end_s + offset_s, ln.text) for ln in self.lines),
        )


@dataclass(frozen=True)
class AutoSubtitleVerdict:
    status: str  # AUTO, MANUAL or INSUFFICIENT
    mean_distance: float | None
    n_pairs: int

    @property
    def is_auto(self) -> bool | None:
        if self.status == INSUFFICIENT:
            return None
        return self.status == AUTO


def levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def relative_levenshtein(a: str, b: str) -> float:
    """Edit distance normalized by the longer string's length."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein(a, b) / longest


def detect_auto_subtitles(doc: SubtitleDoc, threshold: float = DEFAULT_AUTO_THRESHOLD) -> AutoSubtitleVerdict:
    """Flag machine-generated captions.

    Rolling auto-captions repeat most of the previous line, so the mean
    relative edit distance between consecutive lines is abnormally small.
    """
    texts = [ln.text for ln in doc.lines]
    if len(texts) < 2:
        return AutoSubtitleVerdict(INSUFFICIENT, None, 0)
    dists = [relative_levenshtein(a, b) for a, b in zip(texts, texts[1:])]
    mean = sum(dists) / len(dists)
    return AutoSubtitleVerdict(AUTO if mean < threshold else MANUAL, mean, len(dists))


_TIMING = re.compile(
    r"^\s*(?P<a>(?:\d+:)?\d{1,2}:\d{2}[.,]\d{1,3})\s*-->\s*(?P<b>(?:\d+:)?\d{1,2}:\d{2}[.,]\d{1,3})"
)


def _parse_clock(stamp: str) -> float:
    parts = stamp.replace(",", ".").split(":")
    seconds = float(parts[-1])
    minutes = int(parts[-2])
    hours = int(parts[-3]) if len(parts) == 3 else 0
    return hours * 3600 + minutes * 60 + seconds


def parse_vtt(text: str, group_id: str) -> SubtitleDoc:
    """Parse WebVTT-like subtitles (``HH:MM:SS.mmm --> HH:MM:SS.mmm`` cues)."""
    lines: list[SubtitleLine] = []
    cue: tuple[float, float] | None = None
    buf: list[str] = []

    def flush():
        if cue is not None and buf:
            lines.append(SubtitleLine(cue[0], cue[1], " ".join(buf)))

    for raw in text.splitlines():
        m = _TIMING.match(raw)
        if m:
            flush()
            cue = (_parse_clock(m.group("a")), _parse_clock(m.group("b")))
            buf = []
        elif not raw.strip():
            flush()
            cue, buf = None, []
        elif cue is not None:
            buf.append(raw.strip())
    flush()
    lines.sort(key=lambda ln: ln.start_s)
    return SubtitleDoc(group_id, tuple(lines))


def read_vtt(path: str | Path, group_id: str | None = None) -> SubtitleDoc:
    path = Path(path)
    return parse_vtt(path.read_text(encoding="utf-8"), group_id or path.stem)


def _clock(seconds: float) -> str:
    ms = int(round(seconds * 1000))
    h, rem = divmod(ms, 3_600_000)
    m, rem = divmod(rem, 60_000)
    s, ms = divmod(rem, 1000)
    return f"{h:02d}:{m:02d}:{s:02d}.{ms:03d}"


def format_vtt(doc: SubtitleDoc) -> str:
    out = ["WEBVTT", ""]
    for ln in doc.lines:
        out.append(f"{_clock(ln.start_s)} --> {_clock(ln.end_s)}")
        out.append(ln.text)
        out.append("")
    return "\n".join(out)


def doc_from_records(group_id: str, records: Iterable) -> SubtitleDoc:
    recs = sorted(records, key=lambda r: (r.start_s, r.utterance_id))
    return SubtitleDoc(group_id, tuple(SubtitleLine(r.start_s, r.end_s, r.text) for r in recs))


# ---------------------------------------------------------------------------
# normalizers

PUNCTUATION = set("!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~、。，．！？「」『』（）・…")
_NORMALIZERS: dict[str, Callable[[str], str]] = {}


def register_normalizer(name: str, fn: Callable[[str], str]) -> None:
    _NORMALIZERS[name] = fn


def _strip_punct(text: str) -> str:
    return " ".join("".join(" " if ch in PUNCTUATION else ch for ch in text).split())


register_normalizer("identity", lambda text: text)
register_normalizer("strip-punct", _strip_punct)


class ExternalNormalizer:
    """Pipe text through a subprocess, one line in, one line out."""

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, text: str) -> str:
        if "\n" in text:
            raise ValidationError("external normalizers take single-line text")
        try:
            proc = subprocess.run(
                self.command,
                input=text + "\n",
                capture_output=True,
                text=True,
                encoding="utf-8",
                timeout=self.timeout,
                check=False,
            )
        except OSError as exc:
            raise DarkselectError(f"normalizer {self.command[0]!r} failed to start: {exc}") from exc
        if proc.returncode != 0:
            raise DarkselectError(f"normalizer exited with {proc.returncode}: {proc.stderr.strip()}")
        out = proc.stdout.splitlines()
        return out[0] if out else ""


def get_normalizer(normalizer: str) -> Callable[[str], str]:
    """Resolve a plugin id; ``external:<command>`` runs a subprocess."""
    if normalizer.startswith("external:"):
        return ExternalNormalizer(normalizer[len("external:"):])
    try:
        return _NORMALIZERS[normalizer]
    except KeyError:
        raise ValidationError(f"unknown normalizer {normalizer!r}") from None


def normalize_text(text: str, normalizer: str = "identity") -> str:
    return get_normalizer(normalizer)(text)


# ---------------------------------------------------------------------------
# vocabulary / tokenization


class Vocabulary:
    """Token list read from a file with one token per line; line 0 is blank.

    The literal token ``<space>`` stands for a single space character.
    """

    SPACE = "<space>"

    def __init__(self, tokens: Sequence[str]):
        if len(tokens) < 2:
            raise ValidationError("vocabulary needs a blank and at least one token")
        self.tokens = list(tokens)
        self._index = {self._surface(t): i for i, t in enumerate(self.tokens) if i > 0}
        self._max_len = max(len(k) for k in self._index)

    @classmethod
    def read(cls, path: str | Path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def write(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def _surface(self, token: str) -> str:
        return " " if token == self.SPACE else token

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match tokenization; characters outside the
        vocabulary are dropped."""
        out = []
        i = 0
        while i < len(text):
            for n in range(min(self._max_len, len(text) - i), 0, -1):
                idx = self._index.get(text[i:i + n])
                if idx is not None:
                    out.append(idx)
                    i += n
                    break
            else:
                i += 1
        return out
