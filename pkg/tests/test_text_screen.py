import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darkselect.errors import DarkselectError, ValidationError
from darkselect.text_screen import (
    AUTO,
    INSUFFICIENT,
    MANUAL,
    ExternalNormalizer,
    SubtitleDoc,
    SubtitleLine,
    Vocabulary,
    detect_auto_subtitles,
    format_vtt,
    levenshtein,
    normalize_text,
    parse_vtt,
    relative_levenshtein,
)
from oracles import levenshtein_full

WORDS = "the quick brown fox jumps over a lazy dog while seven cats watch from old red barn".split()


def _doc(texts, gid="g"):
    return SubtitleDoc(gid, tuple(SubtitleLine(2.0 * i, 2.0 * i + 1.5, t) for i, t in enumerate(texts)))


def test_kitten_sitting():
    assert levenshtein("kitten", "sitting") == 3
    assert relative_levenshtein("kitten", "sitting") == pytest.approx(3 / 7)


def test_empty_strings():
    assert relative_levenshtein("", "") == 0.0
    assert relative_levenshtein("", "abc") == 1.0


_short = st.text(alphabet="abcde ", max_size=12)


@settings(max_examples=200, deadline=None)
@given(_short, _short, _short)
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein_full(a, b)
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert 0.0 <= relative_levenshtein(a, b) <= 1.0


def test_rolling_captions_are_flagged_and_independent_lines_are_not(rng):
    words = [WORDS[i] for i in rng.integers(0, len(WORDS), size=40)]
    rolling = [" ".join(words[i:i + 7]) for i in range(30)]
    independent = [" ".join(rng.choice(WORDS, size=7)) for _ in range(30)]
    auto = detect_auto_subtitles(_doc(rolling))
    manual = detect_auto_subtitles(_doc(independent))
    assert auto.status == AUTO and auto.is_auto
    assert manual.status == MANUAL and manual.is_auto is False
    oracle = np.mean([levenshtein_full(a, b) / max(len(a), len(b)) for a, b in zip(rolling, rolling[1:])])
    assert auto.mean_distance == pytest.approx(oracle)
    assert auto.n_pairs == 29


@pytest.mark.parametrize("texts", [[], ["only one line"]])
def test_too_few_lines_is_insufficient(texts):
    verdict = detect_auto_subtitles(_doc(texts))
    assert verdict.status == INSUFFICIENT
    assert verdict.is_auto is None


def test_verdict_ignores_time_shift(rng):
    doc = _doc([" ".join(rng.choice(WORDS, size=5)) for _ in range(10)])
    assert detect_auto_subtitles(doc) == detect_auto_subtitles(doc.shifted(123.4))


def test_unordered_lines_are_rejected():
    with pytest.raises(ValidationError):
        SubtitleDoc("g", (SubtitleLine(5, 6, "b"), SubtitleLine(1, 2, "a")))


def test_vtt_round_trip():
    doc = SubtitleDoc("g", (SubtitleLine(0.5, 1.25, "hello there"), SubtitleLine(3661.002, 3662.5, "again")))
    back = parse_vtt(format_vtt(doc), "g")
    assert back == doc


def test_vtt_parses_multiline_cues_and_commas():
    text = "WEBVTT\n\n1\n00:00:01,000 --> 00:00:02,500\nfirst\nsecond\n\n00:03.000 --> 00:04.000\nthird\n"
    doc = parse_vtt(text, "x")
    assert [ln.text for ln in doc.lines] == ["first second", "third"]
    assert doc.lines[0].end_s == 2.5 and doc.lines[1].start_s == 3.0


def test_builtin_normalizers():
    assert normalize_text("Hello, world!") == "Hello, world!"
    assert normalize_text("Hello,  world! (again)", "strip-punct") == "Hello world again"
    with pytest.raises(ValidationError, match="unknown normalizer"):
        normalize_text("x", "nope")


def test_external_normalizer_round_trip():
    script = "import sys; print(sys.stdin.readline().strip().upper())"
    norm = ExternalNormalizer([sys.executable, "-c", script])
    assert norm("echo me") == "ECHO ME"
    assert normalize_text("abc", f"external:{sys.executable} -c 'import sys; print(sys.stdin.read().strip()[::-1])'") == "cba"


def test_external_normalizer_failure_is_reported():
    norm = ExternalNormalizer([sys.executable, "-c", "import sys; sys.exit(3)"])
    with pytest.raises(DarkselectError, match="exited with 3"):
        norm("x")


def test_vocabulary_encoding(tmp_path):
    vocab = Vocabulary(["<blank>", "a", "b", "ab", "<space>"])
    assert vocab.encode("ab a?b") == [3, 4, 1, 2]
    vocab.write(tmp_path / "v.txt")
    assert Vocabulary.read(tmp_path / "v.txt").tokens == vocab.tokens
    with pytest.raises(ValidationError):
        Vocabulary(["<blank>"])
