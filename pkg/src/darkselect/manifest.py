"""On-disk data model: line-delimited corpus manifests and binary matrix files.

A manifest is UTF-8 text with one JSON object per line. An optional first
line of the form ``{"_meta": {...}}`` carries manifest metadata (the
append-only list of pipeline stages that produced it). Keys are written in
sorted order and floats with 9 significant digits so that two writes of the
same manifest are byte-identical.

A matrix file is ``b"MTX1"``, ``uint32 rows``, ``uint32 cols``, a one-byte
dtype code (0 = float32) and the row-major payload, little-endian throughout.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ManifestError, MatrixFormatError

REQUIRED_FIELDS = (
    "utterance_id",
    "group_id",
    "channel_id",
    "speaker_id",
    "text",
    "audio_path",
    "start_s",
    "end_s",
)
OPTIONAL_FLOAT_FIELDS = (
    "ctc_score",
    "compactness",
    "utt_score",
    "planted_quality",
    "speech_fraction",
)
META_KEY = "_meta"


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    group_id: str
    channel_id: str = ""
    speaker_id: str = ""
    text: str = ""
    audio_path: str = ""
    start_s: float = 0.0
    end_s: float = 0.0
    ctc_score: float | None = None
    compactness: float | None = None
    acoustic_scores: Mapping[str, float] | None = None
    utt_score: float | None = None
    planted_quality: float | None = None
    speech_fraction: float | None = None
    feature_path: str | None = None
    selected: frozenset[str] = frozenset()
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def replace(self, **changes: Any) -> "UtteranceRecord":
        return dataclasses.replace(self, **changes)

    def with_tag(self, tag: str) -> "UtteranceRecord":
        return self.replace(selected=self.selected | {tag})

    def without_tag(self, tag: str) -> "UtteranceRecord":
        return self.replace(selected=self.selected - {tag})


def validate_record(rec: UtteranceRecord) -> None:
    """Raise ``ManifestError`` if ``rec`` violates a record invariant."""
    rid = rec.utterance_id
    if not isinstance(rid, str) or not rid:
        raise ManifestError("record has empty utterance_id")
    if not rec.group_id:
        raise ManifestError(f"{rid}: empty group_id")
    for name in ("start_s", "end_s"):
        value = getattr(rec, name)
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ManifestError(f"{rid}: {name} must be a finite number")
    if rec.start_s < 0:
        raise ManifestError(f"{rid}: start_s must be >= 0, got {rec.start_s}")
    if not rec.end_s > rec.start_s:
        raise ManifestError(f"{rid}: end_s ({rec.end_s}) must exceed start_s ({rec.start_s})")
    if rec.ctc_score is not None:
        if math.isnan(rec.ctc_score) or rec.ctc_score > 0:
            raise ManifestError(f"{rid}: ctc_score must be <= 0, got {rec.ctc_score}")
    if rec.compactness is not None:
        if not math.isfinite(rec.compactness) or rec.compactness < 0:
            raise ManifestError(f"{rid}: compactness must be finite and >= 0")
    if rec.acoustic_scores is not None:
        for name, value in rec.acoustic_scores.items():
            if not isinstance(value, (int, float)) or not 1.0 <= value <= 5.0:
                raise ManifestError(f"{rid}: acoustic score {name!r}={value} outside [1, 5]")
    for name in ("utt_score", "planted_quality", "speech_fraction"):
        value = getattr(rec, name)
        if value is not None and not math.isfinite(value):
            raise ManifestError(f"{rid}: {name} must be finite")
    if rec.planted_quality is not None and not 0.0 <= rec.planted_quality <= 1.0:
        raise ManifestError(f"{rid}: planted_quality outside [0, 1]")
    if rec.speech_fraction is not None and not 0.0 <= rec.speech_fraction <= 1.0:
        raise ManifestError(f"{rid}: speech_fraction outside [0, 1]")
    if rec.speaker_id and not rec.channel_id:
        raise ManifestError(f"{rid}: speaker_id set but channel_id empty")


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple[UtteranceRecord, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        seen: set[str] = set()
        for rec in self.records:
            validate_record(rec)
            if rec.utterance_id in seen:
                raise ManifestError(f"duplicate utterance_id {rec.utterance_id!r}")
            seen.add(rec.utterance_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def stages(self) -> list[dict]:
        return list(self.metadata.get("stages", []))

    def with_records(self, records: Iterable[UtteranceRecord]) -> "CorpusManifest":
        return CorpusManifest(tuple(records), self.metadata)

    def with_stage(self, stage: str, **info: Any) -> "CorpusManifest":
        """Return a copy whose stage history has one more entry appended."""
        meta = dict(self.metadata)
        meta["stages"] = self.stages + [{"stage": stage, **info}]
        return CorpusManifest(self.records, meta)

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.utterance_id: r for r in self.records}

    def groups(self) -> dict[str, list[UtteranceRecord]]:
        out: dict[str, list[UtteranceRecord]] = {}
        for rec in self.records:
            out.setdefault(rec.group_id, []).append(rec)
        return out

    def speakers(self) -> dict[str, list[UtteranceRecord]]:
        out: dict[str, list[UtteranceRecord]] = {}
        for rec in self.records:
            if rec.speaker_id:
                out.setdefault(rec.speaker_id, []).append(rec)
        return out

    def tagged(self, tag: str) -> list[UtteranceRecord]:
        return [r for r in self.records if tag in r.selected]


# ---------------------------------------------------------------------------
# manifest serialization


def _round9(x: float) -> float | str:
    if math.isinf(x):
        return "-inf" if x < 0 else "inf"
    return float(f"{x:.9g}")


def _canonical_value(value: Any) -> Any:
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, (float, np.floating)):
        return _round9(float(value))
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, Mapping):
        return {str(k): _canonical_value(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical_value(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(_canonical_value(v) for v in value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def record_to_dict(rec: UtteranceRecord) -> dict[str, Any]:
    out: dict[str, Any] = dict(rec.extras)
    for name in REQUIRED_FIELDS:
        out[name] = getattr(rec, name)
    for name in OPTIONAL_FLOAT_FIELDS:
        value = getattr(rec, name)
        if value is not None:
            out[name] = value
    if rec.acoustic_scores is not None:
        out["acoustic_scores"] = dict(rec.acoustic_scores)
    if rec.feature_path is not None:
        out["feature_path"] = rec.feature_path
    out["selected"] = sorted(rec.selected)
    return _canonical_value(out)


def _as_float(obj: dict, name: str) -> float | None:
    value = obj.get(name)
    if value is None:
        return None
    if isinstance(value, str):
        if value in ("-inf", "inf"):
            return float(value)
        raise ManifestError(f"{name}: expected a number, got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ManifestError(f"{name}: expected a number, got {value!r}")
    return float(value)


def record_from_dict(obj: Mapping[str, Any]) -> UtteranceRecord:
    if not isinstance(obj, Mapping):
        raise ManifestError("record must be a JSON object")
    missing = [k for k in ("utterance_id", "group_id", "start_s", "end_s") if k not in obj]
    if missing:
        raise ManifestError(f"missing required field(s): {', '.join(missing)}")
    obj = dict(obj)
    kwargs: dict[str, Any] = {}
    for name in ("utterance_id", "group_id", "channel_id", "speaker_id", "text", "audio_path"):
        value = obj.pop(name, "")
        if not isinstance(value, str):
            raise ManifestError(f"{name}: expected a string, got {value!r}")
        kwargs[name] = value
    for name in ("start_s", "end_s") + OPTIONAL_FLOAT_FIELDS:
        kwargs[name] = _as_float(obj, name)
        obj.pop(name, None)
    acoustic = obj.pop("acoustic_scores", None)
    if acoustic is not None:
        if not isinstance(acoustic, Mapping):
            raise ManifestError("acoustic_scores must be an object")
        kwargs["acoustic_scores"] = {str(k): _as_float(acoustic, k) for k in acoustic}
    feature_path = obj.pop("feature_path", None)
    if feature_path is not None and not isinstance(feature_path, str):
        raise ManifestError("feature_path must be a string")
    kwargs["feature_path"] = feature_path
    selected = obj.pop("selected", [])
    if not isinstance(selected, list) or not all(isinstance(t, str) for t in selected):
        raise ManifestError("selected must be a list of strings")
    kwargs["selected"] = frozenset(selected)
    kwargs["extras"] = obj
    rec = UtteranceRecord(**kwargs)
    validate_record(rec)
    return rec


def dumps_record(rec: UtteranceRecord) -> str:
    return json.dumps(record_to_dict(rec), sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def manifest_to_text(manifest: CorpusManifest) -> str:
    lines = []
    if manifest.metadata:
        meta = _canonical_value(dict(manifest.metadata))
        lines.append(json.dumps({META_KEY: meta}, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
    lines.extend(dumps_record(r) for r in manifest.records)
    return "".join(line + "\n" for line in lines)


def manifest_from_text(text: str, source: str = "<string>") -> CorpusManifest:
    records: list[UtteranceRecord] = []
    metadata: dict[str, Any] = {}
    ids: dict[str, int] = {}
    # split on newline only: str.splitlines would also break on U+0085 or
    # U+2028, which may appear unescaped inside JSON strings
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{source}:{lineno}: malformed JSON ({exc.msg})") from None
        if isinstance(obj, dict) and set(obj) == {META_KEY}:
            if records or metadata:
                raise ManifestError(f"{source}:{lineno}: metadata line must come first")
            metadata = obj[META_KEY]
            continue
        try:
            rec = record_from_dict(obj)
        except ManifestError as exc:
            rid = obj.get("utterance_id", "?") if isinstance(obj, dict) else "?"
            raise ManifestError(f"{source}:{lineno}: record {rid!r}: {exc}") from None
        if rec.utterance_id in ids:
            raise ManifestError(
                f"{source}:{lineno}: duplicate utterance_id {rec.utterance_id!r} "
                f"(first seen on line {ids[rec.utterance_id]})"
            )
        ids[rec.utterance_id] = lineno
        records.append(rec)
    return CorpusManifest(tuple(records), metadata)


def read_manifest(path: str | os.PathLike) -> CorpusManifest:
    path = Path(path)
    return manifest_from_text(path.read_text(encoding="utf-8"), source=str(path))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def write_manifest(manifest: CorpusManifest, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, manifest_to_text(manifest).encode("utf-8"))


# ---------------------------------------------------------------------------
# matrix files

MAGIC = b"MTX1"
_HEADER = struct.Struct("<4sIIB")
DTYPE_FLOAT32 = 0


def matrix_to_bytes(matrix: np.ndarray) -> bytes:
    arr = np.asarray(matrix)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise MatrixFormatError(f"expected a 2-D matrix, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise MatrixFormatError("matrix contains non-finite values")
    rows, cols = arr.shape
    return _HEADER.pack(MAGIC, rows, cols, DTYPE_FLOAT32) + arr.tobytes(order="C")


def matrix_from_bytes(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"{source}: truncated header")
    magic, rows, cols, dtype = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise MatrixFormatError(f"{source}: bad magic {magic!r}")
    if dtype != DTYPE_FLOAT32:
        raise MatrixFormatError(f"{source}: unsupported dtype code {dtype}")
    payload = data[_HEADER.size:]
    if len(payload) != rows * cols * 4:
        raise MatrixFormatError(
            f"{source}: header says {rows}x{cols} ({rows * cols * 4} bytes), payload has {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise MatrixFormatError(f"{source}: non-finite values in payload")
    return arr


def write_matrix(matrix: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, matrix_to_bytes(matrix))


def read_matrix(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return matrix_from_bytes(path.read_bytes(), source=str(path))


def read_id_list(path: str | os.PathLike) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def write_id_list(ids: Iterable[str], path: str | os.PathLike) -> None:
    atomic_write_bytes(path, "".join(f"{i}\n" for i in ids).encode("utf-8"))
