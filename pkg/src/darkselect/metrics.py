"""Corpus-quality analytics over selection results.

High-quality speakers are those whose pseudo-MOS is strictly above the
lowest pseudo-MOS of a studio-quality reference corpus. Diversity ``w`` is
the total edge weight of the Euclidean minimum spanning tree over the
high-quality speakers' mean embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import METHODS
from .errors import MissingArtifactError, ValidationError
from .manifest import CorpusManifest, atomic_write_bytes, read_id_list, read_manifest, read_matrix
from .scoring import SpeakerScoreTable, read_score_table

UNDEFINED = "undefined"
HISTOGRAM_GRID = tuple(round(1.0 + 0.1 * i, 1) for i in range(41))


@dataclass(frozen=True)
class DiversityResult:
    w: float
    n_speakers: int
    edges: tuple[tuple[str, str, float], ...]


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n_points: int
    status: str = "ok"

    @property
    def defined(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class HqRow:
    label: str
    hq: int
    total: int

    @property
    def ratio(self) -> float | None:
        return self.hq / self.total if self.total else None

    def cell(self) -> str:
        return format_hq_cell(self.hq, self.total)


def _scores(table: SpeakerScoreTable | Mapping[str, float]) -> Mapping[str, float]:
    return table.scores if isinstance(table, SpeakerScoreTable) else table


def hq_threshold(reference_scores: SpeakerScoreTable | Mapping[str, float]) -> float:
    scores = _scores(reference_scores)
    if not scores:
        raise ValidationError("empty reference score table")
    return min(scores.values())


def format_hq_cell(hq: int, total: int) -> str:
    """``"731 / 912 (80.2%)"``; a zero total has no ratio."""
    if total == 0:
        return f"{hq} / {total} (-)"
    return f"{hq} / {total} ({100.0 * hq / total:.1f}%)"


def count_hq(
    scores: SpeakerScoreTable | Mapping[str, float],
    threshold: float,
    seen_set: Iterable[str],
) -> tuple[HqRow, HqRow]:
    """High-quality counts (strictly above ``threshold``) among seen and
    unseen speakers."""
    values = _scores(scores)
    seen = set(seen_set)
    stray = sorted(seen - set(values))
    if stray:
        raise ValidationError(f"seen speaker {stray[0]!r} has no score")
    rows = []
    for label, members in (("seen", seen), ("unseen", set(values) - seen)):
        hq = sum(1 for spk in members if values[spk] > threshold)
        rows.append(HqRow(label, hq, len(members)))
    return rows[0], rows[1]


def cumulative_histogram(scores: Iterable[float], grid: Sequence[float]) -> list[int]:
    """Number of scores strictly above each grid value."""
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError("histogram grid must be sorted ascending")
    ordered = np.sort(np.asarray(list(scores), dtype=np.float64))
    return [int(ordered.size - np.searchsorted(ordered, g, side="right")) for g in grid]


def mst_cost(ids: Sequence[str], vectors: np.ndarray) -> DiversityResult:
    """Euclidean minimum spanning tree by Prim's algorithm.

    Points are visited in sorted-id order; among equal-weight candidate
    edges the lexicographically smallest (id, id) pair wins.
    """
    if len(ids) != len(set(ids)):
        raise ValidationError("duplicate point ids")
    x = np.asarray(vectors, dtype=np.float64)
    n = len(ids)
    if n <= 1:
        return DiversityResult(0.0, n, ())
    if x.ndim != 2 or x.shape[0] != n or not np.all(np.isfinite(x)):
        raise ValidationError(f"expected {n} finite vectors, got shape {x.shape}")
    order = sorted(range(n), key=lambda i: ids[i])
    names = [ids[i] for i in order]
    pts = x[order]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))

    def pair(a: int, b: int) -> tuple[str, str]:
        return (names[a], names[b]) if names[a] < names[b] else (names[b], names[a])

    in_tree = [False] * n
    in_tree[0] = True
    best = dist[0].tolist()
    parent = [0] * n
    edges = []
    for _ in range(n - 1):
        j = min((k for k in range(n) if not in_tree[k]), key=lambda k: (best[k], pair(parent[k], k)))
        edges.append((*pair(parent[j], j), float(dist[parent[j], j])))
        in_tree[j] = True
        for k in range(n):
            if in_tree[k]:
                continue
            d = float(dist[j, k])
            if d < best[k] or (d == best[k] and pair(j, k) < pair(parent[k], k)):
                best[k], parent[k] = d, j
    return DiversityResult(math.fsum(e[2] for e in edges), n, tuple(edges))


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    """Pearson product-moment correlation; zero variance is ``undefined``."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("pearson needs two equal-length vectors")
    if a.size < 2:
        raise ValidationError("pearson needs at least 2 points")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if sa == 0.0 or sb == 0.0:
        return CorrelationResult(math.nan, a.size, UNDEFINED)
    r = float(da @ db) / (sa * sb)
    return CorrelationResult(min(1.0, max(-1.0, r)), a.size)


def speaker_mean_vectors(ids: Sequence[str], vectors: np.ndarray, manifest: CorpusManifest) -> tuple[list[str], np.ndarray]:
    """One vector per speaker: the mean over its utterance embeddings."""
    row = {u: i for i, u in enumerate(ids)}
    speakers = sorted(manifest.speakers().items())
    out = []
    for spk, recs in speakers:
        missing = [r.utterance_id for r in recs if r.utterance_id not in row]
        if missing:
            raise ValidationError(f"{missing[0]}: no embedding")
        out.append(vectors[[row[r.utterance_id] for r in recs]].mean(axis=0))
    return [s for s, _ in speakers], np.vstack(out) if out else np.zeros((0, vectors.shape[1]))


# ---------------------------------------------------------------------------
# run-directory report

SELECTED_MANIFEST = "stages/select/selected.jsonl"
REFERENCE_SCORES = "stages/metrics/reference_scores.tsv"
SPEAKER_VECTORS = "stages/metrics/speaker_vectors.mtx"
SPEAKER_IDS = "stages/metrics/speaker_vectors.ids"


def eval_scores_path(method: str) -> str:
    return f"stages/final/eval_{method}.tsv"


def required_artifacts(methods: Sequence[str]) -> list[str]:
    return [SELECTED_MANIFEST, REFERENCE_SCORES, SPEAKER_VECTORS, SPEAKER_IDS] + [eval_scores_path(m) for m in methods]


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.6f}"


def method_metrics(
    method: str,
    manifest: CorpusManifest,
    scores: SpeakerScoreTable,
    threshold: float,
    speaker_ids: Sequence[str],
    speaker_vectors: np.ndarray,
) -> dict:
    chosen = manifest.tagged(method)
    seen = sorted({r.speaker_id for r in chosen})
    seen_row, unseen_row = count_hq(scores, threshold, seen)
    hq = sorted(s for s, v in scores.scores.items() if v > threshold)
    pos = {s: i for i, s in enumerate(speaker_ids)}
    missing = [s for s in hq if s not in pos]
    if missing:
        raise ValidationError(f"speaker {missing[0]!r} has no embedding")
    div = mst_cost(hq, speaker_vectors[[pos[s] for s in hq]] if hq else np.zeros((0, speaker_vectors.shape[1])))
    planted = {}
    for spk, recs in manifest.speakers().items():
        q = [r.planted_quality for r in recs if r.planted_quality is not None]
        if len(q) == len(recs):
            planted[spk] = sum(q) / len(q)
    corr = None
    if planted and set(planted) == set(scores.scores):
        order = sorted(planted)
        corr = pearson([scores[s] for s in order], [planted[s] for s in order])
    chosen_q = [r.planted_quality for r in chosen if r.planted_quality is not None]
    return {
        "method": method,
        "n_selected": len(chosen),
        "n_seen": len(seen),
        "seen": seen_row,
        "unseen": unseen_row,
        "n_hq": seen_row.hq + unseen_row.hq,
        "w": div.w,
        "mean_pseudo_mos": math.fsum(scores.scores.values()) / len(scores) if len(scores) else math.nan,
        "mean_planted_quality": math.fsum(chosen_q) / len(chosen_q) if chosen_q else math.nan,
        "pearson": corr,
        "histogram": cumulative_histogram(scores.scores.values(), HISTOGRAM_GRID),
        "mst_edges": div.edges,
    }


def report(run_dir: str | Path, methods: Sequence[str] = METHODS, write: bool = True) -> str:
    """Compute every metric per method from a finished run directory.

    Writes ``report/report.txt`` plus one TSV per metric and returns the
    text report. Output depends only on the artifacts, so reruns are
    byte-identical.

    Raises:
        MissingArtifactError: listing every required artifact that is absent.
    """
    run_dir = Path(run_dir)
    missing = [p for p in required_artifacts(methods) if not (run_dir / p).is_file()]
    if missing:
        raise MissingArtifactError("missing run artifacts: " + ", ".join(missing))
    manifest = read_manifest(run_dir / SELECTED_MANIFEST)
    reference = read_score_table(run_dir / REFERENCE_SCORES)
    threshold = hq_threshold(reference)
    spk_ids = read_id_list(run_dir / SPEAKER_IDS)
    spk_vecs = read_matrix(run_dir / SPEAKER_VECTORS).astype(np.float64)
    if spk_vecs.shape[0] != len(spk_ids):
        raise ValidationError(f"{SPEAKER_IDS}: {len(spk_ids)} ids for {spk_vecs.shape[0]} vectors")
    results = [
        method_metrics(m, manifest, read_score_table(run_dir / eval_scores_path(m)), threshold, spk_ids, spk_vecs)
        for m in methods
    ]

    lines = [
        "darkselect report",
        f"reference speakers: {len(reference)}",
        f"high-quality threshold (lowest reference pseudo-MOS): {threshold:.6f}",
        f"pre-screened utterances: {len(manifest)}; speakers: {len(manifest.speakers())}",
        "",
    ]
    head = ["method", "selected", "seen", "hq", "seen hq", "unseen hq", "w", "mean q", "r"]
    body = []
    for res in results:
        corr = res["pearson"]
        r_txt = "-" if corr is None else (UNDEFINED if not corr.defined else f"{corr.r:.4f}")
        body.append([
            res["method"], str(res["n_selected"]), str(res["n_seen"]), str(res["n_hq"]),
            res["seen"].cell(), res["unseen"].cell(), f"{res['w']:.4f}",
            f"{res['mean_planted_quality']:.4f}", r_txt,
        ])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    for row in [head] + body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    text = "\n".join(lines) + "\n"

    if write:
        out = run_dir / "report"
        atomic_write_bytes(out / "report.txt", text.encode("utf-8"))
        summary = ["method\tn_selected\tn_seen\tn_hq\tseen_hq\tseen_total\tunseen_hq\tunseen_total\tw\tmean_pseudo_mos\tmean_planted_quality"]
        for res in results:
            summary.append("\t".join([
                res["method"], str(res["n_selected"]), str(res["n_seen"]), str(res["n_hq"]),
                str(res["seen"].hq), str(res["seen"].total), str(res["unseen"].hq), str(res["unseen"].total),
                _fmt(res["w"]), _fmt(res["mean_pseudo_mos"]), _fmt(res["mean_planted_quality"]),
            ]))
        hist = ["threshold\t" + "\t".join(r["method"] for r in results)]
        for i, g in enumerate(HISTOGRAM_GRID):
            hist.append(f"{g:.1f}\t" + "\t".join(str(r["histogram"][i]) for r in results))
        table1 = ["method\tseen\tunseen"] + [f"{r['method']}\t{r['seen'].cell()}\t{r['unseen'].cell()}" for r in results]
        corr_rows = ["method\tr\tn_points\tstatus"]
        for r in results:
            c = r["pearson"]
            if c is not None:
                corr_rows.append(f"{r['method']}\t{_fmt(c.r)}\t{c.n_points}\t{c.status}")
        mst_rows = ["method\tspeaker_a\tspeaker_b\tdistance"]
        for r in results:
            mst_rows += [f"{r['method']}\t{a}\t{b}\t{_fmt(d)}" for a, b, d in r["mst_edges"]]
        for name, rows in (
            ("summary.tsv", summary),
            ("cumulative_histogram.tsv", hist),
            ("hq_table.tsv", table1),
            ("correlation.tsv", corr_rows),
            ("mst_edges.tsv", mst_rows),
        ):
            atomic_write_bytes(out / name, ("\n".join(rows) + "\n").encode("utf-8"))
    return text
