"""Resumable end-to-end runs in a run directory.

Layout::

    <run_dir>/config.json            effective configuration
    <run_dir>/state.json             per-stage input hash, output hashes, revision
    <run_dir>/.lock                  held while a process works on the run
    <run_dir>/stages/<stage>/...     current stage artifacts
    <run_dir>/history/<stage>/rNNN/  earlier revisions, kept when a stage reruns
    <run_dir>/report/                text report and TSV tables

A stage is skipped when its recorded input hash matches (configuration
values it reads plus the digests of its upstream artifacts) and its outputs
are intact. Stage artifacts are never modified in place: a rerun moves the
previous outputs to ``history/`` first.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from filelock import FileLock, Timeout

from . import METHODS
from .ctc_align import PosteriorGrid, ScoreParams, TokenSeq, align, filter_by_ctc, read_posteriors, score_given_timings
from .errors import DarkselectError, MissingArtifactError, UnemittableError, ValidationError
from .manifest import (
    CorpusManifest,
    atomic_write_bytes,
    read_id_list,
    read_manifest,
    read_matrix,
    write_id_list,
    write_manifest,
    write_matrix,
)
from .metrics import (
    REFERENCE_SCORES,
    SELECTED_MANIFEST,
    SPEAKER_IDS,
    SPEAKER_VECTORS,
    eval_scores_path,
    report,
    speaker_mean_vectors,
)
from .regression import RegressorModel, load_pooled_features, predict_utterance_scores, train_regressor
from .scoring import SpeakerScoreTable, read_score_table, run_scorer, write_score_table
from .selection import SelectionConfig, acoustic_budget, select
from .speaker_screen import (
    EmbeddingSet,
    annotate_compactness,
    annotate_speech_fraction,
    drop_nonspeech_and_short,
    filter_groups_by_compactness,
    group_compactness,
    group_to_speakers,
)
from .text_screen import Vocabulary, detect_auto_subtitles, doc_from_records, normalize_text, read_vtt

log = logging.getLogger(__name__)

STAGES = (
    "screen_text",
    "ctc",
    "screen_speaker",
    "initial",
    "speaker_scores",
    "regressor",
    "utt_scores",
    "select",
    "final",
    "metrics",
)
PATH_FIELDS = (
    "manifest",
    "reference_manifest",
    "vocab",
    "posterior_dir",
    "embedding_dir",
    "feature_dir",
    "subtitle_dir",
    "audio_dir",
)


@dataclass
class RunConfig(SelectionConfig):
    """Selection settings plus corpus locations and pre-screening knobs."""

    scorer_command: str = "{python} -m darkselect.mock_scorer --seed {seed}"
    manifest: str = "manifest.jsonl"
    reference_manifest: str | None = None
    vocab: str = "vocab.txt"
    posterior_dir: str = "posteriors"
    embedding_dir: str = "embeddings"
    feature_dir: str = "features"
    subtitle_dir: str | None = None
    audio_dir: str = "."
    ctc_mode: str = "align"
    L: int = 30
    normalizer: str = "identity"
    auto_subtitle_threshold: float = 0.5
    min_speech_fraction: float = 0.5
    min_group_utts: int = 5
    reducer: str = "pca"
    reduced_dim: int = 2
    sentence_set: str = "common-100"
    scorer_timeout: float | None = None
    stages: list[str] = field(default_factory=lambda: list(STAGES))
    run_dir: str = "run"
    workers: int = 4

    def validate(self) -> None:
        super().validate()
        if self.ctc_mode not in ("align", "timings"):
            raise ValidationError(f"ctc_mode must be 'align' or 'timings', got {self.ctc_mode!r}")
        if self.L < 1:
            raise ValidationError("L must be >= 1")
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValidationError(f"unknown stage {unknown[0]!r}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    @classmethod
    def from_dict(cls, obj: dict[str, Any], base_dir: str | Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ValidationError(f"unknown config key {unknown[0]!r}")
        cfg = cls(**obj)
        if base_dir is not None:
            cfg.resolve_paths(base_dir)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj, path.parent)

    def resolve_paths(self, base_dir: str | Path) -> None:
        """Make relative corpus paths relative to ``base_dir``."""
        base = Path(base_dir)
        for name in PATH_FIELDS:
            value = getattr(self, name)
            if value is not None and not os.path.isabs(value):
                setattr(self, name, str((base / value).resolve()))

    def effective_workers(self) -> int:
        cap = os.environ.get("DARKSELECT_WORKERS")
        if cap:
            try:
                return max(1, min(self.workers, int(cap)))
            except ValueError:
                raise ValidationError(f"DARKSELECT_WORKERS={cap!r} is not an integer") from None
        return self.workers

    def scorer(self) -> str:
        return self.scorer_command.replace("{seed}", str(self.seed))

    def methods(self) -> list[str]:
        wanted = set(self.compare_methods) | {self.method}
        return [m for m in METHODS if m in wanted]


# ---------------------------------------------------------------------------
# hashing


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digest_path(path: str | Path | None) -> str | None:
    """Content digest of a file, or of every file below a directory."""
    if path is None:
        return None
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(f"{f.relative_to(p).as_posix()}\0{sha256_file(f)}\n".encode("utf-8"))
        return h.hexdigest()
    return "absent"


def _json_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# stage definitions


@dataclass(frozen=True)
class Stage:
    name: str
    deps: tuple[str, ...]
    config_keys: tuple[str, ...]
    path_keys: tuple[str, ...]
    run: Callable[["RunContext", Path], None]


class RunContext:
    """State shared by the stages of one invocation."""

    def __init__(self, config: RunConfig, force: bool | Iterable[str] = False):
        config.validate()
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.force = set(STAGES) if force is True else set(force or ())
        self.workers = config.effective_workers()
        self._digests: dict[str, str | None] = {}
        self.executed: list[str] = []

    # paths -------------------------------------------------------------
    def stage_dir(self, name: str) -> Path:
        return self.run_dir / "stages" / name

    def artifact(self, stage: str, filename: str) -> Path:
        path = self.stage_dir(stage) / filename
        if not path.is_file():
            raise MissingArtifactError(f"stage {stage!r} artifact {path.relative_to(self.run_dir)} is missing")
        return path

    def manifest_of(self, stage: str, filename: str = "manifest.jsonl") -> CorpusManifest:
        return read_manifest(self.artifact(stage, filename))

    def external(self, key: str) -> Path:
        value = getattr(self.config, key)
        if value is None:
            raise ValidationError(f"config key {key!r} is not set")
        p = Path(value)
        if not p.exists():
            raise MissingArtifactError(f"{key}: {p} does not exist")
        return p

    def digest(self, key: str) -> str | None:
        if key not in self._digests:
            self._digests[key] = digest_path(getattr(self.config, key))
        return self._digests[key]

    # state ---------------------------------------------------------------
    def load_state(self) -> dict:
        path = self.run_dir / "state.json"
        if not path.is_file():
            return {"stages": {}}
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ValidationError(f"{path}: corrupt state file ({exc})") from None

    def save_state(self, state: dict) -> None:
        atomic_write_bytes(self.run_dir / "state.json", (json.dumps(state, indent=1, sort_keys=True) + "\n").encode("utf-8"))

    def input_hash(self, stage: Stage, state: dict) -> str:
        cfg = self.config
        upstream = {}
        for dep in stage.deps:
            entry = state["stages"].get(dep)
            if entry is None:
                raise MissingArtifactError(f"stage {stage.name!r} needs stage {dep!r}, which has not run")
            upstream[dep] = entry["outputs"]
        return _json_hash({
            "stage": stage.name,
            "config": {k: getattr(cfg, k) for k in stage.config_keys},
            "paths": {k: self.digest(k) for k in stage.path_keys},
            "upstream": upstream,
        })

    def outputs_intact(self, entry: dict, name: str) -> bool:
        d = self.stage_dir(name)
        for rel, digest in entry.get("outputs", {}).items():
            p = d / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True


def _outputs(d: Path) -> dict[str, str]:
    return {f.relative_to(d).as_posix(): sha256_file(f) for f in sorted(d.rglob("*")) if f.is_file()}


def _map(ctx: RunContext, fn: Callable, items: list) -> list:
    if ctx.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=ctx.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _write_json(path: Path, obj: Any) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


# --- screen_text -------------------------------------------------------------


def _run_screen_text(ctx: RunContext, out: Path) -> None:
    cfg = ctx.config
    manifest = read_manifest(ctx.external("manifest"))
    sub_dir = Path(cfg.subtitle_dir) if cfg.subtitle_dir else None
    rows = ["group_id\tstatus\tmean_distance\tn_pairs"]
    keep = set()
    for gid, recs in sorted(manifest.groups().items()):
        vtt = sub_dir / f"{gid}.vtt" if sub_dir else None
        doc = read_vtt(vtt, gid) if vtt is not None and vtt.is_file() else doc_from_records(gid, recs)
        verdict = detect_auto_subtitles(doc, cfg.auto_subtitle_threshold)
        mean = "-" if verdict.mean_distance is None else f"{verdict.mean_distance:.6f}"
        rows.append(f"{gid}\t{verdict.status}\t{mean}\t{verdict.n_pairs}")
        if verdict.is_auto is not True:
            keep.add(gid)
    kept = [r.replace(text=normalize_text(r.text, cfg.normalizer)) for r in manifest if r.group_id in keep]
    result = manifest.with_records(kept).with_stage(
        "screen_text", threshold=cfg.auto_subtitle_threshold, normalizer=cfg.normalizer, n_in=len(manifest), n_out=len(kept)
    )
    write_manifest(result, out / "manifest.jsonl")
    atomic_write_bytes(out / "subtitle_verdicts.tsv", ("\n".join(rows) + "\n").encode("utf-8"))


# --- ctc -----------------------------------------------------------------------


def align_group(grid: PosteriorGrid, records: list, vocab: Vocabulary, params: ScoreParams) -> list:
    """Align all utterances of one recording; returns updated records."""
    tokens = [vocab.encode(r.text) for r in records]
    present = [i for i, t in enumerate(tokens) if t]
    out = [r.replace(ctc_score=-math.inf) for r in records]
    if not present:
        return out
    try:
        aligned = align(grid, TokenSeq.from_utterances([tokens[i] for i in present]), params)
    except UnemittableError:
        return out
    fd = grid.frame_duration_s
    for i, a in zip(present, aligned):
        out[i] = records[i].replace(
            start_s=float(f"{a.start_s(fd):.9g}"),
            end_s=float(f"{a.end_s(fd):.9g}"),
            ctc_score=min(a.confidence, 0.0),
        )
    return out


def _score_group(grid: PosteriorGrid, records: list, vocab: Vocabulary, params: ScoreParams) -> list:
    out = []
    for r in records:
        score = score_given_timings(grid, vocab.encode(r.text), r.start_s, r.end_s, params)
        out.append(r.replace(ctc_score=min(score, 0.0)))
    return out


def _run_ctc(ctx: RunContext, out: Path) -> None:
    cfg = ctx.config
    manifest = ctx.manifest_of("screen_text")
    vocab = Vocabulary.read(ctx.external("vocab"))
    post_dir = ctx.external("posterior_dir")
    params = ScoreParams(cfg.L, cfg.theta)
    groups = sorted(manifest.groups().items())
    fn = align_group if cfg.ctc_mode == "align" else _score_group

    def one(item):
        gid, recs = item
        path = post_dir / f"{gid}.mtx"
        if not path.is_file():
            raise MissingArtifactError(f"posteriors for group {gid!r} not found at {path}")
        return fn(read_posteriors(path), recs, vocab, params)

    updated = {r.utterance_id: r for recs in _map(ctx, one, groups) for r in recs}
    scored = manifest.with_records(updated[r.utterance_id] for r in manifest).with_stage(f"ctc:{cfg.ctc_mode}", L=cfg.L)
    write_manifest(scored, out / "scored.jsonl")
    write_manifest(filter_by_ctc(scored, cfg.theta), out / "manifest.jsonl")


# --- screen_speaker ------------------------------------------------------------


def load_group_embeddings(emb_dir: Path, manifest: CorpusManifest) -> EmbeddingSet:
    ids, rows = [], []
    for gid, recs in sorted(manifest.groups().items()):
        mpath, ipath = emb_dir / f"{gid}.mtx", emb_dir / f"{gid}.ids"
        if not mpath.is_file() or not ipath.is_file():
            raise MissingArtifactError(f"embeddings for group {gid!r} not found under {emb_dir}")
        mat = read_matrix(mpath).astype(np.float64)
        gids = read_id_list(ipath)
        if len(gids) != mat.shape[0]:
            raise ValidationError(f"{ipath}: {len(gids)} ids for {mat.shape[0]} rows")
        pos = {u: i for i, u in enumerate(gids)}
        for r in recs:
            if r.utterance_id not in pos:
                raise ValidationError(f"{r.utterance_id}: no embedding in {mpath.name}")
            ids.append(r.utterance_id)
            rows.append(mat[pos[r.utterance_id]])
    dim = rows[0].size if rows else 1
    return EmbeddingSet(tuple(ids), np.vstack(rows) if rows else np.zeros((0, dim)))


def _run_screen_speaker(ctx: RunContext, out: Path) -> None:
    cfg = ctx.config
    manifest = ctx.manifest_of("ctc")
    if any(r.speech_fraction is None for r in manifest):
        manifest = annotate_speech_fraction(manifest, cfg.audio_dir)
    manifest = drop_nonspeech_and_short(manifest, cfg.min_speech_fraction, cfg.min_group_utts)
    emb = load_group_embeddings(ctx.external("embedding_dir"), manifest)
    results = group_compactness(manifest, emb, cfg.reducer, cfg.reduced_dim)
    rows = ["group_id\tn_utts\tcompactness\treducer"]
    rows += [f"{g}\t{r.n_utts}\t{r.score:.9g}\t{r.reducer_id}" for g, r in sorted(results.items())]
    atomic_write_bytes(out / "compactness.tsv", ("\n".join(rows) + "\n").encode("utf-8"))
    manifest = filter_groups_by_compactness(annotate_compactness(manifest, results), cfg.compact_lo, cfg.compact_hi)
    write_manifest(group_to_speakers(manifest), out / "manifest.jsonl")


# --- evaluation-in-the-loop ----------------------------------------------------


def _run_initial(ctx: RunContext, out: Path) -> None:
    manifest = ctx.manifest_of("screen_speaker")
    initial = select(manifest, SelectionConfig(method="unselected"))
    write_manifest(initial, out / "manifest.jsonl")


def _score(ctx: RunContext, manifest: CorpusManifest, tag: str | None) -> SpeakerScoreTable:
    cfg = ctx.config
    return run_scorer(cfg.scorer(), manifest, cfg.sentence_set, training_tag=tag, timeout=cfg.scorer_timeout)


def _run_speaker_scores(ctx: RunContext, out: Path) -> None:
    table = _score(ctx, ctx.manifest_of("initial"), "unselected")
    write_score_table(table, out / "speaker_scores.tsv")


def _features(ctx: RunContext, manifest: CorpusManifest) -> dict[str, np.ndarray]:
    cfg = ctx.config
    root = cfg.feature_dir if cfg.feature_source == "matrix" else cfg.audio_dir
    return load_pooled_features(manifest, cfg.feature_source, root, ctx.workers)


def _run_regressor(ctx: RunContext, out: Path) -> None:
    manifest = ctx.manifest_of("initial")
    scores = read_score_table(ctx.artifact("speaker_scores", "speaker_scores.tsv"))
    model = train_regressor(_features(ctx, manifest), manifest, scores.scores, ctx.config.ridge_lambda)
    atomic_write_bytes(out / "model.json", (model.to_json() + "\n").encode("utf-8"))


def _run_utt_scores(ctx: RunContext, out: Path) -> None:
    manifest = ctx.manifest_of("initial")
    model = RegressorModel.from_json(ctx.artifact("regressor", "model.json").read_text(encoding="utf-8"))
    write_manifest(predict_utterance_scores(model, manifest, _features(ctx, manifest)), out / "manifest.jsonl")


def _select_all(cfg: RunConfig, manifest: CorpusManifest, scores: SpeakerScoreTable, budget: int) -> CorpusManifest:
    for method in cfg.methods():
        sub = SelectionConfig(**{**_selection_fields(cfg), "method": method})
        manifest = select(manifest, sub, speaker_scores=scores.scores, target_size=budget)
    return manifest


def _selection_fields(cfg: RunConfig) -> dict[str, Any]:
    names = {f.name for f in fields(SelectionConfig)}
    return {k: v for k, v in asdict(cfg).items() if k in names}


def _run_select(ctx: RunContext, out: Path) -> None:
    cfg = ctx.config
    manifest = ctx.manifest_of("utt_scores")
    scores = read_score_table(ctx.artifact("speaker_scores", "speaker_scores.tsv"))
    if cfg.target_size is not None:
        budget = cfg.target_size
    else:
        budget = acoustic_budget(manifest, cfg.acoustic_threshold)
        if budget < 1:
            raise ValidationError("acoustic-quality selects nothing, so it cannot set the budget; give target_size")
    history = [{"iteration": 1, "n_speakers_scored": len(scores)}]
    selected = _select_all(cfg, manifest, scores, budget)
    features = None
    for it in range(2, cfg.iterations + 1):
        # retrain on all pre-screened data against scores of the current selection
        scores = _score(ctx, selected, cfg.method)
        write_score_table(scores, out / f"speaker_scores_it{it}.tsv")
        features = features if features is not None else _features(ctx, selected)
        model = train_regressor(features, selected, scores.scores, cfg.ridge_lambda)
        rescored = predict_utterance_scores(model, selected, features)
        selected = _select_all(cfg, rescored, scores, budget)
        history.append({"iteration": it, "n_speakers_scored": len(scores)})
    write_manifest(selected, out / "selected.jsonl")
    summary = {
        "budget": budget,
        "budget_source": "target_size" if cfg.target_size is not None else "acoustic-quality",
        "iterations": history,
        "sizes": {m: len(selected.tagged(m)) for m in cfg.methods()},
    }
    _write_json(out / "selection.json", summary)


def _run_final(ctx: RunContext, out: Path) -> None:
    cfg = ctx.config
    selected = ctx.manifest_of("select", "selected.jsonl")
    final = selected.with_records(selected.tagged(cfg.method)).with_stage("final", method=cfg.method)
    write_manifest(final, out / "final.jsonl")
    for method in cfg.methods():
        write_score_table(_score(ctx, selected, method), out / Path(eval_scores_path(method)).name)


def _run_metrics(ctx: RunContext, out: Path) -> None:
    reference = read_manifest(ctx.external("reference_manifest"))
    write_score_table(_score(ctx, reference, None), out / Path(REFERENCE_SCORES).name)
    selected = ctx.manifest_of("select", Path(SELECTED_MANIFEST).name)
    emb = load_group_embeddings(ctx.external("embedding_dir"), selected)
    spk_ids, vecs = speaker_mean_vectors(emb.ids, emb.vectors, selected)
    write_matrix(vecs, out / Path(SPEAKER_VECTORS).name)
    write_id_list(spk_ids, out / Path(SPEAKER_IDS).name)


_SEL = ("acoustic_threshold", "target_size", "method", "compare_methods", "iterations", "ridge_lambda", "feature_source")
_SCORER = ("scorer_command", "seed", "sentence_set")

STAGE_TABLE: dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("screen_text", (), ("normalizer", "auto_subtitle_threshold"), ("manifest", "subtitle_dir"), _run_screen_text),
        Stage("ctc", ("screen_text",), ("ctc_mode", "theta", "L"), ("vocab", "posterior_dir"), _run_ctc),
        Stage(
            "screen_speaker",
            ("ctc",),
            ("min_speech_fraction", "min_group_utts", "reducer", "reduced_dim", "compact_lo", "compact_hi"),
            ("embedding_dir",),
            _run_screen_speaker,
        ),
        Stage("initial", ("screen_speaker",), (), (), _run_initial),
        Stage("speaker_scores", ("initial",), _SCORER, (), _run_speaker_scores),
        Stage("regressor", ("initial", "speaker_scores"), ("ridge_lambda", "feature_source"), ("feature_dir",), _run_regressor),
        Stage("utt_scores", ("initial", "regressor"), ("feature_source",), ("feature_dir",), _run_utt_scores),
        Stage("select", ("utt_scores", "speaker_scores"), _SEL + _SCORER, ("feature_dir",), _run_select),
        Stage("final", ("select",), ("method", "compare_methods") + _SCORER, (), _run_final),
        Stage("metrics", ("select", "final"), _SCORER + ("compare_methods", "method"), ("reference_manifest", "embedding_dir"), _run_metrics),
    )
}


# ---------------------------------------------------------------------------
# driver


def _archive(ctx: RunContext, name: str, revision: int) -> None:
    d = ctx.stage_dir(name)
    if d.exists():
        dest = ctx.run_dir / "history" / name / f"r{revision:03d}"
        dest.parent.mkdir(parents=True, exist_ok=True)
        if dest.exists():
            shutil.rmtree(dest)
        d.rename(dest)


def run_stage(ctx: RunContext, name: str) -> bool:
    """Run one stage unless its recorded result is current. Returns True if
    the stage executed."""
    stage = STAGE_TABLE[name]
    state = ctx.load_state()
    key = ctx.input_hash(stage, state)
    entry = state["stages"].get(name)
    if entry and name not in ctx.force and entry["input_hash"] == key and ctx.outputs_intact(entry, name):
        log.info("stage %s is up to date", name)
        return False
    tmp = ctx.run_dir / "stages" / f".{name}.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    log.info("running stage %s", name)
    try:
        stage.run(ctx, tmp)
    except DarkselectError as exc:
        exc.stage = name
        raise
    except OSError as exc:
        err = MissingArtifactError(str(exc)) if isinstance(exc, FileNotFoundError) else DarkselectError(str(exc))
        err.stage = name
        raise err from exc
    revision = entry["revision"] + 1 if entry else 1
    if entry:
        _archive(ctx, name, entry["revision"])
    tmp.rename(ctx.stage_dir(name))
    state["stages"][name] = {"input_hash": key, "outputs": _outputs(ctx.stage_dir(name)), "revision": revision}
    ctx.save_state(state)
    ctx.executed.append(name)
    return True


def _prerequisites(names: Iterable[str]) -> list[str]:
    wanted: set[str] = set()

    def visit(n: str) -> None:
        if n not in wanted:
            wanted.add(n)
            for d in STAGE_TABLE[n].deps:
                visit(d)

    for n in names:
        visit(n)
    return [s for s in STAGES if s in wanted]


def write_config_echo(ctx: RunContext) -> None:
    _write_json(ctx.run_dir / "config.json", asdict(ctx.config))


def run_pipeline(config: RunConfig, stages: Iterable[str] | None = None, force: bool | Iterable[str] = False) -> RunContext:
    """Run ``stages`` (default: ``config.stages``) and their prerequisites,
    then the report when metrics are current. Holds the run-dir lock."""
    ctx = RunContext(config, force)
    ctx.run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(ctx.run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DarkselectError(f"run directory {ctx.run_dir} is in use by another process") from None
    try:
        write_config_echo(ctx)
        order = _prerequisites(stages if stages is not None else config.stages)
        for name in order:
            run_stage(ctx, name)
        if "metrics" in order:
            try:
                report(ctx.run_dir, config.methods())
            except DarkselectError as exc:
                exc.stage = "report"
                raise
    finally:
        lock.release()
    return ctx


def loop_orchestrate(config: RunConfig, force: bool = False) -> CorpusManifest:
    """Full evaluation-in-the-loop run; returns the final manifest."""
    ctx = run_pipeline(config, STAGES, force)
    return read_manifest(ctx.stage_dir("final") / "final.jsonl")
