"""CTC-segmentation: trellis alignment, confidence scoring, cleaning, and
partitioned inference of long recordings.

Path model
----------
Each utterance occupies a contiguous frame interval that starts on a frame
emitting its first token and ends on a frame emitting its last token. Inside
the interval the labelling is an ordinary CTC path (tokens may repeat over
consecutive frames, blanks may separate tokens, and a blank is required
between two identical consecutive tokens). Frames outside every utterance
interval cost nothing, which lets the aligner skip preambles, unrelated audio
between utterances and trailing audio. The trellis state layout per utterance
is ``[wait, tok_1, blank_1, tok_2, ..., tok_n]`` followed by a final ``done``
state; ``wait`` and ``done`` emit at zero cost.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import AlignmentError, MissingArtifactError, UnemittableError, ValidationError
from .manifest import CorpusManifest, atomic_write_bytes, read_matrix, write_matrix

NEG_INF = -np.inf
MIN_OVERLAP_S = 0.6

# state kinds
_WAIT, _TOKEN, _BLANK, _DONE = 0, 1, 2, 3
# backpointer codes: how the state was entered at frame t
_STAY, _ADV1, _ADV2 = 0, 1, 2


@dataclass(frozen=True)
class PosteriorGrid:
    """T x V per-frame log-posteriors plus timing information."""

    logits: np.ndarray
    blank_index: int = 0
    frame_duration_s: float = 0.01
    samples_per_frame: int = 160

    def __post_init__(self) -> None:
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 2:
            raise ValidationError(f"posteriors must be 2-D, got shape {logits.shape}")
        object.__setattr__(self, "logits", logits)
        if logits.shape[1] < 2:
            raise ValidationError("vocabulary must contain at least 2 symbols")
        if not 0 <= self.blank_index < logits.shape[1]:
            raise ValidationError(f"blank_index {self.blank_index} out of range")
        if not self.frame_duration_s > 0:
            raise ValidationError("frame_duration_s must be positive")
        if int(self.samples_per_frame) != self.samples_per_frame or self.samples_per_frame < 1:
            raise ValidationError("samples_per_frame must be a positive integer")

    @property
    def n_frames(self) -> int:
        return self.logits.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.logits.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_frames * self.frame_duration_s

    def check_normalized(self, tol: float = 1e-3) -> None:
        """Raise if some row does not exponentiate to a distribution."""
        if self.n_frames < 1:
            raise ValidationError("posterior grid has no frames")
        sums = np.exp(self.logits).sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
        if bad.size:
            raise ValidationError(f"row {bad[0]} sums to {sums[bad[0]]:.6f} after exponentiation")

    def frames(self, start: int, stop: int) -> "PosteriorGrid":
        return PosteriorGrid(self.logits[start:stop], self.blank_index, self.frame_duration_s, self.samples_per_frame)


@dataclass(frozen=True)
class TokenSeq:
    """Token indices for one or more utterances.

    ``utterance_breaks`` holds the start index of every utterance in
    ``tokens``; the first break is always 0.
    """

    tokens: tuple[int, ...]
    utterance_breaks: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "utterance_breaks", tuple(int(b) for b in self.utterance_breaks))
        b = self.utterance_breaks
        if not b or b[0] != 0:
            raise ValidationError("utterance_breaks must start with 0")
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValidationError("utterance_breaks must be strictly increasing")
        if b[-1] >= len(self.tokens):
            raise ValidationError("every utterance needs at least one token")

    @classmethod
    def from_utterances(cls, utterances: Sequence[Sequence[int]]) -> "TokenSeq":
        tokens: list[int] = []
        breaks: list[int] = []
        for utt in utterances:
            breaks.append(len(tokens))
            tokens.extend(utt)
        return cls(tuple(tokens), tuple(breaks))

    @property
    def n_utterances(self) -> int:
        return len(self.utterance_breaks)

    def utterances(self) -> list[tuple[int, ...]]:
        ends = self.utterance_breaks[1:] + (len(self.tokens),)
        return [self.tokens[a:b] for a, b in zip(self.utterance_breaks, ends)]

    def check_against(self, grid: PosteriorGrid) -> None:
        for tok in self.tokens:
            if tok == grid.blank_index:
                raise ValidationError("token sequence contains the blank symbol")
            if not 0 <= tok < grid.n_symbols:
                raise ValidationError(f"token {tok} outside vocabulary of size {grid.n_symbols}")

    def min_frames(self) -> int:
        """Fewest frames able to emit every utterance."""
        total = 0
        for utt in self.utterances():
            total += len(utt) + sum(1 for a, b in zip(utt, utt[1:]) if a == b)
        return total


@dataclass(frozen=True)
class ScoreParams:
    L: int = 30
    theta: float = -0.3

    def __post_init__(self) -> None:
        if int(self.L) != self.L or self.L < 1:
            raise ValidationError("window length L must be a positive integer")


@dataclass(frozen=True)
class AlignedUtterance:
    utterance_index: int
    onset_frame: int
    offset_frame: int
    path_logprobs: np.ndarray
    confidence: float

    def start_s(self, frame_duration_s: float) -> float:
        return self.onset_frame * frame_duration_s

    def end_s(self, frame_duration_s: float) -> float:
        return (self.offset_frame + 1) * frame_duration_s


@dataclass
class Trellis:
    """Forward table over (frame, state) with entry backpointers."""

    values: np.ndarray  # T x S best log-probabilities
    backptr: np.ndarray  # T x S, one of _STAY/_ADV1/_ADV2
    emissions: np.ndarray  # T x S per-state emission log-probabilities
    kinds: np.ndarray  # S state kinds
    owner: np.ndarray  # S utterance index owning each state (-1 for done)
    last_token_state: int
    seq: TokenSeq

    @property
    def best_end_frame(self) -> int:
        col = self.values[:, self.last_token_state]
        best = col.max()
        # latest frame among ties
        return int(np.flatnonzero(col == best)[-1])

    @property
    def best_logprob(self) -> float:
        return float(self.values[:, self.last_token_state].max())


def _state_layout(seq: TokenSeq, blank: int):
    labels: list[int] = []
    kinds: list[int] = []
    owner: list[int] = []
    adv1: list[bool] = []
    adv2: list[bool] = []
    for u, utt in enumerate(seq.utterances()):
        # wait state: entered from the previous utterance's last token
        labels.append(-1)
        kinds.append(_WAIT)
        owner.append(u)
        adv1.append(u > 0)
        adv2.append(False)
        for k, tok in enumerate(utt):
            if k > 0:
                labels.append(blank)
                kinds.append(_BLANK)
                owner.append(u)
                adv1.append(True)
                adv2.append(False)
            labels.append(tok)
            kinds.append(_TOKEN)
            owner.append(u)
            adv1.append(True)
            if k == 0:
                # straight from the previous utterance's last token, no gap
                adv2.append(u > 0)
            else:
                adv2.append(utt[k - 1] != tok)
    labels.append(-1)
    kinds.append(_DONE)
    owner.append(-1)
    adv1.append(True)
    adv2.append(False)
    return (
        np.array(labels),
        np.array(kinds),
        np.array(owner),
        np.array(adv1),
        np.array(adv2),
    )


def build_trellis(grid: PosteriorGrid, seq: TokenSeq) -> Trellis:
    """Fill the max-product trellis for ``seq`` over ``grid``.

    Raises:
        UnemittableError: if no path emits ``seq`` within ``grid.n_frames``.
    """
    seq.check_against(grid)
    T = grid.n_frames
    if T < 1:
        raise UnemittableError("posterior grid has no frames")
    if seq.min_frames() > T:
        raise UnemittableError(f"sequence needs at least {seq.min_frames()} frames, grid has {T}")

    labels, kinds, owner, adv1, adv2 = _state_layout(seq, grid.blank_index)
    S = labels.size
    emitting = labels >= 0
    emissions = np.zeros((T, S))
    emissions[:, emitting] = grid.logits[:, labels[emitting]]

    values = np.empty((T, S))
    backptr = np.zeros((T, S), dtype=np.int8)
    prev = np.full(S, NEG_INF)
    prev[0] = 0.0  # virtual frame -1: waiting for the first utterance
    cand1 = np.full(S, NEG_INF)
    cand2 = np.full(S, NEG_INF)
    for t in range(T):
        best = prev.copy()
        choice = np.zeros(S, dtype=np.int8)
        cand1[1:] = prev[:-1]
        cand1[~adv1] = NEG_INF
        cand2[2:] = prev[:-2]
        cand2[~adv2] = NEG_INF
        # ties go to the later-entered state
        take = cand1 >= best
        take &= np.isfinite(cand1)
        best[take] = cand1[take]
        choice[take] = _ADV1
        take = cand2 >= best
        take &= np.isfinite(cand2)
        best[take] = cand2[take]
        choice[take] = _ADV2
        values[t] = best + emissions[t]
        backptr[t] = choice
        prev = values[t]

    last_token = S - 2
    if not np.isfinite(values[:, last_token]).any():
        raise UnemittableError("token sequence cannot be emitted within the grid")
    return Trellis(values, backptr, emissions, kinds, owner, last_token, seq)


def backtrack(trellis: Trellis, params: ScoreParams | None = None) -> list[AlignedUtterance]:
    """Recover per-utterance timings from the argmax path.

    Backtracking starts from the most probable frame of the last token of the
    last utterance (latest frame among ties).
    """
    params = params or ScoreParams()
    t = trellis.best_end_frame
    s = trellis.last_token_state
    T = trellis.values.shape[0]
    states = np.full(T, -1, dtype=np.int64)
    states[t + 1:] = s + 1  # done state
    while t >= 0:
        states[t] = s
        code = trellis.backptr[t, s]
        if code == _ADV1:
            s -= 1
        elif code == _ADV2:
            s -= 2
        t -= 1
    if s != 0:
        raise AlignmentError("backtracking did not reach the initial state")

    results = []
    frames = np.arange(T)
    kinds = trellis.kinds
    for u in range(trellis.seq.n_utterances):
        in_utt = (trellis.owner[states] == u) & (kinds[states] != _WAIT)
        idx = frames[in_utt]
        onset, offset = int(idx[0]), int(idx[-1])
        lp = trellis.emissions[frames[onset:offset + 1], states[onset:offset + 1]]
        results.append(AlignedUtterance(u, onset, offset, lp, confidence_score(lp, params)))
    return results


def align(grid: PosteriorGrid, seq: TokenSeq, params: ScoreParams | None = None) -> list[AlignedUtterance]:
    return backtrack(build_trellis(grid, seq), params)


def confidence_score(path_logprobs: Sequence[float], params: ScoreParams | None = None) -> float:
    """Lowest mean log-probability over any ``L`` consecutive frames.

    Utterances shorter than ``L`` frames use their full-length mean.
    """
    params = params or ScoreParams()
    x = np.asarray(path_logprobs, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot score an empty path")
    if np.isneginf(x).any():
        return float(NEG_INF)
    w = min(params.L, x.size)
    csum = np.concatenate(([0.0], np.cumsum(x)))
    means = (csum[w:] - csum[:-w]) / w
    score = float(means.min())
    # a window mean always lies within the value range; clamp rounding drift
    return float(min(max(score, x.min()), x.max()))


def _time_to_frames(grid: PosteriorGrid, start_s: float, end_s: float) -> tuple[int, int]:
    fd = grid.frame_duration_s
    first = int(math.floor(start_s / fd + 1e-9))
    stop = int(math.ceil(end_s / fd - 1e-9))
    return first, stop


def score_given_timings(
    grid: PosteriorGrid,
    tokens: Sequence[int],
    start_s: float,
    end_s: float,
    params: ScoreParams | None = None,
) -> float:
    """Confidence of one utterance aligned inside ``[start_s, end_s]``.

    Returns ``-inf`` when the tokens cannot be emitted inside the slice.
    """
    params = params or ScoreParams()
    if not end_s > start_s or start_s < 0:
        raise ValidationError(f"invalid timing [{start_s}, {end_s}]")
    first, stop = _time_to_frames(grid, start_s, end_s)
    if first >= grid.n_frames:
        raise ValidationError(f"timing [{start_s}, {end_s}] lies outside the {grid.duration_s:.3f}s grid")
    stop = min(stop, grid.n_frames)
    if stop <= first:
        raise ValidationError(f"timing [{start_s}, {end_s}] selects no frames")
    if not tokens:
        return float(NEG_INF)
    seq = TokenSeq(tuple(tokens))
    try:
        (aligned,) = align(grid.frames(first, stop), seq, params)
    except UnemittableError:
        return float(NEG_INF)
    return aligned.confidence


def filter_by_ctc(manifest: CorpusManifest, theta: float) -> CorpusManifest:
    """Keep records with ``ctc_score >= theta``."""
    kept = []
    for rec in manifest:
        if rec.ctc_score is None:
            raise ValidationError(f"{rec.utterance_id}: missing ctc_score")
        if rec.ctc_score >= theta:
            kept.append(rec)
    return manifest.with_records(kept).with_stage(
        "filter_by_ctc", theta=theta, n_in=len(manifest), n_out=len(kept)
    )


# ---------------------------------------------------------------------------
# long recordings


class Block(NamedTuple):
    """Core sample range ``[start, end)`` with the context padding on each side."""

    start: int
    end: int
    left_overlap: int
    right_overlap: int

    @property
    def input_start(self) -> int:
        return self.start - self.left_overlap

    @property
    def input_end(self) -> int:
        return self.end + self.right_overlap


def partition_plan(
    total_samples: int,
    samples_per_frame: int,
    max_block_frames: int,
    overlap_frames: int,
    *,
    frame_duration_s: float | None = None,
    min_overlap_s: float = MIN_OVERLAP_S,
    allow_short_overlap: bool = False,
) -> list[Block]:
    """Split a recording into inference blocks.

    All blocks but the last carry exactly ``max_block_frames`` core frames;
    the last absorbs the remainder and may be up to 25% longer than the
    others. Interior boundaries fall on multiples of ``samples_per_frame``.
    """
    if samples_per_frame < 1 or max_block_frames < 1 or overlap_frames < 0:
        raise ValidationError("block sizes must be positive")
    if max_block_frames <= 2 * overlap_frames:
        raise ValidationError("max_block_frames must exceed twice the overlap")
    if frame_duration_s is not None and not allow_short_overlap:
        if overlap_frames * frame_duration_s < min_overlap_s - 1e-9:
            raise ValidationError(
                f"overlap of {overlap_frames * frame_duration_s:.3f}s is below {min_overlap_s}s"
            )
    n_frames = total_samples // samples_per_frame
    if n_frames < 1:
        raise ValidationError("recording is shorter than one frame")

    limit = 1.25 * max_block_frames
    cores = []
    begin = 0
    while n_frames - begin > limit:
        cores.append((begin, begin + max_block_frames))
        begin += max_block_frames
    cores.append((begin, n_frames))

    ov = overlap_frames * samples_per_frame
    blocks = []
    for i, (a, b) in enumerate(cores):
        start = a * samples_per_frame
        end = total_samples if i == len(cores) - 1 else b * samples_per_frame
        left = min(ov, start) if i > 0 else 0
        right = min(ov, (n_frames - b) * samples_per_frame) if i < len(cores) - 1 else 0
        blocks.append(Block(start, end, left, right))
    return blocks


def stitch_posteriors(blocks: Sequence[tuple[PosteriorGrid, Block]]) -> PosteriorGrid:
    """Concatenate blockwise posteriors, dropping the overlap frames."""
    if not blocks:
        raise ValidationError("no blocks to stitch")
    first_grid = blocks[0][0]
    spf = first_grid.samples_per_frame
    parts = []
    expected_start = 0
    for i, (grid, block) in enumerate(blocks):
        if (grid.n_symbols, grid.blank_index, grid.frame_duration_s, spf) != (
            first_grid.n_symbols,
            first_grid.blank_index,
            first_grid.frame_duration_s,
            grid.samples_per_frame,
        ):
            raise ValidationError(f"block {i}: vocabulary or timing differs from block 0")
        if block.start != expected_start:
            raise ValidationError(f"block {i}: starts at sample {block.start}, expected {expected_start}")
        if block.left_overlap % spf or block.right_overlap % spf or block.start % spf:
            raise ValidationError(f"block {i}: boundaries are not multiples of {spf} samples")
        want = (block.input_end - block.input_start) // spf
        if grid.n_frames != want:
            raise ValidationError(f"block {i}: expected {want} frames, got {grid.n_frames}")
        lo = block.left_overlap // spf
        hi = grid.n_frames - block.right_overlap // spf
        parts.append(grid.logits[lo:hi])
        expected_start = block.end
    return PosteriorGrid(
        np.concatenate(parts, axis=0),
        first_grid.blank_index,
        first_grid.frame_duration_s,
        spf,
    )


def infer_partitioned(
    signal: np.ndarray,
    infer: Callable[[np.ndarray], PosteriorGrid],
    max_block_frames: int,
    overlap_frames: int,
    samples_per_frame: int,
    **plan_kwargs,
) -> PosteriorGrid:
    """Run ``infer`` on each block of ``signal`` and stitch the results."""
    plan = partition_plan(len(signal), samples_per_frame, max_block_frames, overlap_frames, **plan_kwargs)
    return stitch_posteriors([(infer(signal[b.input_start:b.input_end]), b) for b in plan])


def header_path(matrix_path: str | Path) -> Path:
    p = Path(matrix_path)
    return p.with_suffix(".hdr")


def write_posteriors(grid: PosteriorGrid, path: str | Path) -> None:
    """MatrixFile plus a one-line JSON header sidecar next to it."""
    write_matrix(grid.logits, path)
    head = {
        "blank_index": grid.blank_index,
        "frame_duration_s": grid.frame_duration_s,
        "samples_per_frame": grid.samples_per_frame,
    }
    atomic_write_bytes(header_path(path), (json.dumps(head, sort_keys=True) + "\n").encode("utf-8"))


def read_posteriors(path: str | Path) -> PosteriorGrid:
    hdr = header_path(path)
    if not hdr.is_file():
        raise MissingArtifactError(f"{hdr}: posterior header sidecar not found")
    try:
        head = json.loads(hdr.read_text(encoding="utf-8").splitlines()[0])
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"{hdr}: malformed header line") from exc
    return PosteriorGrid(
        read_matrix(path),
        int(head.get("blank_index", 0)),
        float(head["frame_duration_s"]),
        int(head["samples_per_frame"]),
    )
