import math

import numpy as np
import pytest

from darkselect.ctc_align import (
    Block,
    PosteriorGrid,
    ScoreParams,
    TokenSeq,
    align,
    build_trellis,
    confidence_score,
    filter_by_ctc,
    infer_partitioned,
    partition_plan,
    read_posteriors,
    score_given_timings,
    stitch_posteriors,
    write_posteriors,
)
from darkselect.errors import MissingArtifactError, UnemittableError, ValidationError
from darkselect.manifest import CorpusManifest, UtteranceRecord
from darkselect.synth import mock_posterior_inference
from oracles import brute_force_align, min_window_mean, random_log_softmax


def _peaked(labels, V, p=0.97):
    """Log-posteriors putting probability ``p`` on the given label per frame."""
    rest = (1 - p) / (V - 1)
    out = np.full((len(labels), V), math.log(rest))
    out[np.arange(len(labels)), labels] = math.log(p)
    return out


def test_certain_grid_aligns_exactly():
    # unaligned frames are free, so the tightest emitting span wins
    grid = PosteriorGrid(_peaked([1, 1, 0, 2, 2, 0], 3, p=1 - 1e-9))
    (utt,) = align(grid, TokenSeq((1, 2)))
    assert (utt.onset_frame, utt.offset_frame) == (1, 3)
    assert utt.confidence == pytest.approx(0.0, abs=1e-8)


def test_garbage_prefix_is_skipped_for_free():
    # frames 0-2 favour a token the transcript does not contain
    grid = PosteriorGrid(_peaked([3, 3, 3, 1, 2, 2], 4))
    (utt,) = align(grid, TokenSeq((1, 2)))
    assert utt.onset_frame == 3
    total, spans = brute_force_align(grid.logits, [[1, 2]])
    assert spans[0][0] == 3
    assert build_trellis(grid, TokenSeq((1, 2))).best_logprob == pytest.approx(total, abs=1e-12)


def test_two_utterances_with_silent_gap():
    labels = [1, 1, 2, 0, 0, 0, 3, 3, 1, 0]
    grid = PosteriorGrid(_peaked(labels, 4))
    utts = [[1, 2], [3, 1]]
    first, second = align(grid, TokenSeq.from_utterances(utts))
    _, spans = brute_force_align(grid.logits, utts)
    assert [(first.onset_frame, first.offset_frame), (second.onset_frame, second.offset_frame)] == [
        (on, off) for on, off, _ in spans
    ]
    gap = set(range(3, 6))
    for u in (first, second):
        assert not gap & set(range(u.onset_frame, u.offset_frame + 1))


def test_repeated_token_needs_a_separating_blank():
    seq = TokenSeq((1, 1))
    assert seq.min_frames() == 3
    with pytest.raises(UnemittableError):
        align(PosteriorGrid(_peaked([1, 1], 2)), seq)
    (utt,) = align(PosteriorGrid(_peaked([1, 0, 1], 2)), seq)
    assert (utt.onset_frame, utt.offset_frame) == (0, 2)


def test_sequence_longer_than_grid_is_unemittable():
    with pytest.raises(UnemittableError):
        align(PosteriorGrid(_peaked([1, 2], 3)), TokenSeq((1, 2, 1)))


def test_blank_in_transcript_is_rejected():
    grid = PosteriorGrid(_peaked([1, 2, 0], 3))
    with pytest.raises(ValidationError, match="blank"):
        TokenSeq((1, 0)).check_against(grid)


@pytest.mark.parametrize("bad", [np.zeros(5), np.zeros((4, 1))])
def test_grid_shape_validation(bad):
    with pytest.raises(ValidationError):
        PosteriorGrid(bad)


def test_confidence_of_constant_path():
    assert confidence_score([-0.3] * 120, ScoreParams(L=30)) == pytest.approx(-0.3, abs=1e-12)


def test_confidence_takes_min_over_all_61_windows(rng):
    x = rng.normal(-1.0, 0.5, size=90)
    assert confidence_score(x, ScoreParams(L=30)) == pytest.approx(min_window_mean(x, 30), abs=1e-12)


def test_confidence_of_short_path_is_its_mean(rng):
    x = rng.normal(-1.0, 0.5, size=12)
    assert confidence_score(x, ScoreParams(L=30)) == pytest.approx(x.mean(), abs=1e-12)


def test_confidence_is_monotone_in_each_frame(rng):
    x = rng.normal(-1.0, 0.5, size=70)
    base = confidence_score(x)
    for i in rng.choice(70, size=10, replace=False):
        y = x.copy()
        y[i] -= 1.0
        assert confidence_score(y) <= base
    assert confidence_score(np.append(x, -np.inf)) == -np.inf


def test_confidence_lies_within_value_range(rng):
    for _ in range(50):
        x = rng.normal(-2, 1, size=int(rng.integers(1, 100)))
        s = confidence_score(x, ScoreParams(L=int(rng.integers(1, 40))))
        assert x.min() <= s <= x.max()


def test_empty_path_is_rejected():
    with pytest.raises(ValidationError):
        confidence_score([])


def test_score_given_timings_matches_full_alignment():
    labels = [3, 3, 1, 1, 0, 2, 2, 3, 3, 3]
    grid = PosteriorGrid(_peaked(labels, 4), frame_duration_s=0.02)
    (utt,) = align(grid, TokenSeq((1, 2)))
    start, end = utt.start_s(0.02), utt.end_s(0.02)
    assert score_given_timings(grid, (1, 2), start, end) == pytest.approx(utt.confidence, abs=1e-12)


def test_score_given_wrong_timings_is_far_below_theta():
    labels = [1, 1, 2, 2] + [3] * 8
    grid = PosteriorGrid(_peaked(labels, 4, p=0.9))
    score = score_given_timings(grid, (1, 2), 0.05, 0.12)
    _, spans = brute_force_align(grid.logits[5:12], [[1, 2]])
    assert score == pytest.approx(min_window_mean(spans[0][2], 30), abs=1e-12)
    assert score < -3.0 < ScoreParams().theta


def test_score_given_timings_too_short_slice_is_neg_inf():
    grid = PosteriorGrid(_peaked([1, 0, 1, 0], 2))
    assert score_given_timings(grid, (1, 1), 0.0, 0.02) == -math.inf


@pytest.mark.parametrize("start, end", [(0.5, 0.5), (-0.1, 0.2), (5.0, 6.0)])
def test_score_given_timings_invalid_interval(start, end):
    grid = PosteriorGrid(_peaked([1, 0, 1, 0], 2))
    with pytest.raises(ValidationError):
        score_given_timings(grid, (1,), start, end)


def test_partition_short_recording_is_one_block():
    plan = partition_plan(160 * 1100, 160, 1000, 60)
    assert plan == [Block(0, 160 * 1100, 0, 0)]


def test_partition_of_2_2_blocks_has_longer_last_block():
    spf, maxb = 160, 1000
    plan = partition_plan(int(2.2 * maxb) * spf, spf, maxb, 60)
    assert len(plan) == 2
    cores = [(b.end - b.start) // spf for b in plan]
    assert cores == [1000, 1200]
    assert cores[-1] <= 1.25 * maxb
    assert plan[0].right_overlap == plan[1].left_overlap == 60 * spf
    assert plan[0].left_overlap == plan[1].right_overlap == 0


def test_partition_cores_tile_random_totals():
    rng = np.random.default_rng(9)
    spf = 160
    for _ in range(1000):
        maxb = int(rng.integers(121, 400))
        total = int(rng.integers(spf, 20 * maxb * spf))
        plan = partition_plan(total, spf, maxb, 60)
        assert plan[0].start == 0 and plan[-1].end == total
        assert all(a.end == b.start for a, b in zip(plan, plan[1:]))
        assert all(b.start % spf == 0 for b in plan)
        assert all((b.end - b.start) // spf == maxb for b in plan[:-1])
        assert (plan[-1].end - plan[-1].start) // spf <= 1.25 * maxb
        assert all(0 <= b.input_start and b.input_end <= total for b in plan)


def test_partition_rejects_short_overlap():
    with pytest.raises(ValidationError, match="below"):
        partition_plan(160 * 5000, 160, 1000, 30, frame_duration_s=0.01)
    assert partition_plan(160 * 5000, 160, 1000, 30, frame_duration_s=0.01, allow_short_overlap=True)
    with pytest.raises(ValidationError):
        partition_plan(160 * 5000, 160, 100, 60)


def test_stitch_single_block_is_identity(rng):
    grid = PosteriorGrid(random_log_softmax(rng, 40, 5))
    out = stitch_posteriors([(grid, Block(0, 40 * 160, 0, 0))])
    assert np.array_equal(out.logits, grid.logits)


def test_stitch_rejects_wrong_frame_count(rng):
    grid = PosteriorGrid(random_log_softmax(rng, 39, 5))
    with pytest.raises(ValidationError, match="expected 40 frames"):
        stitch_posteriors([(grid, Block(0, 40 * 160, 0, 0))])


def test_stitch_rejects_vocabulary_change(rng):
    a = PosteriorGrid(random_log_softmax(rng, 10, 5))
    b = PosteriorGrid(random_log_softmax(rng, 10, 4))
    with pytest.raises(ValidationError, match="vocabulary"):
        stitch_posteriors([(a, Block(0, 1600, 0, 0)), (b, Block(1600, 3200, 0, 0))])


def test_local_mock_inference_is_reproduced_by_stitching(rng):
    spf = 160
    signal = rng.normal(size=spf * 2500 + 37)
    for radius in (0, 1, 20, 59):
        infer = lambda s, r=radius: mock_posterior_inference(s, samples_per_frame=spf, radius=r)
        stitched = infer_partitioned(signal, infer, 700, 60, spf)
        assert np.array_equal(stitched.logits, infer(signal).logits)


def _manifest(scores):
    return CorpusManifest(
        [UtteranceRecord(f"u{i}", "g", start_s=0, end_s=1, ctc_score=s) for i, s in enumerate(scores)]
    )


def test_filter_by_ctc_boundary_is_inclusive():
    out = filter_by_ctc(_manifest([-0.1, -0.3, -0.5]), -0.3)
    assert [r.utterance_id for r in out] == ["u0", "u1"]
    assert out.stages[-1]["n_out"] == 2


def test_filter_by_ctc_matches_scan_and_is_idempotent(rng):
    scores = np.round(-rng.exponential(0.5, size=200), 3).tolist() + [-math.inf]
    m = _manifest(scores)
    once = filter_by_ctc(m, -0.3)
    assert [r.utterance_id for r in once] == [f"u{i}" for i, s in enumerate(scores) if s >= -0.3]
    assert filter_by_ctc(once, -0.3).records == once.records


def test_filter_by_ctc_requires_scores():
    m = CorpusManifest([UtteranceRecord("u", "g", start_s=0, end_s=1)])
    with pytest.raises(ValidationError, match="missing ctc_score"):
        filter_by_ctc(m, -0.3)


def test_posterior_file_round_trip(tmp_path, rng):
    grid = PosteriorGrid(random_log_softmax(rng, 25, 6).astype(np.float32), 2, 0.02, 320)
    write_posteriors(grid, tmp_path / "g.mtx")
    back = read_posteriors(tmp_path / "g.mtx")
    assert np.array_equal(back.logits, grid.logits)
    assert (back.blank_index, back.frame_duration_s, back.samples_per_frame) == (2, 0.02, 320)
    (tmp_path / "g.hdr").unlink()
    with pytest.raises(MissingArtifactError):
        read_posteriors(tmp_path / "g.mtx")


def test_random_instances_match_enumeration():
    rng = np.random.default_rng(21)
    for _ in range(40):
        T, V = int(rng.integers(3, 8)), 3
        utts = [[int(t) for t in rng.integers(1, V, size=int(rng.integers(1, 3)))]]
        logits = random_log_softmax(rng, T, V)
        total, spans = brute_force_align(logits, utts)
        if total == -math.inf:
            continue
        grid = PosteriorGrid(logits)
        (utt,) = align(grid, TokenSeq.from_utterances(utts))
        assert build_trellis(grid, TokenSeq.from_utterances(utts)).best_logprob == pytest.approx(total, abs=1e-12)
        assert (utt.onset_frame, utt.offset_frame) == spans[0][:2]
