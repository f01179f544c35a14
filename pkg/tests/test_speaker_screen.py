import numpy as np
import pytest

from darkselect.errors import ValidationError
from darkselect.manifest import CorpusManifest, UtteranceRecord
from darkselect.speaker_screen import (
    EmbeddingSet,
    annotate_compactness,
    annotate_speech_fraction,
    compactness_score,
    drop_nonspeech_and_short,
    energy_vad,
    filter_groups_by_compactness,
    group_compactness,
    group_to_speakers,
    reduce_embeddings,
    write_wav,
)

SR = 16000


def _emb(vectors):
    return EmbeddingSet(tuple(f"u{i:03d}" for i in range(len(vectors))), np.asarray(vectors, dtype=float))


def test_vad_half_silence_half_tone():
    t = np.arange(SR) / SR
    signal = np.concatenate([np.zeros(SR), 0.5 * np.sin(2 * np.pi * 220 * t)])
    res = energy_vad(signal, frame_ms=25.0, sample_rate=SR)
    n_frames = -(-signal.size // 400)
    assert abs(res.speech_fraction - 0.5) <= 1.0 / n_frames
    assert res.segments[0][0] == pytest.approx(1.0, abs=0.025)


def test_vad_silence_and_steady_tone():
    assert energy_vad(np.zeros(SR)).speech_fraction == 0.0
    t = np.arange(SR) / SR
    assert energy_vad(0.3 * np.sin(2 * np.pi * 400 * t), energy_ratio_threshold=0.5).speech_fraction == 1.0


def test_vad_rejects_empty_signal():
    with pytest.raises(ValidationError):
        energy_vad(np.zeros(0))


def test_speech_fraction_from_audio(tmp_path):
    t = np.arange(2 * SR) / SR
    signal = np.where(t < 1.0, 0.0, 0.5 * np.sin(2 * np.pi * 300 * t))
    write_wav(tmp_path / "a.wav", signal)
    m = CorpusManifest([
        UtteranceRecord("s", "g", audio_path="a.wav", start_s=0.0, end_s=0.9),
        UtteranceRecord("t", "g", audio_path="a.wav", start_s=1.1, end_s=2.0),
        UtteranceRecord("k", "g", audio_path="a.wav", start_s=0, end_s=1, speech_fraction=0.25),
    ])
    out = annotate_speech_fraction(m, tmp_path)
    fr = [r.speech_fraction for r in out]
    assert fr[0] == pytest.approx(0.0, abs=0.05)
    assert fr[1] == pytest.approx(1.0, abs=0.05)
    assert fr[2] == 0.25


def _records(spec):
    """spec: group -> list of speech fractions (1 s each)."""
    out = []
    for gid, fracs in spec.items():
        for i, f in enumerate(fracs):
            out.append(UtteranceRecord(f"{gid}-{i}", gid, channel_id=gid, start_s=i, end_s=i + 1, speech_fraction=f))
    return CorpusManifest(out)


def test_drop_nonspeech_and_short_matches_scan(rng):
    spec = {f"g{k}": rng.uniform(0, 1, size=int(rng.integers(1, 10))).round(3).tolist() for k in range(40)}
    out = drop_nonspeech_and_short(_records(spec), min_speech_fraction=0.5, min_group_utts=5)
    expected = {g for g, f in spec.items() if len(f) >= 5 and np.mean(f) >= 0.5}
    assert {r.group_id for r in out} == expected
    assert out.stages[-1]["stage"] == "drop_nonspeech_and_short"


def test_drop_requires_speech_fraction():
    m = CorpusManifest([UtteranceRecord(f"u{i}", "g", start_s=i, end_s=i + 1) for i in range(5)])
    with pytest.raises(ValidationError, match="speech_fraction"):
        drop_nonspeech_and_short(m)


def test_pca_matches_eigendecomposition(rng):
    x = rng.normal(size=(10, 8)) * np.arange(1, 9)
    red = reduce_embeddings(_emb(x), "pca", 2)
    c = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(c.T @ c)
    top = vecs[:, np.argsort(vals)[::-1][:2]]
    oracle = c @ top
    assert np.allclose(red.vectors @ red.vectors.T, oracle @ oracle.T, atol=1e-6)


def test_pca_of_collinear_points_flags_zero_variance():
    x = np.outer(np.arange(6.0), [1.0, 2.0, -1.0])
    red = reduce_embeddings(_emb(x), "pca", 2)
    assert red.zero_variance == (1,)
    assert compactness_score(red).score == 0.0


def test_pca_of_three_collinear_512d_points(rng):
    direction = rng.normal(size=512)
    red = reduce_embeddings(_emb(np.outer([0.0, 1.0, 3.0], direction) + 2.0), "pca", 2)
    assert np.all(red.vectors[:, 1] == 0.0)


def test_pca_needs_enough_vectors(rng):
    with pytest.raises(ValidationError):
        reduce_embeddings(_emb(rng.normal(size=(2, 5))), "pca", 2)


def test_identity_reducer_checks_dimension(rng):
    with pytest.raises(ValidationError):
        reduce_embeddings(_emb(rng.normal(size=(5, 3))), "identity", 2)


def test_compactness_of_diag_2_2_is_4():
    pts = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]) * np.sqrt(1.5)
    assert np.allclose(np.cov(pts, rowvar=False), np.diag([2.0, 2.0]))
    assert compactness_score(_emb(pts)).score == pytest.approx(4.0)


def test_mixing_speakers_increases_compactness(rng):
    a = rng.normal(size=(20, 16)) * 0.5
    b = rng.normal(size=(20, 16)) * 0.5 + 6.0
    score = lambda v: compactness_score(reduce_embeddings(_emb(v), "pca", 2)).score
    mixed = score(np.vstack([a, b]))
    assert mixed > score(a) and mixed > score(b)


def test_compactness_scaling_rotation_and_permutation(rng):
    x = rng.normal(size=(15, 2))
    base = compactness_score(_emb(x)).score
    assert compactness_score(_emb(3.0 * x)).score == pytest.approx(81.0 * base)
    th = 0.7
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert compactness_score(_emb(x @ rot.T + 5.0)).score == pytest.approx(base)
    assert compactness_score(_emb(x[rng.permutation(15)])).score == pytest.approx(base)


def test_compactness_needs_two_vectors():
    with pytest.raises(ValidationError):
        compactness_score(_emb([[0.0, 1.0]]))


def test_compactness_window_example():
    recs = [UtteranceRecord(f"u{i}", f"g{i}", start_s=0, end_s=1, compactness=c) for i, c in enumerate([0.5, 3.0, 9.0])]
    out = filter_groups_by_compactness(CorpusManifest(recs), 1.0, 7.0)
    assert [r.compactness for r in out] == [3.0]


def test_compactness_window_matches_scan(rng):
    vals = rng.uniform(0, 10, size=100).round(2)
    vals[:3] = [1.0, 7.0, 0.99]
    recs = [UtteranceRecord(f"u{i}", f"g{i}", start_s=0, end_s=1, compactness=float(c)) for i, c in enumerate(vals)]
    out = filter_groups_by_compactness(CorpusManifest(recs), 1.0, 7.0)
    assert [r.utterance_id for r in out] == [f"u{i}" for i, c in enumerate(vals) if 1.0 <= c <= 7.0]
    with pytest.raises(ValidationError):
        filter_groups_by_compactness(CorpusManifest(recs), 7.0, 1.0)


def test_group_compactness_end_to_end(rng):
    recs, vecs = [], []
    for g in range(3):
        for i in range(8):
            recs.append(UtteranceRecord(f"g{g}-{i}", f"g{g}", channel_id=f"c{g}", start_s=i, end_s=i + 1))
            vecs.append(rng.normal(size=6) * (g + 1))
    emb = EmbeddingSet(tuple(r.utterance_id for r in recs), np.array(vecs))
    m = CorpusManifest(recs)
    results = group_compactness(m, emb)
    assert set(results) == {"g0", "g1", "g2"}
    assert results["g0"].score < results["g2"].score
    annotated = annotate_compactness(m, results)
    assert all(r.compactness == results[r.group_id].score for r in annotated)


def test_one_speaker_per_channel(rng):
    for _ in range(20):
        channels = rng.integers(0, 6, size=int(rng.integers(1, 30)))
        m = CorpusManifest([
            UtteranceRecord(f"u{i}", f"g{i % 4}", channel_id=f"ch{c}", start_s=0, end_s=1) for i, c in enumerate(channels)
        ])
        out = group_to_speakers(m)
        assert len(out.speakers()) == len(set(channels.tolist()))
        assert all(r.speaker_id == f"spk-{r.channel_id}" for r in out)


def test_missing_channel_is_an_error():
    with pytest.raises(ValidationError, match="channel_id"):
        group_to_speakers(CorpusManifest([UtteranceRecord("u", "g", start_s=0, end_s=1)]))
