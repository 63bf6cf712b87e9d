import io
import json

import numpy as np
import pytest

from stepalign.datamodel import (
    AlignmentMatrix,
    Dataset,
    FeatureSequence,
    LoadError,
    Sentence,
    StepRecord,
    TextTrack,
    TimeWindow,
    ValidationError,
    gt_matrix_from_windows,
    load_alignment_csv,
    load_dataset,
    load_features,
    load_records,
    load_track,
    read_fseq,
    save_alignment_csv,
    save_dataset,
    save_features,
    save_records,
    save_track,
    write_fseq,
)
from stepalign.synthgen import SynthConfig, generate


def W(a, b):
    return TimeWindow(a, b)


def test_time_window_rules():
    assert 4 in W(2, 4) and 2 in W(2, 4) and 5 not in W(2, 4)
    assert W(2, 5).center == 3.5
    with pytest.raises(ValidationError):
        W(3, 2)
    with pytest.raises(ValidationError):
        W(-1, 2)


def test_feature_sequence_validation():
    with pytest.raises(ValidationError):
        FeatureSequence("x", "video", np.zeros((0, 3)))
    with pytest.raises(ValidationError):
        FeatureSequence("x", "video", np.array([[np.nan]]))
    with pytest.raises(ValidationError):
        FeatureSequence("x", "audio", np.zeros((1, 1)))


def test_narration_track_must_be_sorted_and_timed():
    with pytest.raises(ValidationError):
        TextTrack("v", "narration", [Sentence("a", W(3, 4)), Sentence("b", W(1, 2))])
    with pytest.raises(ValidationError):
        TextTrack("v", "narration", [Sentence("a")])
    TextTrack("v", "step", [Sentence("a", W(3, 4)), Sentence("b", W(1, 2))])


def test_alignment_matrix_kinds():
    with pytest.raises(ValidationError):
        AlignmentMatrix(np.array([[0.5]]), "ground_truth_binary")
    with pytest.raises(ValidationError):
        AlignmentMatrix(np.array([[1.5]]), "predicted_score")
    AlignmentMatrix(np.array([[1.5]]), "pseudo_label_score")


def test_gt_matrix_examples():
    track = TextTrack("v", "step", [Sentence("a", W(2, 4), True)])
    np.testing.assert_array_equal(gt_matrix_from_windows(track, 6).values, [[0, 0, 1, 1, 1, 0]])
    track = TextTrack("v", "step", [Sentence("a", W(2, 4), False), Sentence("b")])
    np.testing.assert_array_equal(gt_matrix_from_windows(track, 6).values, np.zeros((2, 6)))
    track = TextTrack("v", "step", [Sentence("a", W(1, 3), True), Sentence("b", W(2, 5), True)])
    np.testing.assert_array_equal(gt_matrix_from_windows(track, 6).values,
                                  [[0, 1, 1, 1, 0, 0], [0, 0, 1, 1, 1, 1]])


def test_gt_matrix_out_of_range():
    track = TextTrack("v", "step", [Sentence("a", W(2, 6), True)])
    with pytest.raises(ValidationError):
        gt_matrix_from_windows(track, 6)


def test_gt_matrix_inverse_consistent(rng):
    for _ in range(50):
        T = int(rng.integers(5, 40))
        windows = []
        for _ in range(int(rng.integers(1, 8))):
            a, b = sorted(int(x) for x in rng.integers(0, T, size=2))
            windows.append(W(a, b))
        track = TextTrack("v", "step", [Sentence(str(i), w, True) for i, w in enumerate(windows)])
        Y = gt_matrix_from_windows(track, T).values
        for row, w in zip(Y, windows):
            on = np.flatnonzero(row)
            assert W(int(on.min()), int(on.max())) == w


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_fseq_round_trip(rng, dtype):
    rows = rng.standard_normal((7, 5)).astype(dtype)
    buf = io.BytesIO()
    write_fseq(buf, rows, "text")
    data = buf.getvalue()
    assert data[:5] == b"FSEQ1"
    buf.seek(0)
    kind, back = read_fseq(buf)
    assert kind == "text" and back.dtype == dtype
    np.testing.assert_array_equal(back, rows)


def test_fseq_errors(tmp_path):
    p = tmp_path / "bad.fseq"
    p.write_bytes(b"NOPE!" + bytes(10))
    with pytest.raises(LoadError, match="magic"):
        load_features(p, "x")
    save_features(p, FeatureSequence("x", "video", np.ones((3, 2))))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(LoadError, match="bytes"):
        load_features(p, "x")


def test_track_round_trip(tmp_path):
    track = TextTrack("v1", "narration", [
        Sentence("so first", W(0, 3), True, W(1, 3)),
        Sentence("hello", W(2, 5), False),
        Sentence("then", W(6, 6)),
    ])
    save_track(tmp_path / "t.jsonl", track)
    assert load_track(tmp_path / "t.jsonl") == track


def test_track_errors_name_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"video_id":"v","mode":"step","idx":0,"text":"a"}\n{"video_id":"v","mode":"step","idx":5,"text":"b"}\n')
    with pytest.raises(LoadError, match=r"t.jsonl:2"):
        load_track(p)
    p.write_text('{"video_id":"v","mode":"step","idx":0,"text":"a"}\nnot json\n')
    with pytest.raises(LoadError, match=r"t.jsonl:2"):
        load_track(p)


def test_records_and_csv_round_trip(tmp_path, rng):
    recs = [StepRecord("v", 0, "cut", W(3, 10), 0.91, "stage2", False),
            StepRecord("v", 1, "mix", W(0, 0), 0.1, "stage1", True)]
    save_records(tmp_path / "r.jsonl", recs)
    assert load_records(tmp_path / "r.jsonl") == recs
    A = rng.uniform(-1, 1, (3, 5))
    save_alignment_csv(tmp_path / "a.csv", A)
    np.testing.assert_array_equal(load_alignment_csv(tmp_path / "a.csv"), A)


def test_empty_manifest(tmp_path):
    (tmp_path / "manifest.jsonl").write_text("")
    assert len(load_dataset(tmp_path)) == 0


def test_dataset_round_trip_bit_exact(tmp_path):
    ds = generate(SynthConfig(n_videos=3, seed=5))
    save_dataset(tmp_path, ds)
    back = load_dataset(tmp_path)
    assert [v.id for v in back] == [v.id for v in ds]
    for a, b in zip(ds, back):
        assert a.duration_s == b.duration_s and a.task_id == b.task_id
        np.testing.assert_array_equal(a.features.rows, b.features.rows)
        assert a.tracks == b.tracks
        for mode in a.text_features:
            np.testing.assert_array_equal(a.text_features[mode].rows, b.text_features[mode].rows)


def test_missing_feature_file_names_id(tmp_path):
    ds = generate(SynthConfig(n_videos=2, seed=5))
    save_dataset(tmp_path, ds)
    (tmp_path / "features" / "v00001.video.fseq").unlink()
    with pytest.raises(LoadError, match="v00001") as exc:
        load_dataset(tmp_path)
    assert "manifest.jsonl:2" in str(exc.value)


def test_manifest_shape_mismatch(tmp_path):
    ds = generate(SynthConfig(n_videos=1, seed=5))
    save_dataset(tmp_path, ds)
    m = tmp_path / "manifest.jsonl"
    entry = json.loads(m.read_text())
    entry["duration_s"] += 1
    m.write_text(json.dumps(entry) + "\n")
    with pytest.raises(LoadError, match="duration_s"):
        load_dataset(tmp_path)


def test_manifest_malformed_line(tmp_path):
    (tmp_path / "manifest.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(LoadError, match=r"manifest.jsonl:1"):
        load_dataset(tmp_path)


def test_dataset_helpers():
    ds = Dataset(generate(SynthConfig(n_videos=2, seed=0)).videos)
    assert set(ds.by_id()) == {"v00000", "v00001"}
