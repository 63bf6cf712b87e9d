"""Domain types and on-disk formats shared across the pipeline.

Timestamps live on a 1 Hz integer grid and every window is inclusive.

Files in a dataset directory:

* ``manifest.jsonl``: one object per video,
  ``{id, duration_s, video_features, tracks, track_features?, task_id?}``.
* ``*.fseq``: feature sequences, header ``b"FSEQ1" | kind u8 | length u32 | dim u32 |
  dtype u8`` then row-major little-endian values.
* ``*.jsonl`` tracks: one sentence per line,
  ``{video_id, mode, idx, text, start?, end?, alignable?, true_start?, true_end?}``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

FSEQ_MAGIC = b"FSEQ1"
_FSEQ_HEADER = struct.Struct("<5sBIIB")
_KINDS = ("video", "text")
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


class LoadError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class TimeWindow:
    start: int
    end: int

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValidationError(f"invalid window [{self.start}, {self.end}]")

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2.0

    def __contains__(self, t) -> bool:
        return self.start <= t <= self.end


@dataclass
class FeatureSequence:
    id: str
    kind: str
    rows: np.ndarray

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown feature kind {self.kind!r}")
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1 or self.rows.shape[1] < 1:
            raise ValidationError(f"{self.id}: features must be a non-empty 2-D array, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValidationError(f"{self.id}: non-finite feature values")

    @property
    def length(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


@dataclass
class Sentence:
    text: str
    source_window: TimeWindow | None = None
    alignable: bool | None = None
    true_window: TimeWindow | None = None


@dataclass
class TextTrack:
    video_id: str
    mode: str
    sentences: list[Sentence] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("narration", "step"):
            raise ValidationError(f"unknown track mode {self.mode!r}")
        if self.mode == "narration":
            starts = []
            for i, s in enumerate(self.sentences):
                if s.source_window is None:
                    raise ValidationError(f"{self.video_id}: narration {i} has no timestamp")
                starts.append(s.source_window.start)
            if starts != sorted(starts):
                raise ValidationError(f"{self.video_id}: narrations not sorted by start")

    def __len__(self):
        return len(self.sentences)

    def is_alignable(self, k: int) -> bool:
        s = self.sentences[k]
        return s.source_window is not None and s.alignable is not False

    def permuted(self, order) -> "TextTrack":
        # step tracks only: narration order is meaningful and validated
        return TextTrack(self.video_id, "step", [self.sentences[i] for i in order])


@dataclass
class AlignmentMatrix:
    values: np.ndarray
    kind: str = "predicted_score"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValidationError("alignment matrix must be 2-D")
        if self.kind == "ground_truth_binary":
            if not np.all((self.values == 0) | (self.values == 1)):
                raise ValidationError("ground-truth matrix must be binary")
        elif self.kind == "predicted_score":
            if np.any(np.abs(self.values) > 1.0 + 1e-9):
                raise ValidationError("predicted scores must lie in [-1, 1]")
        elif self.kind != "pseudo_label_score":
            raise ValidationError(f"unknown matrix kind {self.kind!r}")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass
class StepRecord:
    video_id: str
    step_idx: int
    step_text: str
    window: TimeWindow
    score: float
    provenance: str
    discarded: bool

    def to_json(self) -> dict:
        d = asdict(self)
        d["start"], d["end"] = self.window.start, self.window.end
        del d["window"]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "StepRecord":
        return cls(d["video_id"], int(d["step_idx"]), d["step_text"],
                   TimeWindow(int(d["start"]), int(d["end"])), float(d["score"]),
                   d["provenance"], bool(d["discarded"]))


@dataclass
class Video:
    """One manifest entry with everything loaded."""

    id: str
    duration_s: int
    features: FeatureSequence
    tracks: dict[str, TextTrack] = field(default_factory=dict)
    text_features: dict[str, FeatureSequence] = field(default_factory=dict)
    task_id: str | None = None


@dataclass
class Dataset:
    videos: list[Video] = field(default_factory=list)

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def by_id(self) -> dict[str, Video]:
        return {v.id: v for v in self.videos}


# -- ground truth ----------------------------------------------------------
def gt_matrix_from_windows(track: TextTrack, T: int, use_true: bool = False) -> AlignmentMatrix:
    """Binary K x T matrix with ones on each alignable sentence's inclusive window."""
    Y = np.zeros((len(track), T))
    for k, s in enumerate(track.sentences):
        w = s.true_window if use_true else s.source_window
        if w is None or s.alignable is False:
            continue
        if w.end > T - 1:
            raise ValidationError(f"{track.video_id}: window [{w.start}, {w.end}] outside [0, {T - 1}]")
        Y[k, w.start:w.end + 1] = 1.0
    return AlignmentMatrix(Y, "ground_truth_binary")


# -- binary feature format -------------------------------------------------
def write_fseq(f, rows: np.ndarray, kind: str) -> None:
    rows = np.asarray(rows)
    code = 0 if rows.dtype == np.float32 else 1
    rows = rows.astype(_DTYPES[code], copy=False)
    f.write(_FSEQ_HEADER.pack(FSEQ_MAGIC, _KINDS.index(kind), rows.shape[0], rows.shape[1], code))
    f.write(np.ascontiguousarray(rows).tobytes())


def read_fseq(f, name: str = "<stream>") -> tuple[str, np.ndarray]:
    head = f.read(_FSEQ_HEADER.size)
    if len(head) != _FSEQ_HEADER.size:
        raise LoadError(f"{name}: truncated header")
    magic, kind, length, dim, code = _FSEQ_HEADER.unpack(head)
    if magic != FSEQ_MAGIC:
        raise LoadError(f"{name}: bad magic {magic!r}")
    if kind >= len(_KINDS) or code >= len(_DTYPES):
        raise LoadError(f"{name}: bad kind/dtype code")
    dt = _DTYPES[code]
    nbytes = length * dim * dt.itemsize
    buf = f.read(nbytes)
    if len(buf) != nbytes:
        raise LoadError(f"{name}: expected {nbytes} data bytes, got {len(buf)}")
    return _KINDS[kind], np.frombuffer(buf, dtype=dt).reshape(length, dim).astype(dt.newbyteorder("="))


def save_features(path, seq: FeatureSequence) -> None:
    with open(path, "wb") as f:
        write_fseq(f, seq.rows, seq.kind)


def load_features(path, id: str) -> FeatureSequence:
    with open(path, "rb") as f:
        kind, rows = read_fseq(f, str(path))
        if f.read(1):
            raise LoadError(f"{path}: trailing bytes after feature data")
    return FeatureSequence(id, kind, rows)


# -- tracks ----------------------------------------------------------------
def _window(d, a, b):
    if d.get(a) is None:
        return None
    return TimeWindow(int(d[a]), int(d[b]))


def track_to_lines(track: TextTrack) -> list[dict]:
    out = []
    for i, s in enumerate(track.sentences):
        d = {"video_id": track.video_id, "mode": track.mode, "idx": i, "text": s.text}
        if s.source_window is not None:
            d["start"], d["end"] = s.source_window.start, s.source_window.end
        if s.alignable is not None:
            d["alignable"] = s.alignable
        if s.true_window is not None:
            d["true_start"], d["true_end"] = s.true_window.start, s.true_window.end
        out.append(d)
    return out


def save_track(path, track: TextTrack) -> None:
    write_jsonl(path, track_to_lines(track))


def load_track(path) -> TextTrack:
    rows = list(read_jsonl(path))
    if not rows:
        raise LoadError(f"{path}: empty track file")
    video_id, mode = rows[0][1]["video_id"], rows[0][1]["mode"]
    sentences = []
    for lineno, d in rows:
        try:
            if d["video_id"] != video_id or d["mode"] != mode:
                raise LoadError(f"{path}:{lineno}: mixed video_id/mode in one track")
            if int(d["idx"]) != len(sentences):
                raise LoadError(f"{path}:{lineno}: idx {d['idx']} out of sequence")
            sentences.append(Sentence(d["text"], _window(d, "start", "end"), d.get("alignable"),
                                      _window(d, "true_start", "true_end")))
        except (KeyError, TypeError, ValidationError) as e:
            raise LoadError(f"{path}:{lineno}: {e}") from e
    try:
        return TextTrack(video_id, mode, sentences)
    except ValidationError as e:
        raise LoadError(f"{path}: {e}") from e


# -- jsonl / csv helpers ---------------------------------------------------
def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_jsonl(path, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for o in objs:
            f.write(dumps(o) + "\n")


def read_jsonl(path):
    """Yield ``(line_number, object)`` pairs, skipping blank lines."""
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise LoadError(f"{path}:{lineno}: malformed JSON ({e.msg})") from e


def save_alignment_csv(path, values: np.ndarray) -> None:
    buf = io.StringIO()
    for row in np.asarray(values, dtype=float):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_alignment_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError as e:
            raise LoadError(f"{path}:{lineno}: {e}") from e
    if rows and len({len(r) for r in rows}) != 1:
        raise LoadError(f"{path}: ragged rows")
    return np.array(rows, dtype=float)


def save_records(path, records: Iterable[StepRecord]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


def load_records(path) -> list[StepRecord]:
    out = []
    for lineno, d in read_jsonl(path):
        try:
            out.append(StepRecord.from_json(d))
        except (KeyError, ValueError) as e:
            raise LoadError(f"{path}:{lineno}: {e}") from e
    return out


# -- dataset directory -----------------------------------------------------
def save_dataset(root, dataset: Dataset) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "tracks").mkdir(parents=True, exist_ok=True)
    entries = []
    for v in dataset.videos:
        vf = f"features/{v.id}.video.fseq"
        save_features(root / vf, v.features)
        tracks, tfeats = [], []
        for mode in sorted(v.tracks):
            tp = f"tracks/{v.id}.{mode}.jsonl"
            save_track(root / tp, v.tracks[mode])
            tracks.append(tp)
            if mode in v.text_features:
                fp = f"features/{v.id}.{mode}.fseq"
                save_features(root / fp, v.text_features[mode])
                tfeats.append(fp)
            else:
                tfeats.append(None)
        e = {"id": v.id, "duration_s": v.duration_s, "video_features": vf,
             "tracks": tracks, "track_features": tfeats}
        if v.task_id is not None:
            e["task_id"] = v.task_id
        entries.append(e)
    write_jsonl(root / "manifest.jsonl", entries)


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or a manifest file path) and check cross references."""
    path = Path(path)
    manifest = path / "manifest.jsonl" if path.is_dir() else path
    if not manifest.exists():
        raise LoadError(f"{manifest}: manifest not found")
    root = manifest.parent
    videos = []
    seen = set()
    for lineno, e in read_jsonl(manifest):
        where = f"{manifest}:{lineno}"
        try:
            vid = str(e["id"])
            duration = int(e["duration_s"])
            vpath = root / e["video_features"]
            tracks = list(e.get("tracks", []))
            tfeats = list(e.get("track_features") or [None] * len(tracks))
        except (KeyError, TypeError, ValueError) as err:
            raise LoadError(f"{where}: malformed entry ({err})") from err
        if vid in seen:
            raise LoadError(f"{where}: duplicate video id {vid!r}")
        seen.add(vid)
        if not vpath.exists():
            raise LoadError(f"{where}: video features for id {vid!r} not found at {vpath}")
        feats = load_features(vpath, vid)
        if feats.kind != "video":
            raise LoadError(f"{where}: {vpath} is not a video feature file")
        if feats.length != duration:
            raise LoadError(f"{where}: id {vid!r} has {feats.length} feature rows but duration_s={duration}")
        video = Video(vid, duration, feats, task_id=e.get("task_id"))
        if len(tfeats) != len(tracks):
            raise LoadError(f"{where}: track_features must parallel tracks")
        for tp, fp in zip(tracks, tfeats):
            if not (root / tp).exists():
                raise LoadError(f"{where}: track file for id {vid!r} not found at {root / tp}")
            track = load_track(root / tp)
            if track.video_id != vid:
                raise LoadError(f"{where}: track {tp} belongs to {track.video_id!r}, not {vid!r}")
            for s in track.sentences:
                for w in (s.source_window, s.true_window):
                    if w is not None and w.end >= duration:
                        raise LoadError(f"{root / tp}: window [{w.start}, {w.end}] beyond duration {duration}")
            video.tracks[track.mode] = track
            if fp is not None:
                if not (root / fp).exists():
                    raise LoadError(f"{where}: text features for id {vid!r} not found at {root / fp}")
                tf = load_features(root / fp, f"{vid}.{track.mode}")
                if tf.length != len(track):
                    raise LoadError(f"{where}: {fp} has {tf.length} rows for {len(track)} sentences")
                video.text_features[track.mode] = tf
        videos.append(video)
    return Dataset(videos)
