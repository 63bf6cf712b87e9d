"""Turning narrations into timestamped procedural steps.

Stage 1 chains a steps->narrations softmax similarity with the narrations' (weak) windows
and grows a window around each step's peak. Stage 2 trains the grounding network on the
surviving Stage-1 windows and re-grounds every generated step with it.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, replace

import numpy as np

from .datamodel import (
    Dataset,
    FeatureSequence,
    Sentence,
    StepRecord,
    TextTrack,
    TimeWindow,
    Video,
    gt_matrix_from_windows,
)
from .model import ModelConfig, NaSVA, predict_windows
from .numerics import ConfigError, DimensionError
from .summarizer import segment_transcript, summarize
from .training import TrainConfig, train

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


@dataclass
class Stage1Config:
    nu: float = 0.07
    zeta: float = 0.7
    eps1: float = 0.20

    def validate(self) -> "Stage1Config":
        if self.nu <= 0:
            raise ConfigError("nu must be > 0")
        if not 0 < self.zeta <= 1:
            raise ConfigError("zeta must be in (0, 1]")
        return self


@dataclass
class Stage2Config:
    eps2: float = 0.8
    delta_sec: int = 8
    position: str = "start"
    iterations: int = 1

    def validate(self) -> "Stage2Config":
        if self.delta_sec < 1:
            raise ConfigError("delta_sec must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.position not in ("start", "center"):
            raise ConfigError(f"position must be 'start' or 'center', got {self.position!r}")
        return self


@dataclass
class StepSet:
    """Generated steps of one video with their text features."""

    video_id: str
    texts: list
    rows: np.ndarray


# -- stage 1 ---------------------------------------------------------------
def text_similarity_matrix(step_feats, narr_feats, nu: float) -> np.ndarray:
    """Row-stochastic S x N matrix: softmax over narrations of ``steps . narrations^T / nu``."""
    if nu <= 0:
        raise ConfigError("nu must be > 0")
    S = np.asarray(getattr(step_feats, "rows", step_feats), dtype=float)
    N = np.asarray(getattr(narr_feats, "rows", narr_feats), dtype=float)
    if S.shape[1] != N.shape[1]:
        raise DimensionError(f"step dim {S.shape[1]} != narration dim {N.shape[1]}")
    logits = S @ N.T / nu
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def chain_labels(T_SN: np.ndarray, Y_NV: np.ndarray) -> np.ndarray:
    T_SN, Y_NV = np.asarray(T_SN, dtype=float), np.asarray(Y_NV, dtype=float)
    if T_SN.ndim != 2 or Y_NV.ndim != 2 or T_SN.shape[1] != Y_NV.shape[0]:
        raise DimensionError(f"cannot chain {T_SN.shape} with {Y_NV.shape}")
    return T_SN @ Y_NV


def expand_window(row: np.ndarray, center: int, zeta: float) -> TimeWindow:
    """Grow ``[center, center]`` while neighbouring scores stay >= zeta * row[center]."""
    floor = zeta * row[center]
    s = e = center
    while s > 0 and row[s - 1] >= floor:
        s -= 1
    while e < len(row) - 1 and row[e + 1] >= floor:
        e += 1
    return TimeWindow(int(s), int(e))


def stage1_windows(Y_SV, zeta: float = 0.7, eps1: float = 0.20, video_id: str = "",
                   texts=None) -> list[StepRecord]:
    Y_SV = np.asarray(Y_SV, dtype=float)
    texts = texts if texts is not None else [""] * Y_SV.shape[0]
    out = []
    for k, row in enumerate(Y_SV):
        c = int(np.argmax(row))
        peak = float(row[c])
        out.append(StepRecord(video_id, k, texts[k], expand_window(row, c, zeta), peak,
                              "stage1", peak < eps1))
    return out


def _unit_rows(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def stage1_video(video: Video, steps: StepSet, config: Stage1Config) -> list[StepRecord]:
    if len(steps.texts) == 0:
        return []
    narr = video.tracks["narration"]
    T_SN = text_similarity_matrix(_unit_rows(steps.rows), _unit_rows(video.text_features["narration"].rows),
                                  config.nu)
    Y_NV = gt_matrix_from_windows(narr, video.duration_s).values
    return stage1_windows(chain_labels(T_SN, Y_NV), config.zeta, config.eps1, video.id, steps.texts)


# -- step sources ----------------------------------------------------------
def steps_from_track(video: Video) -> StepSet:
    track = video.tracks["step"]
    return StepSet(video.id, [s.text for s in track.sentences], video.text_features["step"].rows)


class TextEncoder:
    """Stand-in for a sentence encoder: exact-text lookup into the dataset's text features,
    with a text-seeded random unit vector for unseen sentences."""

    def __init__(self, dataset: Dataset, dim: int | None = None):
        self.table = {}
        for v in dataset.videos:
            for mode in ("step", "narration"):
                if mode in v.text_features:
                    for s, row in zip(v.tracks[mode].sentences, v.text_features[mode].rows):
                        self.table.setdefault(" ".join(s.text.lower().split()), row)
        if dim is None:
            dim = next(iter(self.table.values())).shape[0] if self.table else 1
        self.dim = dim

    def __call__(self, texts) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, t in enumerate(texts):
            key = " ".join(t.lower().split())
            if key in self.table:
                out[i] = self.table[key]
            else:
                seed = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
                x = np.random.Generator(np.random.PCG64(seed)).standard_normal(self.dim)
                out[i] = x / np.linalg.norm(x)
        return out


def steps_from_summarizer(video: Video, summarizer, encoder: TextEncoder, target: int = 10) -> StepSet:
    segments = segment_transcript(video.tracks["narration"], target)
    texts, failed = summarize(segments, summarizer)
    if failed:
        log.warning("%s: %d segment(s) failed", video.id, len(failed))
    return StepSet(video.id, texts, encoder(texts) if texts else np.zeros((0, encoder.dim)))


def run_stage1(dataset: Dataset, config: Stage1Config, step_sets: dict | None = None) -> list[StepRecord]:
    config.validate()
    step_sets = step_sets or {v.id: steps_from_track(v) for v in dataset.videos}
    records = []
    for v in dataset.videos:
        if v.id in step_sets:
            records.extend(stage1_video(v, step_sets[v.id], config))
    return records


# -- stage 2 ---------------------------------------------------------------
def pseudo_dataset(dataset: Dataset, step_sets: dict, records: list[StepRecord]) -> Dataset:
    """Videos carrying only their surviving steps, with record windows as binary targets."""
    keep: dict[str, list[StepRecord]] = {}
    for r in records:
        if not r.discarded:
            keep.setdefault(r.video_id, []).append(r)
    videos = []
    for v in dataset.videos:
        rs = sorted(keep.get(v.id, []), key=lambda r: r.step_idx)
        if not rs:
            continue
        ss = step_sets[v.id]
        idx = [r.step_idx for r in rs]
        track = TextTrack(v.id, "step", [Sentence(r.step_text, r.window, True) for r in rs])
        videos.append(Video(v.id, v.duration_s, v.features, {"step": track},
                            {"step": FeatureSequence(f"{v.id}.step", "text", ss.rows[idx])}, v.task_id))
    return Dataset(videos)


def refine_scores(model: NaSVA, video: Video, steps: StepSet, config: Stage2Config,
                  zeta: float = 0.7) -> list[StepRecord]:
    if len(steps.texts) == 0:
        return []
    A = model.predict(video.features, steps.rows, "step").values
    windows, peaks = predict_windows(A, "fixed_duration", config.delta_sec)
    out = []
    for k, (w, p) in enumerate(zip(windows, peaks)):
        if config.position == "center":
            w = expand_window(A[k], w.start, zeta)
        out.append(StepRecord(video.id, k, steps.texts[k], w, float(p), "stage2", bool(p < config.eps2)))
    return out


def stage2_refine(dataset: Dataset, records: list[StepRecord], model_config: ModelConfig,
                  train_config: TrainConfig, config: Stage2Config, step_sets: dict | None = None,
                  zeta: float = 0.7):
    """Self-training: fit on surviving pseudo-labels, then re-ground all generated steps.

    Returns ``(stage2_records, model)`` from the last iteration.
    """
    config.validate()
    step_sets = step_sets or {v.id: steps_from_track(v) for v in dataset.videos}
    current = records
    model = None
    step_cfg = replace(train_config, narration_prob=0.0)
    for it in range(config.iterations):
        train_set = pseudo_dataset(dataset, step_sets, current)
        if len(train_set) == 0:
            raise PipelineError("no surviving pseudo-labelled steps to train on")
        model = NaSVA(replace(model_config, seed=model_config.seed + it))
        train(train_set, model, step_cfg)
        current = []
        for v in dataset.videos:
            if v.id in step_sets:
                current.extend(refine_scores(model, v, step_sets[v.id], config, zeta))
        log.info("stage2 iteration %d: %d/%d steps kept", it + 1,
                 sum(not r.discarded for r in current), len(current))
    return current, model
