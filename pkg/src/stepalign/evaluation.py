from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .datamodel import Dataset, TimeWindow
from .model import predict_windows
from .numerics import DimensionError

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class SentenceEval:
    alignable: bool
    gt_window: TimeWindow | None
    predicted_peak: int

    def __post_init__(self):
        if self.alignable and self.gt_window is None:
            raise MetricError("alignable sentence needs a ground-truth window")


@dataclass
class EvalItem:
    video_id: str
    sentences: list[SentenceEval] = field(default_factory=list)
    task_id: str | None = None


def _counts(items) -> tuple[int, int]:
    hit = total = 0
    for item in items:
        for s in item.sentences:
            if not s.alignable:
                continue
            total += 1
            hit += s.predicted_peak in s.gt_window
    return hit, total


def recall_at_1(items) -> float:
    """Fraction of alignable sentences whose peak falls inside the (inclusive) GT window."""
    hit, total = _counts(items)
    if total == 0:
        raise MetricError("recall@1 undefined: no alignable sentences")
    return hit / total


def avg_recall_at_1(items) -> float:
    """Unweighted mean over tasks of per-task recall@1."""
    groups: dict[str, list] = {}
    for item in items:
        if item.task_id is None:
            raise MetricError(f"{item.video_id}: avg recall@1 needs a task_id")
        groups.setdefault(item.task_id, []).append(item)
    recalls = []
    for task in sorted(groups):
        hit, total = _counts(groups[task])
        if total == 0:
            log.warning("task %s has no alignable steps; excluded", task)
            continue
        recalls.append(hit / total)
    if not recalls:
        raise MetricError("avg recall@1 undefined: no task has alignable steps")
    return float(np.mean(recalls))


def items_from_scores(video, mode: str, scores: np.ndarray) -> EvalItem:
    """Pair argmax peaks of a K x T score matrix with the track's ground truth."""
    windows, _ = predict_windows(scores, "argmax_only")
    sents = []
    for s, w in zip(video.tracks[mode].sentences, windows):
        gt = s.true_window if s.true_window is not None else s.source_window
        sents.append(SentenceEval(bool(s.alignable) and gt is not None, gt, w.start))
    return EvalItem(video.id, sents, video.task_id)


def predict_items(model, dataset: Dataset, mode: str, jobs: int = 1) -> list[EvalItem]:
    videos = [v for v in dataset.videos if mode in v.text_features]

    def one(v):
        A = model.predict(v.features, v.text_features[mode], mode)
        return items_from_scores(v, mode, A.values)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return list(ex.map(one, videos))
    return [one(v) for v in videos]


def resampled_avg_recall(items, n_sets: int, seed: int = 0) -> float:
    """Mean avg-recall@1 over ``n_sets`` random half-subsets of videos per task."""
    rng = np.random.Generator(np.random.PCG64(seed))
    by_task: dict[str, list] = {}
    for it in items:
        by_task.setdefault(it.task_id, []).append(it)
    vals = []
    for _ in range(n_sets):
        subset = []
        for task in sorted(by_task):
            group = by_task[task]
            k = max(1, len(group) // 2)
            subset.extend(group[i] for i in sorted(rng.choice(len(group), size=k, replace=False)))
        vals.append(avg_recall_at_1(subset))
    return float(np.mean(vals))


def report(items, with_avg: bool = False, resample: int = 0, seed: int = 0) -> dict:
    per_video = []
    for it in items:
        hit, total = _counts([it])
        per_video.append({"video_id": it.video_id, "task_id": it.task_id, "hits": hit,
                          "n_alignable": total, "r_at_1": hit / total if total else None})
    out = {
        "metric": "r_at_1",
        "value": recall_at_1(items),
        "n_sentences": sum(len(it.sentences) for it in items),
        "per_video": per_video,
    }
    if with_avg:
        out["avg_r_at_1"] = avg_recall_at_1(items)
        out["n_tasks"] = len({it.task_id for it in items})
        if resample:
            out["avg_r_at_1_resampled"] = resampled_avg_recall(items, resample, seed)
    return out


def evaluate_model(model, dataset: Dataset, mode: str = "step", jobs: int = 1,
                   resample: int = 0, seed: int = 0) -> dict:
    for v in dataset.videos:
        if mode in v.text_features:
            if (v.features.dim != model.config.C_v
                    or v.text_features[mode].dim != model.config.C_t):
                raise DimensionError(
                    f"{v.id}: feature dims ({v.features.dim}, {v.text_features[mode].dim}) do not "
                    f"match checkpoint config C_v={model.config.C_v}, C_t={model.config.C_t}")
    items = predict_items(model, dataset, mode, jobs)
    with_avg = all(it.task_id is not None for it in items)
    return report(items, with_avg, resample, seed)
