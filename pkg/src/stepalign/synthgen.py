"""Planted-alignment synthetic datasets.

Every video tiles its timeline with contiguous action windows. Each action owns a random
unit "prototype" vector; video frames inside the window and the step sentence describing
it are noisy copies of that prototype. Narrations are spoken around their action with a
jittered timestamp, and only a fraction of them show anything on screen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset, FeatureSequence, Sentence, TextTrack, TimeWindow, Video
from .numerics import ConfigError

DISCOURSE_MARKERS = ("", "so ", "now ", "okay so ", "next ", "and then ")
FILLER = (
    "hey guys welcome back to my channel",
    "hi everyone and welcome",
    "don't forget to like and subscribe",
    "thanks for watching see you next time",
    "let me know in the comments below",
    "this is honestly my favourite part",
    "i got this at the store last week",
    "it is really sunny here today",
)


@dataclass
class SynthConfig:
    n_videos: int = 20
    T_range: tuple = (48, 96)
    C: int = 64
    steps_per_video: tuple = (8, 13)
    narrations_per_step: tuple = (1, 3)
    noise_sigma: float = 0.1
    alignable_frac: float = 0.3
    jitter_s: int = 0
    n_tasks: int = 4
    seed: int = 0

    def validate(self) -> "SynthConfig":
        lo, hi = self.T_range
        smin, smax = self.steps_per_video
        if not 1 <= smin <= smax:
            raise ConfigError("steps_per_video must be a non-empty positive range")
        if not 1 <= lo <= hi:
            raise ConfigError("T_range must be a non-empty positive range")
        if lo < 2 * smax:
            raise ConfigError(f"T_range min {lo} cannot fit {smax} windows of >= 2 s")
        if not 0.0 <= self.alignable_frac <= 1.0:
            raise ConfigError("alignable_frac must be within [0, 1]")
        if self.noise_sigma < 0 or self.jitter_s < 0 or self.C < 1 or self.n_videos < 0:
            raise ConfigError("noise_sigma, jitter_s, n_videos must be >= 0 and C >= 1")
        if not 1 <= self.narrations_per_step[0] <= self.narrations_per_step[1]:
            raise ConfigError("narrations_per_step must be a non-empty positive range")
        return self


def _unit(rng, n, C):
    x = rng.standard_normal((n, C))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tile_windows(rng, T: int, K: int, min_len: int = 2) -> list[TimeWindow]:
    """Split ``[0, T-1]`` into ``K`` contiguous windows of at least ``min_len`` seconds."""
    extra = T - K * min_len
    if extra < 0:
        raise ConfigError(f"cannot tile {T} s with {K} windows of >= {min_len} s")
    bars = np.sort(rng.choice(extra + K - 1, size=K - 1, replace=False)) if K > 1 else np.zeros(0, int)
    parts = np.diff(np.concatenate([[-1], bars, [extra + K - 1]])) - 1
    lengths = parts + min_len
    ends = np.cumsum(lengths) - 1
    starts = ends - lengths + 1
    return [TimeWindow(int(s), int(e)) for s, e in zip(starts, ends)]


def generate_video(config: SynthConfig, index: int) -> Video:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, index])))
    C, sigma = config.C, config.noise_sigma
    T = int(rng.integers(config.T_range[0], config.T_range[1] + 1))
    K = int(rng.integers(config.steps_per_video[0], config.steps_per_video[1] + 1))
    task = f"task-{int(rng.integers(config.n_tasks))}"
    vid = f"v{index:05d}"
    windows = tile_windows(rng, T, K)
    protos = _unit(rng, K, C)

    owner = np.empty(T, dtype=int)
    for k, w in enumerate(windows):
        owner[w.start:w.end + 1] = k
    video_rows = protos[owner] + sigma * rng.standard_normal((T, C))

    step_texts = [f"step-{k} of {task}" for k in range(K)]
    step_rows = protos + sigma * rng.standard_normal((K, C))
    steps = [Sentence(step_texts[k], windows[k], True, windows[k]) for k in range(K)]

    narr = []
    for k, w in enumerate(windows):
        for _ in range(int(rng.integers(config.narrations_per_step[0], config.narrations_per_step[1] + 1))):
            shift = int(rng.integers(-config.jitter_s, config.jitter_s + 1)) if config.jitter_s else 0
            s = min(max(w.start + shift, 0), T - 1)
            e = min(max(w.end + shift, 0), T - 1)
            alignable = bool(rng.random() < config.alignable_frac)
            if alignable:
                marker = DISCOURSE_MARKERS[int(rng.integers(len(DISCOURSE_MARKERS)))]
                text, row = marker + step_texts[k], protos[k] + sigma * rng.standard_normal(C)
                true = w
            else:
                text, row, true = FILLER[int(rng.integers(len(FILLER)))], _unit(rng, 1, C)[0], None
            narr.append((s, len(narr), Sentence(text, TimeWindow(s, e), alignable, true), row))
    narr.sort(key=lambda x: (x[0], x[1]))

    return Video(
        id=vid,
        duration_s=T,
        features=FeatureSequence(vid, "video", video_rows),
        tracks={
            "narration": TextTrack(vid, "narration", [n[2] for n in narr]),
            "step": TextTrack(vid, "step", steps),
        },
        text_features={
            "narration": FeatureSequence(f"{vid}.narration", "text", np.array([n[3] for n in narr])),
            "step": FeatureSequence(f"{vid}.step", "text", step_rows),
        },
        task_id=task,
    )


def generate(config: SynthConfig) -> Dataset:
    config.validate()
    return Dataset([generate_video(config, i) for i in range(config.n_videos)])


def split(dataset: Dataset, held_out_frac: float = 0.2) -> tuple[Dataset, Dataset]:
    """Deterministic train / held-out split: the last ``held_out_frac`` of videos are held out."""
    n_test = int(round(len(dataset) * held_out_frac))
    cut = len(dataset) - n_test
    return Dataset(dataset.videos[:cut]), Dataset(dataset.videos[cut:])


def raw_cosine(text_rows: np.ndarray, video_rows: np.ndarray) -> np.ndarray:
    a = text_rows / np.maximum(np.linalg.norm(text_rows, axis=1, keepdims=True), 1e-12)
    b = video_rows / np.maximum(np.linalg.norm(video_rows, axis=1, keepdims=True), 1e-12)
    return a @ b.T


def oracle_recall(dataset: Dataset, mode: str = "step") -> float:
    """R@1 of raw feature cosine (no model): the baseline any trained model should match."""
    from .evaluation import items_from_scores, recall_at_1

    items = []
    for v in dataset.videos:
        if mode not in v.text_features:
            continue
        S = raw_cosine(v.text_features[mode].rows, v.features.rows)
        items.append(items_from_scores(v, mode, S))
    return recall_at_1(items)
