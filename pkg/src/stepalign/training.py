from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datamodel import AlignmentMatrix, Dataset, TextTrack, gt_matrix_from_windows
from .model import NaSVA
from .numerics import (
    AdamWState,
    ConfigError,
    Tensor,
    adamw_step,
    cosine_lr,
    cross_entropy,
    logsumexp,
    make_rng,
    mean,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tau: float = 0.07
    lr0: float = 1e-4
    epochs: int = 12
    batch_size: int = 8
    max_video_s: int = 1200
    narration_prob: float = 0.5
    lambda_alignability: float = 0.0
    weight_decay: float = 0.01
    rotate_features: bool = False
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if not 0.0 <= self.narration_prob <= 1.0:
            raise ConfigError("narration_prob must be within [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.max_video_s < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and max_video_s >= 1 required")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be >= 0")
        return self


@dataclass
class LossResult:
    loss: Tensor
    no_positives: bool
    n_rows: int


def infonce_loss(A: Tensor, Y, tau: float) -> LossResult:
    """Multi-positive contrastive loss over time, averaged over rows with any positive.

    For each sentence ``k``: ``-log(sum_t Y[k,t] exp(A[k,t]/tau) / sum_t exp(A[k,t]/tau))``.
    Rows of ``Y`` that are all zero carry no target and are dropped from the mean.
    """
    Y = Y.values if isinstance(Y, AlignmentMatrix) else np.asarray(Y, dtype=float)
    if A.shape != Y.shape:
        raise ValueError(f"score matrix {A.shape} and targets {Y.shape} differ")
    keep = np.flatnonzero(Y.sum(axis=1) > 0)
    if keep.size == 0:
        return LossResult(Tensor(0.0), True, 0)
    logits = A[keep] * (1.0 / tau)
    pos = logsumexp(logits, axis=1, weights=Y[keep])
    total = logsumexp(logits, axis=1)
    return LossResult(mean(total - pos), False, int(keep.size))


@dataclass
class Sample:
    video_id: str
    x_v: np.ndarray
    x_j: np.ndarray
    Y: np.ndarray
    mode: str
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def random_rotation(rng, n: int) -> np.ndarray:
    """Haar-distributed n x n orthogonal matrix (QR of a Gaussian with sign correction)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def sample_from_video(video, mode: str, config: TrainConfig, rng=None, use_true: bool = False) -> Sample:
    """Build one (possibly truncated, possibly shuffled) training sample.

    With ``config.rotate_features`` both feature streams are multiplied by one shared random
    rotation, which keeps every video/text cosine intact but stops the network from memorising
    absolute feature directions. Only sensible when video and text share an embedding space.
    """
    track: TextTrack = video.tracks[mode]
    T_full = video.features.length
    Y = gt_matrix_from_windows(track, T_full, use_true=use_true).values
    T = min(T_full, config.max_video_s)
    x_v = video.features.rows[:T]
    Y = Y[:, :T]
    x_j = video.text_features[mode].rows
    order = np.arange(len(track))
    if mode == "step" and rng is not None:
        order = rng.permutation(len(track))
    x_j = x_j[order]
    if config.rotate_features and rng is not None:
        if x_v.shape[1] != x_j.shape[1]:
            raise ConfigError("rotate_features needs equal video and text feature dims")
        R = random_rotation(rng, x_v.shape[1])
        x_v, x_j = x_v @ R, x_j @ R
    return Sample(video.id, x_v, x_j, Y[order], mode, order)


def make_batches(dataset: Dataset, rng, config: TrainConfig, use_true: bool = False):
    """Yield lists of samples covering every video once, in a seeded random order.

    Each sample is tagged narration with probability ``narration_prob`` (falling back to
    whichever track the video has). Step samples are shuffled; narration samples are not.
    """
    videos = [v for v in dataset.videos if v.tracks]
    order = rng.permutation(len(videos))
    batch = []
    for i in order:
        v = videos[i]
        mode = "narration" if rng.random() < config.narration_prob else "step"
        if mode not in v.text_features:
            mode = "step" if mode == "narration" else "narration"
        if mode not in v.text_features:
            continue
        batch.append(sample_from_video(v, mode, config, rng, use_true))
        if len(batch) == config.batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


def make_batch(dataset: Dataset, rng, config: TrainConfig, use_true: bool = False):
    """First batch of a fresh epoch (convenience wrapper around :func:`make_batches`)."""
    return next(make_batches(dataset, rng, config, use_true), [])


def sample_loss(model: NaSVA, s: Sample, config: TrainConfig) -> LossResult:
    A, y_hat = model.forward(Tensor(s.x_v), Tensor(s.x_j), s.mode)
    res = infonce_loss(A, s.Y, config.tau)
    if config.lambda_alignability > 0:
        labels = (s.Y.sum(axis=1) > 0).astype(int)
        res.loss = res.loss + cross_entropy(y_hat, labels) * config.lambda_alignability
    return res


def train(dataset: Dataset, model: NaSVA, config: TrainConfig, use_true: bool = False,
          state: AdamWState | None = None):
    """Train ``model`` in place. Returns ``(model, curve)``, ``curve`` holding
    ``(epoch, mean_loss, lr)`` per epoch."""
    config.validate()
    rng = make_rng(config.seed)
    n = sum(1 for v in dataset.videos if v.text_features)
    if n == 0:
        raise TrainingError("no trainable videos in dataset")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = max(1, steps_per_epoch * config.epochs)
    state = state or AdamWState(lr0=config.lr0, weight_decay=config.weight_decay)
    params = model.parameters()
    model.dropout_rng = make_rng(config.seed + 1) if model.config.dropout > 0 else None
    step = 0
    curve = []
    for epoch in range(config.epochs):
        losses = []
        lr = config.lr0
        for batch in make_batches(dataset, rng, config, use_true):
            model.zero_grad()
            for s in batch:
                res = sample_loss(model, s, config)
                if res.no_positives and config.lambda_alignability == 0:
                    continue
                val = res.loss.item()
                if not math.isfinite(val):
                    raise TrainingError(
                        f"non-finite loss in epoch {epoch}; batch videos: {[b.video_id for b in batch]}")
                (res.loss * (1.0 / len(batch))).backward()
                losses.append(val)
            lr = cosine_lr(step, total, config.lr0)
            adamw_step(params, state, lr)
            step += 1
        mean_loss = float(np.mean(losses)) if losses else 0.0
        curve.append((epoch, mean_loss, lr))
        log.info("epoch %d loss %.6f lr %.3g", epoch, mean_loss, lr)
    model.dropout_rng = None
    return model, curve
