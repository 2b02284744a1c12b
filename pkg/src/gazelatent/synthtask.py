"""Synthetic recognition task with per-timestep informative cells.

Each example is a T x H x W grid of feature vectors: i.i.d. standard normal
background, plus a fixed per-class token added at one "true gaze" cell per
timestep, scaled by a signal strength. The annotated gaze equals the true
gaze except that each timestep is independently corrupted with a configured
rate, landing uniformly on one of the other cells. Corruption is
per-timestep, so one example can mix informative and misleading annotations.

Two closed-form probes calibrate the task: a cheat classifier that reads the
true-gaze cells (matched filter, Bayes-optimal here) and a gaze-blind
classifier on mean-pooled features, whose accuracy dilutes as the grid grows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gazelatent.gumbel import substream
from gazelatent.latent import LatentSpaceDims, trace_from_json, trace_to_json

_EMBED_DOMAIN = 0xE3B
_SPLIT_DOMAIN = {"train": 0x7A, "test": 0x7E}


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class TaskConfig:
    t: int = 3
    h: int = 7
    w: int = 7
    feat: int = 16
    classes: int = 10
    train_size: int = 4000
    test_size: int = 1000
    signal: float = 2.0
    gaze_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.t, self.h, self.w, self.feat, self.classes) < 1:
            raise ValueError("dims and class count must be positive")
        if self.h * self.w < 2:
            raise ValueError("grid needs at least 2 cells for corruption to target")
        if not 0.0 <= self.gaze_noise <= 1.0:
            raise ValueError(f"gaze_noise must lie in [0, 1], got {self.gaze_noise}")
        if self.signal <= 0:
            raise ValueError(f"signal must be positive, got {self.signal}")
        if self.classes > self.feat:
            raise ValueError("classes must not exceed feature width (token capacity)")
        if self.train_size < 0 or self.test_size < 0:
            raise ValueError("dataset sizes must be non-negative")

    @property
    def dims(self) -> LatentSpaceDims:
        return LatentSpaceDims(self.t, self.h, self.w)


@dataclass
class Example:
    id: int
    x: np.ndarray  # (T, H, W, F)
    y: int
    gaze_true: np.ndarray  # (T, 2)
    gaze_gt: np.ndarray  # (T, 2)


def class_embeddings(cfg: TaskConfig) -> np.ndarray:
    """(C, F) fixed orthonormal token rows, deterministic given the seed."""
    rng = substream(cfg.seed, _EMBED_DOMAIN)
    q, r = np.linalg.qr(rng.normal(size=(cfg.feat, cfg.feat)))
    q = q * np.sign(np.diag(r))  # fix the QR sign convention
    return q[:, :cfg.classes].T


def _generate_split(cfg: TaskConfig, split: str, n: int, id_offset: int) -> list[Example]:
    rng = substream(cfg.seed, _SPLIT_DOMAIN[split])
    emb = class_embeddings(cfg)
    hw = cfg.h * cfg.w
    ys = rng.permutation(np.arange(n) % cfg.classes)
    true_flat = rng.integers(0, hw, size=(n, cfg.t))
    corrupt = rng.random((n, cfg.t)) < cfg.gaze_noise
    alt = rng.integers(0, hw - 1, size=(n, cfg.t))
    gt_flat = np.where(corrupt, alt + (alt >= true_flat), true_flat)
    x = rng.normal(size=(n, cfg.t, cfg.h, cfg.w, cfg.feat))
    rows_n = np.arange(n)[:, None]
    rows_t = np.arange(cfg.t)[None, :]
    x[rows_n, rows_t, true_flat // cfg.w, true_flat % cfg.w] += cfg.signal * emb[ys][:, None, :]
    examples = []
    for i in range(n):
        examples.append(Example(
            id=id_offset + i,
            x=x[i],
            y=int(ys[i]),
            gaze_true=np.stack([true_flat[i] // cfg.w, true_flat[i] % cfg.w], axis=-1),
            gaze_gt=np.stack([gt_flat[i] // cfg.w, gt_flat[i] % cfg.w], axis=-1),
        ))
    return examples


def generate_dataset(cfg: TaskConfig) -> tuple[list[Example], list[Example]]:
    """Deterministic train/test splits, class-balanced within one example."""
    train = _generate_split(cfg, "train", cfg.train_size, 0)
    test = _generate_split(cfg, "test", cfg.test_size, cfg.train_size)
    return train, test


def stack_examples(examples: list[Example]):
    """Columnar views: x (N,T,H,W,F), y (N,), gaze_true/gaze_gt (N,T,2)."""
    xs = np.stack([e.x for e in examples])
    ys = np.array([e.y for e in examples], dtype=np.int64)
    gt_true = np.stack([e.gaze_true for e in examples])
    gt_ann = np.stack([e.gaze_gt for e in examples])
    return xs, ys, gt_true, gt_ann


# ---------------------------------------------------------------------------
# metrics and calibration probes


def gaze_hit_rate(pred, truth, radius: int = 0) -> float:
    """Fraction of timesteps with Chebyshev distance <= radius to the truth."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"gaze traces disagree in shape: {pred.shape} vs {truth.shape}")
    cheb = np.abs(pred - truth).max(axis=-1)
    return float((cheb <= radius).mean())


def cheat_classifier_accuracy(examples: list[Example], cfg: TaskConfig) -> float:
    """Matched filter at the true-gaze cells; Bayes-optimal for this generator."""
    emb = class_embeddings(cfg)
    xs, ys, gt_true, _ = stack_examples(examples)
    rows_n = np.arange(len(examples))[:, None]
    rows_t = np.arange(cfg.t)[None, :]
    picked = xs[rows_n, rows_t, gt_true[..., 0], gt_true[..., 1]]  # (N, T, F)
    scores = picked.sum(axis=1) @ emb.T
    return float((scores.argmax(axis=-1) == ys).mean())


def blind_classifier_accuracy(examples: list[Example], cfg: TaskConfig) -> float:
    """Matched filter on mean-pooled features; dilutes as the grid grows."""
    emb = class_embeddings(cfg)
    xs, ys, _, _ = stack_examples(examples)
    scores = xs.mean(axis=(1, 2, 3)) @ emb.T
    return float((scores.argmax(axis=-1) == ys).mean())


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(path, examples: list[Example], cfg: TaskConfig) -> None:
    """One JSON object per line; floats round-trip exactly via repr."""
    shape = [cfg.t, cfg.h, cfg.w, cfg.feat]
    with open(path, "w") as f:
        for e in examples:
            f.write(json.dumps({
                "id": e.id,
                "x": e.x.ravel().tolist(),
                "shape": shape,
                "y": e.y,
                "gaze_true": trace_to_json(e.gaze_true),
                "gaze_gt": trace_to_json(e.gaze_gt),
            }) + "\n")


def load_dataset(path, cfg: TaskConfig) -> list[Example]:
    """Read and validate a dataset file against the task dimensions."""
    expect_shape = [cfg.t, cfg.h, cfg.w, cfg.feat]
    examples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if doc.get("shape") != expect_shape:
                raise DatasetFormatError(
                    f"{path}:{lineno}: shape {doc.get('shape')} != {expect_shape}")
            x = np.asarray(doc["x"], dtype=np.float64)
            if x.size != np.prod(expect_shape):
                raise DatasetFormatError(f"{path}:{lineno}: flat array has {x.size} entries")
            if not np.all(np.isfinite(x)):
                raise DatasetFormatError(f"{path}:{lineno}: non-finite features")
            y = int(doc["y"])
            if not 0 <= y < cfg.classes:
                raise DatasetFormatError(f"{path}:{lineno}: label {y} out of range")
            try:
                gaze_true = trace_from_json(doc["gaze_true"], cfg.dims)
                gaze_gt = trace_from_json(doc["gaze_gt"], cfg.dims)
            except ValueError as e:
                raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
            examples.append(Example(
                id=int(doc["id"]), x=x.reshape(expect_shape), y=y,
                gaze_true=gaze_true, gaze_gt=gaze_gt,
            ))
    return examples
