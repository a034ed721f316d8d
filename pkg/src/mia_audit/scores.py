"""Membership score functions computed from target-model logits.

All scores are orientation-consistent (larger means more member-like) and
invariant to adding a constant to every logit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCORE_KINDS = ("true_label_margin", "top_two_margin", "true_label_confidence")

DEFAULT_CLIP_EPSILON = 1e-6


def true_label_margin(logits: np.ndarray, label: int) -> float:
    """Logit of the true label minus the best other logit."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError("need a logit vector with at least two classes")
    y = int(label)
    if not 0 <= y < z.shape[0]:
        raise ValueError("label out of range")
    rest = np.delete(z, y)
    return float(z[y] - rest.max())


def top_two_margin(logits: np.ndarray) -> float:
    """Gap between the largest and second-largest logit; label-free, so it
    works on examples whose class the attacker has never seen."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError("need a logit vector with at least two classes")
    top = np.partition(z, -2)[-2:]
    return float(top[1] - top[0])


def true_label_confidence(logits: np.ndarray, label: int, clip_epsilon: float = DEFAULT_CLIP_EPSILON) -> float:
    """Logit transform log(p / (1 - p)) of the true-label softmax probability,
    with p clipped to [clip_epsilon, 1 - clip_epsilon] to keep it finite."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ValueError("need a logit vector with at least two classes")
    y = int(label)
    if not 0 <= y < z.shape[0]:
        raise ValueError("label out of range")
    if not 0.0 < clip_epsilon < 0.5:
        raise ValueError("clip_epsilon must be in (0, 0.5)")
    shifted = z - z.max()
    e = np.exp(shifted)
    p = float(e[y] / e.sum())
    p = min(max(p, clip_epsilon), 1.0 - clip_epsilon)
    return float(np.log(p / (1.0 - p)))


@dataclass(frozen=True)
class ScoreFn:
    """A named score function plus its clipping constant."""

    kind: str
    clip_epsilon: float = DEFAULT_CLIP_EPSILON

    def __post_init__(self):
        if self.kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.kind!r}")
        if not 0.0 < self.clip_epsilon < 0.5:
            raise ValueError("clip_epsilon must be in (0, 0.5)")

    @property
    def needs_label(self) -> bool:
        return self.kind != "top_two_margin"

    def __call__(self, logits: np.ndarray, label: int | None = None) -> float:
        if self.kind == "top_two_margin":
            return top_two_margin(logits)
        if label is None:
            raise ValueError(f"score {self.kind!r} needs a label")
        if self.kind == "true_label_margin":
            return true_label_margin(logits, label)
        return true_label_confidence(logits, label, self.clip_epsilon)


def batch_scores(fn: ScoreFn, logits: np.ndarray, labels: np.ndarray | None = None) -> np.ndarray:
    """Vectorized scores for a logit matrix (n, c)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ValueError("need a logit matrix with at least two classes")
    n = z.shape[0]
    if fn.kind == "top_two_margin":
        top = np.partition(z, -2, axis=1)[:, -2:]
        return top[:, 1] - top[:, 0]
    if labels is None:
        raise ValueError(f"score {fn.kind!r} needs labels")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ValueError("labels must match the logit rows")
    if n and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValueError("label out of range")
    rows = np.arange(n)
    if fn.kind == "true_label_margin":
        masked = z.copy()
        masked[rows, y] = -np.inf
        return z[rows, y] - masked.max(axis=1)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e[rows, y] / e.sum(axis=1)
    p = np.clip(p, fn.clip_epsilon, 1.0 - fn.clip_epsilon)
    return np.log(p / (1.0 - p))
