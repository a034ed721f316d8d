"""Labeled datasets: synthetic generation, stratified splits, class dropout,
per-class subsampling, and the text dataset format."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError


@dataclass
class LabeledDataset:
    """Feature matrix with integer labels drawn from range(class_count).

    The label space always covers all class_count classes even when some are
    absent from the rows (class dropout filters rows, never re-indexes).
    """

    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    class_count: int
    tag: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must be a vector matching the feature rows")
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError("dataset needs at least one row and one feature")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_rows(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def present_classes(self) -> list[int]:
        return sorted(int(v) for v in np.unique(self.labels))

    def take(self, idx: np.ndarray, tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            self.features[idx], self.labels[idx], self.class_count, self.tag if tag is None else tag
        )


def datasets_equal(a: LabeledDataset, b: LabeledDataset) -> bool:
    """Content equality (features, labels, class_count); tags are advisory."""
    return (
        a.class_count == b.class_count
        and a.features.shape == b.features.shape
        and np.array_equal(a.features, b.features)
        and np.array_equal(a.labels, b.labels)
    )


@dataclass(frozen=True)
class SynthConfig:
    """Gaussian-blob generator settings.

    Class means sit uniformly on the radius mean_radius sphere; each class
    draws its own isotropic noise scale uniformly from
    [spread_min, spread_max], so score distributions differ per class and
    per-example thresholds carry real signal.
    """

    classes: int = 8
    feature_dim: int = 16
    per_class: int = 500
    mean_radius: float = 2.0
    spread_min: float = 0.5
    spread_max: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.classes < 1 or self.feature_dim < 1 or self.per_class < 1:
            raise ValueError("classes, feature_dim and per_class must be positive")
        if self.mean_radius < 0:
            raise ValueError("mean_radius must be nonnegative")
        if self.spread_min < 0 or self.spread_max < self.spread_min:
            raise ValueError("need 0 <= spread_min <= spread_max")


@dataclass(frozen=True)
class ClassDropSpec:
    """Set of class labels removed from attacker-visible data."""

    dropped: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "dropped", frozenset(int(v) for v in self.dropped))

    def validate(self, class_count: int) -> None:
        if any(not 0 <= v < class_count for v in self.dropped):
            raise ValueError("dropped labels must lie in [0, class_count)")
        if len(self.dropped) >= class_count:
            raise ValueError("cannot drop every class")


def generate_synthetic(cfg: SynthConfig) -> LabeledDataset:
    """Deterministic blobs: same config, same bytes."""
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal((cfg.classes, cfg.feature_dim))
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    means = direction / norms * cfg.mean_radius
    spreads = rng.uniform(cfg.spread_min, cfg.spread_max, size=cfg.classes)
    feats = np.empty((cfg.classes * cfg.per_class, cfg.feature_dim))
    labels = np.empty(cfg.classes * cfg.per_class, dtype=np.int64)
    for c in range(cfg.classes):
        lo = c * cfg.per_class
        hi = lo + cfg.per_class
        feats[lo:hi] = means[c] + spreads[c] * rng.standard_normal((cfg.per_class, cfg.feature_dim))
        labels[lo:hi] = c
    return LabeledDataset(feats, labels, cfg.classes, tag="synth")


def split(
    data: LabeledDataset,
    fractions: list[float],
    seed: int,
    names: list[str] | None = None,
) -> list[LabeledDataset]:
    """Stratified split: each class is permuted (seeded) and allocated to the
    parts by largest remainder, so per-class counts stay within one row of
    fraction * class size. Fractions must be positive and sum to at most 1
    (any remainder is discarded)."""
    fracs = [float(f) for f in fractions]
    if not fracs:
        raise ValueError("need at least one fraction")
    if any(f <= 0 for f in fracs):
        raise ValueError("fractions must be positive")
    if sum(fracs) > 1.0 + 1e-9:
        raise ValueError("fractions sum to more than 1")
    if names is not None and len(names) != len(fracs):
        raise ValueError("names must match fractions")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in fracs]
    for c in range(data.class_count):
        rows = data.class_rows(c)
        if rows.size == 0:
            continue
        perm = rows[rng.permutation(rows.size)]
        targets = [f * rows.size for f in fracs]
        counts = [int(math.floor(t)) for t in targets]
        leftover = (int(round(sum(targets))) if abs(sum(fracs) - 1.0) < 1e-9 else int(math.floor(sum(targets)))) - sum(counts)
        order = sorted(range(len(fracs)), key=lambda j: targets[j] - counts[j], reverse=True)
        for j in order[:leftover]:
            counts[j] += 1
        pos = 0
        for j, k in enumerate(counts):
            buckets[j].append(perm[pos : pos + k])
            pos += k
    out = []
    for j, parts in enumerate(buckets):
        idx = np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)
        if idx.size == 0:
            raise ValueError(f"split part {j} received no rows; dataset too small for fraction {fracs[j]}")
        tag = names[j] if names else f"{data.tag}:part{j}"
        out.append(data.take(idx, tag=tag))
    return out


def drop_classes(data: LabeledDataset, spec: ClassDropSpec) -> LabeledDataset:
    """Remove rows whose label is in the dropped set; labels keep their ids."""
    spec.validate(data.class_count)
    keep = ~np.isin(data.labels, sorted(spec.dropped))
    if not keep.any():
        raise ValueError("dropping these classes would empty the dataset")
    return data.take(np.flatnonzero(keep), tag=data.tag)


def subsample_per_class(data: LabeledDataset, k: int, seed: int) -> LabeledDataset:
    """Keep at most k seeded-uniform rows per class, preserving row order.

    k at or above every class size returns the dataset unchanged (clamping,
    not an error)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(data.class_count):
        rows = data.class_rows(c)
        if rows.size == 0:
            continue
        if rows.size <= k:
            chosen.append(rows)
        else:
            pick = rng.choice(rows.size, size=k, replace=False)
            chosen.append(rows[pick])
    idx = np.sort(np.concatenate(chosen))
    return data.take(idx, tag=data.tag)


# --- text dataset format --------------------------------------------------


def save_dataset(data: LabeledDataset, path) -> None:
    """UTF-8 text: first line 'n d c', then one row per line with d features
    at 17 significant digits followed by the integer label. LF endings, no
    trailing whitespace."""
    lines = [f"{data.size} {data.feature_dim} {data.class_count}"]
    for row, label in zip(data.features, data.labels):
        lines.append(" ".join(format(float(v), ".17g") for v in row) + f" {int(label)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path, tag: str | None = None) -> LabeledDataset:
    """Parse a dataset file; errors name the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def fail(lineno: int, msg: str):
        raise DataFormatError(f"{path}: line {lineno + 1}: {msg}")

    if not lines:
        raise DataFormatError(f"{path}: empty dataset file")
    head = lines[0].split()
    if len(head) != 3:
        fail(0, "expected header 'n d c'")
    try:
        n, d, c = (int(v) for v in head)
    except ValueError:
        fail(0, "non-integer header field")
    if n < 1 or d < 1 or c < 1:
        fail(0, "header fields must be positive")
    if len(lines) != n + 1:
        fail(len(lines) - 1, f"expected {n} data rows, found {len(lines) - 1}")
    feats = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        vals = lines[i + 1].split()
        if len(vals) != d + 1:
            fail(i + 1, f"expected {d} features plus a label")
        try:
            feats[i] = [float(v) for v in vals[:d]]
        except ValueError:
            fail(i + 1, "non-numeric feature")
        if not np.isfinite(feats[i]).all():
            fail(i + 1, "non-finite feature")
        try:
            labels[i] = int(vals[d])
        except ValueError:
            fail(i + 1, "non-integer label")
        if not 0 <= labels[i] < c:
            fail(i + 1, f"label {labels[i]} outside [0, {c})")
    if tag is None:
        tag = getattr(path, "stem", None) or str(path)
    return LabeledDataset(feats, labels, c, tag=tag)
