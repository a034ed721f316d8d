"""Target-model and shadow-ensemble training.

Shadow models mirror the target's architecture and optimizer settings and are
trained on seeded random subsets of the attacker's public data; per-model
seeds are derived up front so parallel and sequential training agree.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import netcore
from .dataspace import LabeledDataset
from .errors import DataFormatError
from .netcore import LossSpec, MlpModel, OptConfig


def derive_seed(*parts: int) -> int:
    """Collapse an integer path like (run_seed, stage, index) into one seed.

    Uses SeedSequence hashing, so distinct paths give independent streams and
    the mapping is stable across platforms.
    """
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def train_target(priv: LabeledDataset, hidden: list[int], opt: OptConfig) -> MlpModel:
    """Train a classifier over the full label space on the private split."""
    model = netcore.init_mlp(priv.feature_dim, hidden, priv.class_count, seed=derive_seed(opt.seed, 0))
    loss = LossSpec("softmax_cross_entropy")
    trained, _ = netcore.train(model, priv.features, priv.labels, loss, opt)
    return trained


@dataclass
class ShadowEnsemble:
    """k shadow classifiers plus the boolean membership masks of their
    training subsets (mask[j, i] true means public row i trained model j)."""

    models: list[MlpModel]
    masks: np.ndarray  # (k, m) bool
    subset_fraction: float

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 2 or self.masks.shape[0] != len(self.models):
            raise ValueError("mask rows must match the model count")
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        if not 0.0 < self.subset_fraction < 1.0:
            raise ValueError("subset fraction must be in (0, 1)")

    @property
    def k(self) -> int:
        return len(self.models)


def train_shadow_ensemble(
    pub: LabeledDataset,
    k: int,
    subset_fraction: float,
    hidden: list[int],
    opt: OptConfig,
    seed: int,
) -> ShadowEnsemble:
    """Train k shadows on seeded random subsets of the public split.

    Every public row must end up outside at least one model's subset
    (otherwise its out-distribution is unobservable and fitting would be
    silently biased); that situation raises instead.
    """
    if k < 1:
        raise ValueError("need at least one shadow model")
    if not 0.0 < subset_fraction < 1.0:
        raise ValueError("subset fraction must be in (0, 1)")
    m = pub.size
    subset_size = int(round(subset_fraction * m))
    if subset_size < 1:
        raise ValueError("subset fraction leaves no training rows")
    # Draw every mask up front so the never-out check fails before any
    # training time is spent.
    masks = np.zeros((k, m), dtype=bool)
    for j in range(k):
        mask_rng = np.random.default_rng(derive_seed(seed, j, 0))
        rows = mask_rng.choice(m, size=subset_size, replace=False)
        masks[j, rows] = True
    never_out = masks.all(axis=0)
    if never_out.any():
        raise ValueError(
            f"{int(never_out.sum())} public rows are inside every shadow subset; "
            "increase k or lower the subset fraction"
        )
    models = []
    for j in range(k):
        model = netcore.init_mlp(
            pub.feature_dim, hidden, pub.class_count, seed=derive_seed(seed, j, 1)
        )
        sub_opt = OptConfig(
            algorithm=opt.algorithm,
            learning_rate=opt.learning_rate,
            batch_size=opt.batch_size,
            epochs=opt.epochs,
            beta1=opt.beta1,
            beta2=opt.beta2,
            epsilon=opt.epsilon,
            seed=derive_seed(seed, j, 2),
        )
        rows = np.flatnonzero(masks[j])
        trained, _ = netcore.train(
            model, pub.features[rows], pub.labels[rows], LossSpec("softmax_cross_entropy"), sub_opt
        )
        models.append(trained)
    return ShadowEnsemble(models, masks, subset_fraction)


def mean_label_probability(model: MlpModel, inputs: np.ndarray, label: int) -> float:
    """Average softmax probability the model assigns to one label over a batch."""
    logits = netcore.forward(model, np.atleast_2d(inputs))
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e[:, label] / e.sum(axis=1)
    return float(probs.mean())


# --- ensemble directory io -------------------------------------------------


def save_ensemble(ensemble: ShadowEnsemble, directory) -> None:
    """One checkpoint per model plus masks.txt ('k m' header, then k rows of
    0/1 flags)."""
    os.makedirs(directory, exist_ok=True)
    for j, model in enumerate(ensemble.models):
        netcore.save_model(model, os.path.join(directory, f"shadow_{j:03d}.ckpt"))
    k, m = ensemble.masks.shape
    lines = [f"{k} {m}"]
    for row in ensemble.masks:
        lines.append(" ".join("1" if v else "0" for v in row))
    frac_line = format(ensemble.subset_fraction, ".17g")
    with open(os.path.join(directory, "masks.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, "fraction.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(frac_line + "\n")


def load_ensemble(directory) -> ShadowEnsemble:
    mask_path = os.path.join(directory, "masks.txt")
    with open(mask_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{mask_path}: empty mask file")
    head = lines[0].split()
    if len(head) != 2:
        raise DataFormatError(f"{mask_path}: line 1: expected header 'k m'")
    try:
        k, m = int(head[0]), int(head[1])
    except ValueError as exc:
        raise DataFormatError(f"{mask_path}: line 1: non-integer header") from exc
    if len(lines) != k + 1:
        raise DataFormatError(f"{mask_path}: expected {k} mask rows, found {len(lines) - 1}")
    masks = np.zeros((k, m), dtype=bool)
    for j in range(k):
        vals = lines[j + 1].split()
        if len(vals) != m or any(v not in ("0", "1") for v in vals):
            raise DataFormatError(f"{mask_path}: line {j + 2}: expected {m} 0/1 flags")
        masks[j] = [v == "1" for v in vals]
    with open(os.path.join(directory, "fraction.txt"), "r", encoding="utf-8") as fh:
        fraction = float(fh.read().strip())
    models = [netcore.load_model(os.path.join(directory, f"shadow_{j:03d}.ckpt")) for j in range(k)]
    return ShadowEnsemble(models, masks, fraction)
