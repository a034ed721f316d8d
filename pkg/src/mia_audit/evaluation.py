"""ROC computation and the two experiment protocols (class dropout and
sample scarcity).

The protocols are organized as independent per-seed cells: a cell generates
its own data, trains the target, fits every requested attack, and scores a
balanced member/nonmember query set. Cells are pure functions of
(config, seed), so they can run in a process pool and still assemble into
byte-identical reports.

Reported metrics are TPR at fixed FPR targets read off exact ROC sweeps, per
class and pooled into three groups: "seen" (classes the attacker's public
data contains), "unseen" (the dropped classes), and "combined".
"""

from __future__ import annotations

import json
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore
from .attacks import (
    Attack,
    LiraOfflineAttack,
    MarginalAttack,
    QuantileAttack,
    lira_calibrate,
    lira_fit,
    lira_z_scores,
    marginal_fit,
    qr_thresholds,
    qr_train,
)
from .dataspace import (
    ClassDropSpec,
    LabeledDataset,
    SynthConfig,
    drop_classes,
    generate_synthetic,
    load_dataset,
    split,
    subsample_per_class,
)
from .errors import ConfigError
from .netcore import MlpModel, OptConfig
from .scores import SCORE_KINDS, ScoreFn, batch_scores
from .target import derive_seed, train_shadow_ensemble, train_target

# priv (target training), pub (attacker fitting), cal (shadow-threshold
# calibration), holdout (nonmember queries)
SPLIT_FRACTIONS = (0.5, 0.25, 0.1, 0.15)
ATTACK_NAMES = ("marginal", "shadow", "quantile")
FULL_SENTINEL = "full"


def _fkey(x: float) -> str:
    return format(float(x), "g")


# --- roc ---------------------------------------------------------------------


@dataclass(frozen=True)
class RocCurve:
    """Exact ROC over every distinct score threshold, descending, plus a
    final -inf sentinel so the curve always ends at (1, 1)."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    n_member: int
    n_nonmember: int

    def __post_init__(self):
        for name in ("fpr", "tpr"):
            v = getattr(self, name)
            if np.any(np.diff(v) < 0):
                raise ValueError(f"{name} must be nondecreasing along the sweep")
        if self.fpr[0] != 0.0 or self.tpr[0] != 0.0 or self.fpr[-1] != 1.0 or self.tpr[-1] != 1.0:
            raise ValueError("curve must run from (0, 0) to (1, 1)")


def roc_curve(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> RocCurve:
    """Sweep "member iff score > t" over all distinct observed scores.

    Tied scores move atomically: a value present on both sides advances TPR
    and FPR in the same step. Counts are divided directly (never via 1 - x),
    so an FPR that is exactly a round fraction compares clean against the
    matching float literal.
    """
    m = np.asarray(member_scores, dtype=np.float64).ravel()
    nm = np.asarray(nonmember_scores, dtype=np.float64).ravel()
    if m.size == 0 or nm.size == 0:
        raise ValueError("roc needs at least one score on each side")
    thresholds = np.unique(np.concatenate([m, nm]))[::-1]
    thresholds = np.append(thresholds, -np.inf)
    ms = np.sort(m)
    ns = np.sort(nm)
    tp = m.size - np.searchsorted(ms, thresholds, side="right")
    fp = nm.size - np.searchsorted(ns, thresholds, side="right")
    return RocCurve(thresholds, fp / nm.size, tp / m.size, int(m.size), int(nm.size))


def tpr_at_fpr(curve: RocCurve, fpr_target: float) -> float:
    """Largest TPR whose empirical FPR does not exceed the target.

    Conservative by construction: no interpolation between achievable
    operating points, so the reported TPR is always actually attainable.
    """
    if not 0.0 < fpr_target < 1.0:
        raise ValueError("fpr_target must be in (0, 1)")
    idx = int(np.searchsorted(curve.fpr, fpr_target, side="right")) - 1
    return float(curve.tpr[idx])


# --- experiment configuration -------------------------------------------------


@dataclass(frozen=True)
class AuditConfig:
    """Every knob for the desk experiments, with defaults sized so the full
    five-seed class-dropout grid stays in the minutes range on one core."""

    experiment: str = "class_dropout"
    # synthetic data; spreads sized so the class blobs overlap enough that a
    # memorizing target carries real membership signal
    classes: int = 8
    feature_dim: int = 16
    per_class: int = 500
    mean_radius: float = 2.0
    spread_min: float = 1.0
    spread_max: float = 2.5
    # threat model and metrics
    dropped_classes: tuple[int, ...] = (7,)
    alpha: float = 0.05
    fpr_targets: tuple[float, ...] = (0.05, 0.01)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    attacks: tuple[str, ...] = ATTACK_NAMES
    # target and shadow training (shadows mirror the target's recipe); wide
    # enough and long enough that the target memorizes its training rows
    hidden: tuple[int, ...] = (128,)
    epochs: int = 300
    learning_rate: float = 0.01
    batch_size: int = 64
    algorithm: str = "adam"
    shadow_count: int = 16
    shadow_fraction: float = 0.5
    # quantile regressor; kept small so the learned threshold stays smooth
    # where the attacker has no data and still extrapolates sanely
    qr_hidden: tuple[int, ...] = (8,)
    qr_epochs: int = 150
    qr_learning_rate: float = 0.01
    qr_batch_size: int = 64
    qr_mode: str = "gaussian"
    # score functions: margins are unbounded, so heavily memorized rows keep
    # a usable ranking instead of piling up at a clipped ceiling; the shadow
    # attack keeps the clipped confidence score its z-statistic is built on
    marginal_score: str = "true_label_margin"
    shadow_score: str = "true_label_confidence"
    qr_score: str = "true_label_margin"
    clip_epsilon: float = 1e-6
    # sample scarcity sweep; ints or the sentinel string "full"
    scarcity_ks: tuple = (1, 10, FULL_SENTINEL)
    # transfer diagnostics
    transfer_n: int = 10000
    gmm_components: int = 3
    # orchestration
    workers: int = 1
    out_dir: str = "out"
    # optional dataset file; when set, the pool is loaded instead of generated
    data_path: str | None = None

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.experiment not in ("class_dropout", "sample_scarcity", "transfer_diagnostics", "single_attack"):
            bad(f"unknown experiment {self.experiment!r}")
        if self.classes < 2:
            bad("classes must be at least 2")
        if self.feature_dim < 1 or self.per_class < 4:
            bad("feature_dim must be positive and per_class at least 4")
        if self.spread_min < 0 or self.spread_max < self.spread_min:
            bad("need 0 <= spread_min <= spread_max")
        drops = set(self.dropped_classes)
        if not drops <= set(range(self.classes)):
            bad(f"dropped_classes {sorted(drops)} outside the label range")
        if len(drops) >= self.classes:
            bad("cannot drop every class")
        if not 0.0 < self.alpha < 1.0:
            bad("alpha must be in (0, 1)")
        if not self.fpr_targets or any(not 0.0 < t < 1.0 for t in self.fpr_targets):
            bad("fpr_targets must be nonempty and inside (0, 1)")
        if not self.seeds:
            bad("seeds must be nonempty")
        if not self.attacks or any(a not in ATTACK_NAMES for a in self.attacks):
            bad(f"attacks must be a nonempty subset of {ATTACK_NAMES}")
        if self.epochs < 0 or self.qr_epochs < 0:
            bad("epoch counts cannot be negative")
        if self.learning_rate <= 0 or self.qr_learning_rate <= 0:
            bad("learning rates must be positive")
        if self.batch_size < 1 or self.qr_batch_size < 1:
            bad("batch sizes must be at least 1")
        if self.algorithm not in ("sgd", "adam"):
            bad(f"unknown optimizer {self.algorithm!r}")
        if self.shadow_count < 1 or not 0.0 < self.shadow_fraction < 1.0:
            bad("need shadow_count >= 1 and shadow_fraction in (0, 1)")
        if self.qr_mode not in ("gaussian", "pinball"):
            bad(f"unknown qr_mode {self.qr_mode!r}")
        for kind in (self.marginal_score, self.shadow_score, self.qr_score):
            if kind not in SCORE_KINDS:
                bad(f"unknown score kind {kind!r}")
        if not 0.0 < self.clip_epsilon < 0.5:
            bad("clip_epsilon must be in (0, 0.5)")
        for k in self.scarcity_ks:
            if k == FULL_SENTINEL:
                continue
            if not isinstance(k, int) or k < 1:
                bad(f"scarcity_ks entries must be positive integers or 'full', got {k!r}")
        if not self.scarcity_ks:
            bad("scarcity_ks must be nonempty")
        if self.transfer_n < 100:
            bad("transfer_n must be at least 100")
        if self.gmm_components < 1:
            bad("gmm_components must be at least 1")
        if self.workers < 1:
            bad("workers must be at least 1")

    def opt(self, seed: int) -> OptConfig:
        return OptConfig(
            algorithm=self.algorithm,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
        )

    def qr_opt(self, seed: int) -> OptConfig:
        return OptConfig(
            algorithm=self.algorithm,
            learning_rate=self.qr_learning_rate,
            batch_size=self.qr_batch_size,
            epochs=self.qr_epochs,
            seed=seed,
        )


# --- per-seed cells -----------------------------------------------------------


@dataclass
class QuerySet:
    """Balanced member/nonmember queries for one class."""

    label: int
    member_features: np.ndarray
    nonmember_features: np.ndarray


@dataclass
class DropoutCell:
    """Everything a single (config, seed) cell trains and queries; kept
    around so tests and the CLI stages can inspect intermediate state."""

    seed: int
    target: MlpModel
    attacks: dict[str, Attack]
    queries: dict[int, QuerySet]
    priv: LabeledDataset
    pub_attacker: LabeledDataset
    cal_attacker: LabeledDataset
    holdout: LabeledDataset


def load_pool(cfg: AuditConfig) -> LabeledDataset:
    """The configured dataset file, checked against the config's shape."""
    data = load_dataset(cfg.data_path)
    if data.class_count != cfg.classes or data.features.shape[1] != cfg.feature_dim:
        raise ConfigError(
            f"dataset at {cfg.data_path} has {data.class_count} classes x "
            f"{data.features.shape[1]} features, config says {cfg.classes} x {cfg.feature_dim}"
        )
    return data


def split_pool(cfg: AuditConfig, seed: int):
    """Pool -> (private, attacker-public, attacker-calibration, holdout),
    with the dropped classes removed from the attacker-side splits."""
    if cfg.data_path is not None:
        data = load_pool(cfg)
    else:
        synth = SynthConfig(
            classes=cfg.classes,
            feature_dim=cfg.feature_dim,
            per_class=cfg.per_class,
            mean_radius=cfg.mean_radius,
            spread_min=cfg.spread_min,
            spread_max=cfg.spread_max,
            seed=derive_seed(seed, 1),
        )
        data = generate_synthetic(synth)
    priv, pub, cal, holdout = split(data, list(SPLIT_FRACTIONS), seed=derive_seed(seed, 2))
    if cfg.dropped_classes:
        drop = ClassDropSpec(frozenset(cfg.dropped_classes))
        pub_att = drop_classes(pub, drop)
        cal_att = drop_classes(cal, drop)
    else:
        pub_att, cal_att = pub, cal
    return priv, pub_att, cal_att, holdout


def _shadow_ensemble_with_retry(cfg: AuditConfig, seed: int, pub_att: LabeledDataset):
    """Train the shadow ensemble, redrawing masks on a derived seed when a
    public row lands inside every subset.

    The ensemble trainer treats a never-out row as a hard error (its sigma
    estimate would be silently biased). On small public splits, e.g. the
    k=1 scarcity cell, such draws have nonvanishing probability, so the
    protocol deterministically walks attempt-indexed seeds instead of dying.
    """
    last_exc = None
    for attempt in range(20):
        try:
            return train_shadow_ensemble(
                pub_att,
                cfg.shadow_count,
                cfg.shadow_fraction,
                list(cfg.hidden),
                cfg.opt(seed=0),  # per-model seeds are derived inside
                seed=derive_seed(seed, 4, attempt),
            )
        except ValueError as exc:
            if "shadow subset" not in str(exc):
                raise
            last_exc = exc
    raise ValueError(f"shadow mask drawing failed 20 times: {last_exc}")


def fit_attacks(
    cfg: AuditConfig,
    seed: int,
    target: MlpModel,
    pub_att: LabeledDataset,
    cal_att: LabeledDataset,
) -> dict[str, Attack]:
    """Fit every requested attack on the attacker-side splits."""
    out: dict[str, Attack] = {}
    for name in cfg.attacks:
        if name == "marginal":
            fn = ScoreFn(cfg.marginal_score, cfg.clip_epsilon)
            logits = netcore.forward(target, pub_att.features)
            s = batch_scores(fn, logits, pub_att.labels if fn.needs_label else None)
            out[name] = marginal_fit(s, cfg.alpha, fn)
        elif name == "shadow":
            fn = ScoreFn(cfg.shadow_score, cfg.clip_epsilon)
            ensemble = _shadow_ensemble_with_retry(cfg, seed, pub_att)
            attack = lira_fit(ensemble, pub_att, fn)
            z = lira_z_scores(attack, target, cal_att.features, cal_att.labels)
            out[name] = lira_calibrate(attack, z, cfg.alpha)
        elif name == "quantile":
            fn = ScoreFn(cfg.qr_score, cfg.clip_epsilon)
            out[name] = qr_train(
                pub_att,
                target,
                fn,
                cfg.qr_mode,
                cfg.alpha,
                list(cfg.qr_hidden),
                cfg.qr_opt(seed=derive_seed(seed, 5)),
            )
        else:
            raise ConfigError(f"unknown attack {name!r}")
    return out


def _build_queries(cfg: AuditConfig, seed: int, priv: LabeledDataset, holdout: LabeledDataset) -> dict[int, QuerySet]:
    """Per class, an equal count of members (target training rows) and
    nonmembers (untouched holdout rows), subsampled with a per-class seed."""
    queries = {}
    for c in range(cfg.classes):
        p_rows = priv.class_rows(c)
        h_rows = holdout.class_rows(c)
        if p_rows.size == 0 or h_rows.size == 0:
            raise ConfigError(
                f"class {c} has no member or nonmember rows to query; "
                "increase per_class or adjust the split"
            )
        m = min(p_rows.size, h_rows.size)
        rng = np.random.default_rng(derive_seed(seed, 6, c))
        p_pick = np.sort(rng.choice(p_rows, size=m, replace=False))
        h_pick = np.sort(rng.choice(h_rows, size=m, replace=False))
        queries[c] = QuerySet(c, priv.features[p_pick], holdout.features[h_pick])
    return queries


def prepare_dropout_cell(cfg: AuditConfig, seed: int) -> DropoutCell:
    priv, pub_att, cal_att, holdout = split_pool(cfg, seed)
    target = train_target(priv, list(cfg.hidden), cfg.opt(seed=derive_seed(seed, 3)))
    attacks = fit_attacks(cfg, seed, target, pub_att, cal_att)
    queries = _build_queries(cfg, seed, priv, holdout)
    return DropoutCell(seed, target, attacks, queries, priv, pub_att, cal_att, holdout)


def attack_query_scores(
    name: str,
    attack: Attack,
    target: MlpModel,
    features: np.ndarray,
    label: int,
) -> np.ndarray:
    """Continuous member-likeness scores for a same-class query batch; this
    is the quantity the ROC sweeps."""
    labels = np.full(features.shape[0], label, dtype=int)
    if isinstance(attack, MarginalAttack):
        logits = netcore.forward(target, features)
        return batch_scores(attack.score_fn, logits, labels if attack.score_fn.needs_label else None)
    if isinstance(attack, LiraOfflineAttack):
        return lira_z_scores(attack, target, features, labels)
    if isinstance(attack, QuantileAttack):
        logits = netcore.forward(target, features)
        s = batch_scores(attack.score_fn, logits, labels if attack.score_fn.needs_label else None)
        return s - qr_thresholds(attack, features)
    raise TypeError(f"unknown attack type {type(attack).__name__}")


def _metrics(curve: RocCurve, fpr_targets) -> dict:
    return {
        "tpr_at_fpr": {_fkey(t): tpr_at_fpr(curve, t) for t in fpr_targets},
        "n_member": curve.n_member,
        "n_nonmember": curve.n_nonmember,
    }


def evaluate_cell(cfg: AuditConfig, cell: DropoutCell) -> tuple[dict, dict]:
    """Score one prepared cell.

    Returns (report fragment, curves); curve keys are (attack, local label)
    with local labels like "seen" / "unseen" / "combined".
    """
    dropped = set(cfg.dropped_classes)
    per_attack: dict = {}
    curves: dict = {}
    for name, attack in cell.attacks.items():
        per_class = {}
        pooled = {"seen": ([], []), "unseen": ([], []), "combined": ([], [])}
        for c in sorted(cell.queries):
            q = cell.queries[c]
            ms = attack_query_scores(name, attack, cell.target, q.member_features, c)
            ns = attack_query_scores(name, attack, cell.target, q.nonmember_features, c)
            per_class[str(c)] = _metrics(roc_curve(ms, ns), cfg.fpr_targets)
            groups = ("unseen", "combined") if c in dropped else ("seen", "combined")
            for g in groups:
                pooled[g][0].append(ms)
                pooled[g][1].append(ns)
        group_metrics = {}
        for g, (mlist, nlist) in pooled.items():
            if not mlist:
                continue
            curve = roc_curve(np.concatenate(mlist), np.concatenate(nlist))
            group_metrics[g] = _metrics(curve, cfg.fpr_targets)
            curves[(name, g)] = curve
        entry = {"per_class": per_class, "groups": group_metrics}
        if isinstance(attack, (MarginalAttack, LiraOfflineAttack)):
            entry["decision_threshold"] = float(attack.threshold)
        per_attack[name] = entry
    return {"attacks": per_attack}, curves


def _dropout_cell(cfg: AuditConfig, seed: int) -> tuple[dict, dict]:
    return evaluate_cell(cfg, prepare_dropout_cell(cfg, seed))


def _scarcity_cell(cfg: AuditConfig, seed: int) -> tuple[dict, dict]:
    """One seed of the sample-scarcity sweep: the target and the queries are
    shared across k; only the attacker's fitting data shrinks."""
    priv, pub_att, cal_att, holdout = split_pool(cfg, seed)
    target = train_target(priv, list(cfg.hidden), cfg.opt(seed=derive_seed(seed, 3)))
    queries = _build_queries(cfg, seed, priv, holdout)
    per_k: dict = {}
    curves: dict = {}
    for k in cfg.scarcity_ks:
        if k == FULL_SENTINEL:
            kkey, pub_k = FULL_SENTINEL, pub_att
        else:
            kkey = str(k)
            pub_k = subsample_per_class(pub_att, k, seed=derive_seed(seed, 7, k))
        attacks = fit_attacks(cfg, seed, target, pub_k, cal_att)
        cell = DropoutCell(seed, target, attacks, queries, priv, pub_k, cal_att, holdout)
        fragment, local_curves = evaluate_cell(cfg, cell)
        per_k[kkey] = fragment["attacks"]
        for (name, g), curve in local_curves.items():
            curves[(name, f"k{kkey}_{g}")] = curve
    return {"per_k": per_k}, curves


# --- report assembly ----------------------------------------------------------


@dataclass
class EvalReport:
    experiment: str
    config_echo: dict
    per_seed: dict
    aggregate: dict
    curves: dict = field(repr=False)

    def payload(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config_echo,
            "per_seed": self.per_seed,
            "aggregate": self.aggregate,
        }


def _config_echo(cfg: AuditConfig) -> dict:
    echo = asdict(cfg)
    # orchestration knobs never change results, so they stay out of the echo:
    # a parallel rerun must reproduce a serial report byte for byte
    del echo["workers"]
    del echo["out_dir"]
    echo["split_fractions"] = list(SPLIT_FRACTIONS)
    return echo


def _run_cells(cfg: AuditConfig, cell_fn) -> list:
    if cfg.workers <= 1:
        return [cell_fn(cfg, s) for s in cfg.seeds]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        futures = [pool.submit(cell_fn, cfg, s) for s in cfg.seeds]
        return [f.result() for f in futures]


def _median_tree(per_seed_values: list[dict], path_extractor) -> float:
    vals = [path_extractor(v) for v in per_seed_values]
    return float(statistics.median(vals))


def run_class_dropout(cfg: AuditConfig) -> EvalReport:
    """Full class-dropout protocol over all configured seeds."""
    cfg.validate()
    results = _run_cells(cfg, _dropout_cell)
    per_seed = {}
    curves = {}
    for seed, (fragment, local_curves) in zip(cfg.seeds, results):
        per_seed[str(seed)] = fragment
        for (name, local), curve in local_curves.items():
            curves[(name, f"seed{seed}_{local}")] = curve
    aggregate: dict = {}
    fragments = [per_seed[str(s)] for s in cfg.seeds]
    for name in cfg.attacks:
        groups = fragments[0]["attacks"][name]["groups"].keys()
        aggregate[name] = {
            g: {
                _fkey(t): _median_tree(
                    fragments, lambda fr: fr["attacks"][name]["groups"][g]["tpr_at_fpr"][_fkey(t)]
                )
                for t in cfg.fpr_targets
            }
            for g in groups
        }
    return EvalReport(cfg.experiment, _config_echo(cfg), per_seed, aggregate, curves)


def run_sample_scarcity(cfg: AuditConfig) -> EvalReport:
    """Sample-scarcity sweep: refit attacks on per-class subsamples of the
    attacker's public data, sharing the target and queries within a seed."""
    cfg.validate()
    results = _run_cells(cfg, _scarcity_cell)
    per_seed = {}
    curves = {}
    for seed, (fragment, local_curves) in zip(cfg.seeds, results):
        per_seed[str(seed)] = fragment
        for (name, local), curve in local_curves.items():
            curves[(name, f"seed{seed}_{local}")] = curve
    kkeys = [FULL_SENTINEL if k == FULL_SENTINEL else str(k) for k in cfg.scarcity_ks]
    fragments = [per_seed[str(s)] for s in cfg.seeds]
    aggregate: dict = {}
    for name in cfg.attacks:
        aggregate[name] = {}
        for kkey in kkeys:
            groups = fragments[0]["per_k"][kkey][name]["groups"].keys()
            aggregate[name][kkey] = {
                g: {
                    _fkey(t): _median_tree(
                        fragments,
                        lambda fr: fr["per_k"][kkey][name]["groups"][g]["tpr_at_fpr"][_fkey(t)],
                    )
                    for t in cfg.fpr_targets
                }
                for g in groups
            }
    return EvalReport(cfg.experiment, _config_echo(cfg), per_seed, aggregate, curves)


# --- artifact files -----------------------------------------------------------


def render_report_json(report: EvalReport) -> str:
    return json.dumps(report.payload(), sort_keys=True, indent=2) + "\n"


def render_roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for t, f, r in zip(curve.thresholds, curve.fpr, curve.tpr):
        lines.append(f"{format(float(t), '.17g')},{format(float(f), '.17g')},{format(float(r), '.17g')}")
    return "\n".join(lines) + "\n"


def write_report_files(report: EvalReport, out_dir) -> list[str]:
    """Write report.json plus one ROC CSV per (attack, cell); returns the
    file names written, for the run manifest."""
    os.makedirs(out_dir, exist_ok=True)
    names = []
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report_json(report))
    names.append("report.json")
    for (attack, label) in sorted(report.curves):
        fname = f"roc_{attack}_{label}.csv"
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_roc_csv(report.curves[(attack, label)]))
        names.append(fname)
    return names
