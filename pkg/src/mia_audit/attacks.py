"""The three membership attacks: global-threshold marginal baseline, offline
shadow-ensemble z-scoring (LiRA style), and per-example quantile thresholds.

Attack objects are frozen after fitting; calibration returns a new object.
Decisions always use the strict rule "member iff score > threshold".
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import netcore
from .dataspace import LabeledDataset
from .errors import DataFormatError
from .netcore import Layer, LossSpec, MlpModel, OptConfig
from .scores import ScoreFn, batch_scores
from .target import ShadowEnsemble, load_ensemble, save_ensemble

SIGMA_FLOOR = 1e-6

# Rational approximation for the standard normal inverse CDF (Acklam's
# coefficients). Absolute error below 1.5e-7 everywhere on (0, 1); the central
# branch covers p in [0.02425, 0.97575] and the tail branches the rest.
_ICDF_A = (
    -3.969683028665376e01,
    2.209460984245205e02,
    -2.759285104469687e02,
    1.383577518672690e02,
    -3.066479806614716e01,
    2.506628277459239e00,
)
_ICDF_B = (
    -5.447609879822406e01,
    1.615858368580409e02,
    -1.556989798598866e02,
    6.680131188771972e01,
    -1.328068155288572e01,
)
_ICDF_C = (
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e00,
    -2.549732539343734e00,
    4.374664141464968e00,
    2.938163982698783e00,
)
_ICDF_D = (
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e00,
    3.754408661907416e00,
)
_ICDF_P_LOW = 0.02425


def inv_norm_cdf(p: float) -> float:
    """Standard normal quantile via Acklam's rational approximation."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError("p must be in the open interval (0, 1)")
    a, b, c, d = _ICDF_A, _ICDF_B, _ICDF_C, _ICDF_D
    if p < _ICDF_P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    if p > 1.0 - _ICDF_P_LOW:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
        ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    )


def empirical_upper_quantile(values: np.ndarray, alpha: float) -> float:
    """Order statistic at index ceil((1 - alpha)(n + 1)), clamped to [1, n].

    This is the conservative finite-sample threshold: flagging values
    strictly above it keeps the false-positive rate at or below alpha on the
    fitting sample. The 1e-9 slack guards the ceiling against float fuzz when
    (1 - alpha)(n + 1) is mathematically an integer.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("need a nonempty score vector")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    n = v.size
    idx = math.ceil((1.0 - alpha) * (n + 1) - 1e-9)
    idx = min(max(idx, 1), n)
    return float(np.sort(v)[idx - 1])


# --- marginal baseline ------------------------------------------------------


@dataclass(frozen=True)
class MarginalAttack:
    """Single global threshold fitted on nonmember scores."""

    threshold: float
    alpha: float
    score_fn: ScoreFn | None = None


def marginal_fit(pub_scores: np.ndarray, alpha: float, score_fn: ScoreFn | None = None) -> MarginalAttack:
    """Pick the global threshold from public (nonmember) scores."""
    return MarginalAttack(empirical_upper_quantile(pub_scores, alpha), alpha, score_fn)


def marginal_predict(attack: MarginalAttack, score: float) -> bool:
    """Member iff the score strictly exceeds the threshold (ties are
    nonmembers, keeping the fitting-set FPR at or below alpha)."""
    return bool(score > attack.threshold)


# --- offline shadow ensemble ------------------------------------------------


@dataclass(frozen=True)
class LiraOfflineAttack:
    """Shadow-ensemble z-score attack with a single global scale.

    z = (target score - mean out-model shadow score) / global_sigma; the
    decision threshold on z comes from a separate holdout calibration.
    """

    ensemble: ShadowEnsemble
    score_fn: ScoreFn
    global_sigma: float
    threshold: float | None = None
    alpha: float | None = None


def shadow_score_matrix(ensemble: ShadowEnsemble, features: np.ndarray, labels: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    """Scores of every shadow model on every row: shape (k, n)."""
    rows = np.atleast_2d(np.asarray(features, dtype=np.float64))
    out = np.empty((ensemble.k, rows.shape[0]))
    for j, model in enumerate(ensemble.models):
        logits = netcore.forward(model, rows)
        out[j] = batch_scores(score_fn, logits, labels)
    return out


def lira_fit(ensemble: ShadowEnsemble, pub: LabeledDataset, score_fn: ScoreFn) -> LiraOfflineAttack:
    """Estimate the global sigma from out-model score residuals on the public
    rows the ensemble was built from.

    For each public row, the models whose subsets excluded it provide an
    out-distribution sample; sigma is the pooled root-mean-square residual
    around the per-row out-means, floored at 1e-6.
    """
    if ensemble.masks.shape[1] != pub.size:
        raise ValueError("ensemble masks do not match the public dataset size")
    scores = shadow_score_matrix(ensemble, pub.features, pub.labels, score_fn)
    out = ~ensemble.masks  # (k, m): True where the row was held out of model j
    counts = out.sum(axis=0)
    if (counts == 0).any():
        raise ValueError("some public rows have no out-models; refit the ensemble")
    sums = np.where(out, scores, 0.0).sum(axis=0)
    mu_out = sums / counts
    residuals = np.where(out, scores - mu_out, 0.0)
    sigma = math.sqrt(float((residuals**2).sum()) / float(out.sum()))
    return LiraOfflineAttack(ensemble, score_fn, max(sigma, SIGMA_FLOOR))


def lira_z_scores(
    attack: LiraOfflineAttack,
    target_model: MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    out_masks: np.ndarray | None = None,
) -> np.ndarray:
    """z-scores for a query batch.

    out_masks (n, k) marks which shadow models are out-models per query; omit
    it for queries that never appeared in any shadow subset (every model is
    an out-model then). A query with no out-models raises.
    """
    rows = np.atleast_2d(np.asarray(features, dtype=np.float64))
    target_logits = netcore.forward(target_model, rows)
    s_target = batch_scores(attack.score_fn, target_logits, labels)
    shadow = shadow_score_matrix(attack.ensemble, rows, labels, attack.score_fn)  # (k, n)
    if out_masks is None:
        mu = shadow.mean(axis=0)
    else:
        om = np.asarray(out_masks, dtype=bool)
        if om.shape != (rows.shape[0], attack.ensemble.k):
            raise ValueError("out_masks must be (n, k)")
        counts = om.sum(axis=1)
        if (counts == 0).any():
            raise ValueError("every query needs at least one out-model")
        mu = np.where(om.T, shadow, 0.0).sum(axis=0) / counts
    return (s_target - mu) / attack.global_sigma


def lira_offline_score(
    x: np.ndarray,
    y: int,
    target_model: MlpModel,
    attack: LiraOfflineAttack,
    out_mask: np.ndarray | None = None,
) -> float:
    """z-score of a single query; larger means more member-like."""
    om = None if out_mask is None else np.asarray(out_mask, dtype=bool)[None, :]
    z = lira_z_scores(attack, target_model, np.asarray(x)[None, :], np.asarray([y]), om)
    return float(z[0])


def lira_calibrate(attack: LiraOfflineAttack, holdout_z: np.ndarray, alpha: float) -> LiraOfflineAttack:
    """Set the decision threshold to the (1 - alpha) empirical quantile of
    z-scores from a public holdout disjoint from the shadow training rows."""
    return replace(attack, threshold=empirical_upper_quantile(holdout_z, alpha), alpha=alpha)


# --- per-example quantile thresholds ----------------------------------------


@dataclass(frozen=True)
class QuantileAttack:
    """Regressed per-example score thresholds at tail level alpha.

    gaussian mode fits a (mean, log-variance) head by Gaussian NLL and reads
    the threshold off the fitted normal at the (1 - alpha) quantile; pinball
    mode regresses the threshold directly with the tilted absolute loss.
    """

    predictor: MlpModel
    mode: str  # 'gaussian' or 'pinball'
    alpha: float
    score_fn: ScoreFn


def qr_train(
    pub: LabeledDataset,
    target_model: MlpModel,
    score_fn: ScoreFn,
    mode: str,
    alpha: float,
    hidden: list[int],
    opt: OptConfig,
    constant_only: bool = False,
) -> QuantileAttack:
    """Fit the threshold regressor on the public split's target scores.

    The regressor sees raw features only (no labels), so it applies unchanged
    to examples from classes missing from the public data. With
    constant_only=True (pinball mode) the one-parameter fit is solved in
    closed form as the same order statistic the marginal attack uses, making
    the constant-predictor attack reduce to the marginal baseline exactly.
    """
    if mode not in ("gaussian", "pinball"):
        raise ValueError(f"unknown quantile mode {mode!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    logits = netcore.forward(target_model, pub.features)
    s = batch_scores(score_fn, logits, pub.labels if score_fn.needs_label else None)
    if constant_only:
        if mode != "pinball":
            raise ValueError("constant_only applies to pinball mode")
        tau = empirical_upper_quantile(s, alpha)
        predictor = MlpModel([Layer(np.zeros((pub.feature_dim, 1)), np.array([tau]), "identity")])
        return QuantileAttack(predictor, mode, alpha, score_fn)
    out_dim = 2 if mode == "gaussian" else 1
    model = netcore.init_mlp(pub.feature_dim, hidden, out_dim, seed=opt.seed)
    loss = LossSpec("gaussian_nll") if mode == "gaussian" else LossSpec("pinball", alpha=alpha)
    trained, _ = netcore.train(model, pub.features, s, loss, opt)
    return QuantileAttack(trained, mode, alpha, score_fn)


def qr_thresholds(attack: QuantileAttack, features: np.ndarray) -> np.ndarray:
    """Per-example thresholds for a feature batch."""
    out = netcore.forward(attack.predictor, np.atleast_2d(np.asarray(features, dtype=np.float64)))
    if attack.mode == "pinball":
        if out.shape[1] != 1:
            raise ValueError("pinball predictor must have one output")
        return out[:, 0]
    if out.shape[1] != 2:
        raise ValueError("gaussian predictor must output (mean, log_var)")
    mean = out[:, 0]
    lv = np.clip(out[:, 1], netcore.LOG_VAR_MIN, netcore.LOG_VAR_MAX)
    return mean + np.exp(0.5 * lv) * inv_norm_cdf(1.0 - attack.alpha)


def qr_threshold(attack: QuantileAttack, x: np.ndarray) -> float:
    return float(qr_thresholds(attack, np.asarray(x)[None, :])[0])


# --- unified prediction -----------------------------------------------------

Attack = MarginalAttack | LiraOfflineAttack | QuantileAttack


def attack_predict(
    attack: Attack,
    target_model: MlpModel,
    x: np.ndarray,
    y: int | None = None,
    out_mask: np.ndarray | None = None,
) -> tuple[bool, float]:
    """(member?, continuous score) for one query under any fitted attack.

    The continuous score is what the evaluation sweeps: the raw score for the
    marginal attack, the z-score for the shadow attack, and score minus the
    per-example threshold for the quantile attack.
    """
    if isinstance(attack, MarginalAttack):
        if attack.score_fn is None:
            raise ValueError("marginal attack has no score function attached")
        logits = netcore.forward(target_model, np.asarray(x, dtype=np.float64))
        s = attack.score_fn(logits, y)
        return marginal_predict(attack, s), float(s)
    if isinstance(attack, LiraOfflineAttack):
        if attack.threshold is None:
            raise ValueError("shadow attack must be calibrated before prediction")
        if y is None:
            raise ValueError("shadow attack needs the query label")
        z = lira_offline_score(np.asarray(x), y, target_model, attack, out_mask)
        return bool(z > attack.threshold), z
    if isinstance(attack, QuantileAttack):
        logits = netcore.forward(target_model, np.asarray(x, dtype=np.float64))
        s = attack.score_fn(logits, y)
        q = qr_threshold(attack, x)
        return bool(s > q), float(s - q)
    raise TypeError(f"unknown attack type {type(attack).__name__}")


# --- attack state serialization ---------------------------------------------


def _write_meta(path, pairs: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(f"{k}={v}" for k, v in pairs.items()) + "\n")


def _read_meta(path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh.read().splitlines(), start=1):
            if not raw.strip():
                continue
            if "=" not in raw:
                raise DataFormatError(f"{path}: line {lineno}: expected key=value")
            k, v = raw.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def save_attack(attack: Attack, directory) -> None:
    """Persist an attack as a metadata file plus checkpoint artifacts."""
    os.makedirs(directory, exist_ok=True)
    meta_path = os.path.join(directory, "meta.txt")
    if isinstance(attack, MarginalAttack):
        if attack.score_fn is None:
            raise ValueError("cannot persist a marginal attack without a score function")
        _write_meta(
            meta_path,
            {
                "kind": "marginal",
                "alpha": format(attack.alpha, ".17g"),
                "threshold": format(attack.threshold, ".17g"),
                "score_kind": attack.score_fn.kind,
                "clip_epsilon": format(attack.score_fn.clip_epsilon, ".17g"),
            },
        )
        return
    if isinstance(attack, LiraOfflineAttack):
        pairs = {
            "kind": "lira",
            "global_sigma": format(attack.global_sigma, ".17g"),
            "score_kind": attack.score_fn.kind,
            "clip_epsilon": format(attack.score_fn.clip_epsilon, ".17g"),
        }
        if attack.threshold is not None:
            pairs["threshold"] = format(attack.threshold, ".17g")
            pairs["alpha"] = format(attack.alpha, ".17g")
        _write_meta(meta_path, pairs)
        save_ensemble(attack.ensemble, os.path.join(directory, "ensemble"))
        return
    if isinstance(attack, QuantileAttack):
        _write_meta(
            meta_path,
            {
                "kind": "quantile",
                "mode": attack.mode,
                "alpha": format(attack.alpha, ".17g"),
                "score_kind": attack.score_fn.kind,
                "clip_epsilon": format(attack.score_fn.clip_epsilon, ".17g"),
            },
        )
        netcore.save_model(attack.predictor, os.path.join(directory, "predictor.ckpt"))
        return
    raise TypeError(f"unknown attack type {type(attack).__name__}")


def load_attack(directory) -> Attack:
    meta = _read_meta(os.path.join(directory, "meta.txt"))
    kind = meta.get("kind")
    try:
        if kind == "marginal":
            fn = ScoreFn(meta["score_kind"], float(meta["clip_epsilon"]))
            return MarginalAttack(float(meta["threshold"]), float(meta["alpha"]), fn)
        if kind == "lira":
            fn = ScoreFn(meta["score_kind"], float(meta["clip_epsilon"]))
            ensemble = load_ensemble(os.path.join(directory, "ensemble"))
            threshold = float(meta["threshold"]) if "threshold" in meta else None
            alpha = float(meta["alpha"]) if "alpha" in meta else None
            return LiraOfflineAttack(ensemble, fn, float(meta["global_sigma"]), threshold, alpha)
        if kind == "quantile":
            fn = ScoreFn(meta["score_kind"], float(meta["clip_epsilon"]))
            predictor = netcore.load_model(os.path.join(directory, "predictor.ckpt"))
            return QuantileAttack(predictor, meta["mode"], float(meta["alpha"]), fn)
    except KeyError as exc:
        raise DataFormatError(f"{directory}: attack metadata missing field {exc}") from exc
    raise DataFormatError(f"{directory}: unknown attack kind {kind!r}")
