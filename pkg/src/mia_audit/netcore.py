"""Dense-network numeric kernel: forward pass, analytic gradients, training.

Everything here is plain numpy with hand-derived gradients. The gradient
checker compares them against central finite differences, so the loss heads
keep their derivative conventions documented next to the code.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, NumericError

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
LOG_TWO_PI = math.log(2.0 * math.pi)

_ACTIVATIONS = ("relu", "identity")
_LOSS_KINDS = ("softmax_cross_entropy", "pinball", "gaussian_nll")
_ALGORITHMS = ("sgd", "adam")


@dataclass
class Layer:
    """One dense layer: y = activation(x @ weights + biases)."""

    weights: np.ndarray  # (fan_in, fan_out)
    biases: np.ndarray  # (fan_out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("layer weights must be a 2-d matrix")
        if self.biases.ndim != 1 or self.biases.shape[0] != self.weights.shape[1]:
            raise ValueError("bias length must match the weight matrix fan-out")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.biases).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


@dataclass
class MlpModel:
    """A stack of dense layers; the final layer is always linear (identity)."""

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ValueError("layer shapes do not chain")
        if self.layers[-1].activation != "identity":
            raise ValueError("output layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    def copy(self) -> "MlpModel":
        return MlpModel([Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers])


@dataclass(frozen=True)
class LossSpec:
    """Which loss head to train with.

    kind 'pinball' requires alpha in (0, 1); the loss is
    max{alpha*(pred - s), (1 - alpha)*(s - pred)}, whose minimizer over a
    constant predictor is the empirical (1 - alpha)-quantile of the targets.
    """

    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in _LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "pinball":
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ValueError("pinball loss needs alpha in (0, 1)")
        elif self.alpha is not None:
            raise ValueError(f"loss {self.kind!r} takes no alpha")


@dataclass(frozen=True)
class OptConfig:
    """First-order optimizer settings; everything is seeded and deterministic."""

    algorithm: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in _ALGORITHMS:
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


def init_mlp(input_dim: int, hidden: list[int], output_dim: int, seed: int) -> MlpModel:
    """He-uniform initialization (limit sqrt(6/fan_in)), biases zero, seeded."""
    if input_dim < 1 or output_dim < 1 or any(h < 1 for h in hidden):
        raise ValueError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    dims = [input_dim] + list(hidden) + [output_dim]
    layers = []
    for i, (fin, fout) in enumerate(zip(dims, dims[1:])):
        limit = math.sqrt(6.0 / fin)
        w = rng.uniform(-limit, limit, size=(fin, fout))
        act = "identity" if i == len(dims) - 2 else "relu"
        layers.append(Layer(w, np.zeros(fout), act))
    return MlpModel(layers)


def _as_batch(x: np.ndarray, input_dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != input_dim:
        raise ValueError(f"input must have {input_dim} features")
    return x, single


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Raw model outputs for a single vector (d,) or a batch (n, d)."""
    xb, single = _as_batch(x, model.input_dim)
    a = xb
    for layer in model.layers:
        z = a @ layer.weights + layer.biases
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return a[0] if single else a


def forward_activations(model: MlpModel, x: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """All layer activations and pre-activations for a batch (used by backprop
    and by embedding extraction)."""
    xb, _ = _as_batch(np.atleast_2d(x), model.input_dim)
    acts = [xb]
    pres = []
    for layer in model.layers:
        z = acts[-1] @ layer.weights + layer.biases
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    return acts, pres


# --- loss heads ---------------------------------------------------------
#
# Each head returns the mean loss over the batch together with the gradient
# of that mean with respect to the raw model outputs.


def softmax_cross_entropy(logits: np.ndarray, label: int) -> float:
    """Cross entropy of one logit vector against an integer label."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError("expected a single logit vector")
    if not 0 <= int(label) < z.shape[0]:
        raise ValueError("label out of range")
    shifted = z - z.max()
    lse = math.log(np.exp(shifted).sum())
    return float(lse - shifted[int(label)])


def pinball_loss(pred: float, target: float, alpha: float) -> float:
    """Tilted absolute error max{alpha*(pred-target), (1-alpha)*(target-pred)}.

    Over-prediction costs alpha per unit, under-prediction 1 - alpha, so the
    minimizing constant is the (1 - alpha)-quantile of the targets.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    d = float(pred) - float(target)
    return max(alpha * d, (alpha - 1.0) * d)


def gaussian_nll(mean: float, log_var: float, target: float) -> float:
    """Negative log-likelihood of target under N(mean, exp(log_var)).

    log_var is clamped to [-10, 10] before use.
    """
    lv = min(max(float(log_var), LOG_VAR_MIN), LOG_VAR_MAX)
    d = float(target) - float(mean)
    return 0.5 * (lv + d * d * math.exp(-lv)) + 0.5 * LOG_TWO_PI


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _head_cross_entropy(outputs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    n = outputs.shape[0]
    labels = np.asarray(labels)
    shifted = outputs - outputs.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))
    grad = _softmax(outputs)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def _head_pinball(outputs: np.ndarray, targets: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    n = outputs.shape[0]
    pred = outputs[:, 0]
    d = pred - targets
    loss = float(np.mean(np.maximum(alpha * d, (alpha - 1.0) * d)))
    # Subgradient: alpha where target < pred, alpha - 1 otherwise. Ties take
    # the alpha - 1 branch (strict inequality on the indicator).
    g = np.where(targets < pred, alpha, alpha - 1.0) / n
    grad = np.zeros_like(outputs)
    grad[:, 0] = g
    return loss, grad


def _head_gaussian(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    n = outputs.shape[0]
    mean = outputs[:, 0]
    lv = np.clip(outputs[:, 1], LOG_VAR_MIN, LOG_VAR_MAX)
    d = targets - mean
    inv = np.exp(-lv)
    loss = float(np.mean(0.5 * (lv + d * d * inv) + 0.5 * LOG_TWO_PI))
    grad = np.zeros_like(outputs)
    grad[:, 0] = -(d * inv) / n
    # Straight-through at the clamp: gradient evaluated at the clamped value.
    grad[:, 1] = 0.5 * (1.0 - d * d * inv) / n
    return loss, grad


def _loss_and_output_grad(spec: LossSpec, outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    if spec.kind == "softmax_cross_entropy":
        return _head_cross_entropy(outputs, targets)
    if spec.kind == "pinball":
        if outputs.shape[1] != 1:
            raise ValueError("pinball loss expects a single-output model")
        return _head_pinball(outputs, np.asarray(targets, dtype=np.float64), spec.alpha)
    if outputs.shape[1] != 2:
        raise ValueError("gaussian_nll expects a (mean, log_var) two-output model")
    return _head_gaussian(outputs, np.asarray(targets, dtype=np.float64))


def mean_loss(model: MlpModel, x: np.ndarray, targets: np.ndarray, spec: LossSpec) -> float:
    """Mean loss of the model on a batch."""
    out = forward(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    loss, _ = _loss_and_output_grad(spec, out, targets)
    return loss


def _backprop(model: MlpModel, x: np.ndarray, targets: np.ndarray, spec: LossSpec):
    acts, pres = forward_activations(model, x)
    loss, delta = _loss_and_output_grad(spec, acts[-1], targets)
    grads = [None] * len(model.layers)
    for li in range(len(model.layers) - 1, -1, -1):
        grads[li] = (acts[li].T @ delta, delta.sum(axis=0))
        if li > 0:
            delta = delta @ model.layers[li].weights.T
            if model.layers[li - 1].activation == "relu":
                delta = delta * (pres[li - 1] > 0.0)
    return loss, grads


class _Adam:
    def __init__(self, model: MlpModel, cfg: OptConfig):
        self.cfg = cfg
        self.t = 0
        self.m = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in model.layers]
        self.v = [(np.zeros_like(l.weights), np.zeros_like(l.biases)) for l in model.layers]

    def step(self, model: MlpModel, grads) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for li, layer in enumerate(model.layers):
            for pi, (param, g) in enumerate([(layer.weights, grads[li][0]), (layer.biases, grads[li][1])]):
                m = self.m[li][pi]
                v = self.v[li][pi]
                m *= c.beta1
                m += (1.0 - c.beta1) * g
                v *= c.beta2
                v += (1.0 - c.beta2) * g * g
                param -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


def train(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss: LossSpec,
    opt: OptConfig,
) -> tuple[MlpModel, list[float]]:
    """Minibatch training; returns a new model and the per-epoch mean loss trace.

    The input model is left untouched. Shuffling is driven by opt.seed, so the
    result is a pure function of (model, data, loss, opt). A non-finite batch
    loss aborts with a NumericError naming the epoch and step.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"inputs must be (n, {model.input_dim})")
    n = x.shape[0]
    if loss.kind == "softmax_cross_entropy":
        t = np.asarray(targets, dtype=np.int64)
        if t.ndim != 1 or t.shape[0] != n:
            raise ValueError("labels must be a vector matching the inputs")
        if n and (t.min() < 0 or t.max() >= model.output_dim):
            raise ValueError("label out of range for the model's output width")
    else:
        t = np.asarray(targets, dtype=np.float64)
        if t.ndim != 1 or t.shape[0] != n:
            raise ValueError("targets must be a vector matching the inputs")
    if n == 0:
        raise ValueError("cannot train on an empty batch")

    out = model.copy()
    if opt.epochs == 0:
        return out, []
    rng = np.random.default_rng(opt.seed)
    adam = _Adam(out, opt) if opt.algorithm == "adam" else None
    trace = []
    for epoch in range(opt.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, opt.batch_size):
            idx = perm[start : start + opt.batch_size]
            # a diverging run overflows before the loss check catches it;
            # the NumericError below is the signal, not the transient warnings
            with np.errstate(over="ignore", invalid="ignore"):
                batch_loss, grads = _backprop(out, x[idx], t[idx], loss)
            if not math.isfinite(batch_loss):
                raise NumericError(
                    f"non-finite loss {batch_loss!r} at epoch {epoch}, step {start // opt.batch_size}"
                )
            total += batch_loss * idx.shape[0]
            if adam is not None:
                adam.step(out, grads)
            else:
                for li, layer in enumerate(out.layers):
                    layer.weights -= opt.learning_rate * grads[li][0]
                    layer.biases -= opt.learning_rate * grads[li][1]
        trace.append(total / n)
    return out, trace


# --- gradient checking --------------------------------------------------


class KinkProximityError(ValueError):
    """A gradient-check batch sits too close to a non-differentiable point."""


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: tuple[int, str, int]  # (layer index, 'weights'|'biases', flat index)


def _kink_margins(model: MlpModel, x: np.ndarray, targets: np.ndarray, spec: LossSpec) -> list[str]:
    """Distances to relu / pinball kinks; entries describe any violation."""
    problems = []
    acts, pres = forward_activations(model, x)
    for li, layer in enumerate(model.layers):
        if layer.activation == "relu":
            gap = float(np.min(np.abs(pres[li]))) if pres[li].size else math.inf
            if gap < 1e-4:
                problems.append(f"relu pre-activation within {gap:.2e} of zero in layer {li}")
    if spec.kind == "pinball":
        gap = float(np.min(np.abs(acts[-1][:, 0] - np.asarray(targets, dtype=np.float64))))
        if gap < 1e-4:
            problems.append(f"pinball prediction within {gap:.2e} of a target")
    if spec.kind == "gaussian_nll":
        lv = acts[-1][:, 1]
        if lv.size and (lv.max() > LOG_VAR_MAX - 0.1 or lv.min() < LOG_VAR_MIN + 0.1):
            problems.append("log-variance output within 0.1 of the clamp bounds")
    return problems


def grad_check(
    loss: LossSpec,
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    tol: float = 1e-5,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Relative error per parameter is |a - n| / max(|a|, |n|, 1e-3); the floor
    keeps round-off on near-zero entries from drowning the comparison. The
    batch must sit away from relu and pinball kinks; violations raise
    KinkProximityError instead of being skipped.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    problems = _kink_margins(model, x, targets, loss)
    if problems:
        raise KinkProximityError("; ".join(problems))

    work = model.copy()
    _, grads = _backprop(work, x, targets, loss)
    worst = (0, "weights", 0)
    max_err = 0.0
    for li, layer in enumerate(work.layers):
        for name in ("weights", "biases"):
            param = getattr(layer, name)
            analytic = grads[li][0 if name == "weights" else 1]
            flat = param.reshape(-1)
            aflat = analytic.reshape(-1)
            for j in range(flat.shape[0]):
                orig = flat[j]
                flat[j] = orig + step
                plus = mean_loss(work, x, targets, loss)
                flat[j] = orig - step
                minus = mean_loss(work, x, targets, loss)
                flat[j] = orig
                numeric = (plus - minus) / (2.0 * step)
                denom = max(abs(aflat[j]), abs(numeric), 1e-3)
                err = abs(aflat[j] - numeric) / denom
                if err > max_err:
                    max_err = err
                    worst = (li, name, j)
    return GradCheckReport(max_err, tol, max_err <= tol, worst)


# --- checkpoint io ------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_model(model: MlpModel, path) -> None:
    """Text checkpoint: header, then per layer its shape line, weight rows,
    and bias row, all at 17 significant digits (bit-exact round trip)."""
    lines = [f"layers {len(model.layers)}"]
    for layer in model.layers:
        lines.append(f"{layer.fan_in} {layer.fan_out} {layer.activation}")
        for row in layer.weights:
            lines.append(" ".join(_fmt(v) for v in row))
        lines.append(" ".join(_fmt(v) for v in layer.biases))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> MlpModel:
    """Parse a checkpoint written by save_model; malformed files raise
    DataFormatError naming the offending line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    def fail(lineno: int, msg: str):
        raise DataFormatError(f"{path}: line {lineno + 1}: {msg}")

    if not lines:
        raise DataFormatError(f"{path}: empty checkpoint")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "layers" or not head[1].isdigit():
        fail(0, "expected header 'layers L'")
    count = int(head[1])
    if count < 1:
        fail(0, "layer count must be positive")
    layers = []
    pos = 1
    for li in range(count):
        if pos >= len(lines):
            fail(len(lines) - 1, f"missing shape line for layer {li}")
        parts = lines[pos].split()
        if len(parts) != 3:
            fail(pos, "expected 'rows cols activation'")
        try:
            rows, cols = int(parts[0]), int(parts[1])
        except ValueError:
            fail(pos, "non-integer layer shape")
        act = parts[2]
        if act not in _ACTIVATIONS:
            fail(pos, f"unknown activation {act!r}")
        if rows < 1 or cols < 1:
            fail(pos, "layer shape must be positive")
        pos += 1
        w = np.empty((rows, cols))
        for r in range(rows):
            if pos >= len(lines):
                fail(len(lines) - 1, "missing weight row")
            vals = lines[pos].split()
            if len(vals) != cols:
                fail(pos, f"expected {cols} weights, got {len(vals)}")
            try:
                w[r] = [float(v) for v in vals]
            except ValueError:
                fail(pos, "non-numeric weight")
            pos += 1
        if pos >= len(lines):
            fail(len(lines) - 1, "missing bias row")
        vals = lines[pos].split()
        if len(vals) != cols:
            fail(pos, f"expected {cols} biases, got {len(vals)}")
        try:
            b = np.array([float(v) for v in vals])
        except ValueError:
            fail(pos, "non-numeric bias")
        pos += 1
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            fail(pos - 1, "non-finite parameter")
        layers.append(Layer(w, b, act))
    if pos != len(lines):
        fail(pos, "trailing content after final layer")
    try:
        return MlpModel(layers)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
