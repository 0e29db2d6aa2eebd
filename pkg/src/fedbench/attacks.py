"""Gradient-inversion attacks and reconstruction scoring.

Two attacks on gradients derived from adjacent parameter snapshots:

* ``fc_attack`` exploits the proportionality between first-dense-layer
  weight gradients and the input: for unit i, row i of dL/dW equals
  dL/db[i] times the input, so dividing the two recovers input candidates,
  which are then deduplicated by greedy clustering.
* ``dlg_attack`` optimizes dummy inputs and label logits so that their
  gradient matches the captured one. The outer gradient of the matching
  objective is obtained either by an accelerated path (a directional
  central difference through parameter space combined with analytic
  input/label gradients) or, as the reference, by per-coordinate central
  differences over the objective itself.

Reconstructions are unordered; scoring uses an optimal assignment between
reconstructions and truth images on the per-pixel MSE matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import neural
from .errors import ConfigError, MetricError
from .neural import ModelSpec, ParamVector

Array = np.ndarray

FC_BIAS_FLOOR = 1e-8
FC_DUP_MSE = 1e-3


@dataclass(frozen=True)
class GradientCapture:
    """Two adjacent parameter snapshots plus the update metadata behind them."""

    params_before: ParamVector
    params_after: ParamVector
    lr: float
    optimizer_kind: str
    n_images: int
    epochs: int

    @property
    def approximate(self) -> bool:
        # Only plain SGD makes (before - after)/lr the exact gradient sum.
        return self.optimizer_kind != "sgd"

    @property
    def derived_gradient(self) -> ParamVector:
        grad, _ = derive_gradient(self.params_before, self.params_after, self.lr,
                                  self.optimizer_kind)
        return grad


def derive_gradient(before: ParamVector, after: ParamVector, lr: float,
                    optimizer_kind: str = "sgd") -> tuple[ParamVector, bool]:
    """(before - after) / lr and whether it is only an approximate gradient."""
    if before.layout != after.layout:
        raise ConfigError("derive_gradient: parameter layouts differ")
    if lr == 0:
        raise ConfigError("derive_gradient: lr must be nonzero")
    grad = before.with_values((before.values - after.values) / lr)
    return grad, optimizer_kind != "sgd"


@dataclass
class AttackResult:
    images: list[Array]            # reconstructed inputs, clipped to [0, 1]
    labels: list[int] | None       # class guesses (dlg only)
    failed: bool = False
    iterations_used: int = 0
    final_objective: float | None = None
    history: list[float] | None = None  # accepted objective values (dlg only)
    note: str = ""


def capture_fedsgd(spec: ModelSpec, params: ParamVector, images: Array,
                   labels: Array, lr: float) -> GradientCapture:
    """One plain-SGD step on the full batch; the classic single-round leak."""
    _, grad = neural.gradients(spec, params, images, labels, mode="eval")
    state = neural.make_optimizer("sgd", lr, len(params))
    after, _ = neural.optimizer_apply(state, params, grad)
    return GradientCapture(params_before=params, params_after=after, lr=lr,
                           optimizer_kind="sgd", n_images=images.shape[0], epochs=1)


def capture_fedavg(spec: ModelSpec, params: ParamVector, images: Array,
                   labels: Array, lr: float, B: int | None, E: int,
                   seed: int = 0) -> GradientCapture:
    """E epochs of mini-batch SGD; the derived vector accumulates all steps."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xCA])
    state = neural.make_optimizer("sgd", lr, len(params))
    n = images.shape[0]
    batch = n if B is None else min(B, n)
    current = params
    for _ in range(E):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grad = neural.gradients(spec, current, images[idx], labels[idx],
                                       mode="eval")
            current, state = neural.optimizer_apply(state, current, grad)
    return GradientCapture(params_before=params, params_after=current, lr=lr,
                           optimizer_kind="sgd", n_images=n, epochs=E)


# ---------------------------------------------------------------------------
# FC attack


def _first_dense(spec: ModelSpec) -> int:
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            for before in spec.layers[:i]:
                if before.kind not in ("flatten",):
                    raise ConfigError(
                        "fc_attack needs the first parameterized layer to be dense")
            return i
        if layer.kind == "conv":
            raise ConfigError("fc_attack needs the first parameterized layer to be dense")
    raise ConfigError("fc_attack: model has no dense layer")


def fc_attack(grad: ParamVector, spec: ModelSpec, n_images_hint: int,
              image_shape: tuple[int, ...],
              bias_floor: float = FC_BIAS_FLOOR,
              dup_mse: float = FC_DUP_MSE) -> AttackResult:
    """Recover input candidates from a first-dense-layer gradient."""
    layer_idx = _first_dense(spec)
    per_layer = neural.unflatten_params(spec, grad)
    dw = per_layer[layer_idx]["W"]  # (in_dim, units)
    db = per_layer[layer_idx]["b"]  # (units,)
    active = np.flatnonzero(np.abs(db) > bias_floor)
    if active.size == 0:
        return AttackResult(images=[], labels=None, failed=True,
                            note="all bias gradients below threshold")
    candidates = dw[:, active] / db[active]  # column per unit
    strengths = np.abs(db[active])
    order = np.argsort(-strengths)

    reps: list[Array] = []      # running weighted means
    weights: list[float] = []
    counts: list[int] = []
    for j in order:
        cand = candidates[:, j]
        w = strengths[j]
        merged = False
        for ci, rep in enumerate(reps):
            if float(np.mean((cand - rep) ** 2)) < dup_mse:
                total = weights[ci] + w
                reps[ci] = (rep * weights[ci] + cand * w) / total
                weights[ci] = total
                counts[ci] += 1
                merged = True
                break
        if not merged:
            reps.append(cand.copy())
            weights.append(w)
            counts.append(1)

    rank = sorted(range(len(reps)), key=lambda i: (-counts[i], -weights[i]))
    chosen = rank[:max(0, n_images_hint)]
    images = [np.clip(reps[i], 0.0, 1.0).reshape(image_shape) for i in chosen]
    return AttackResult(images=images, labels=None, failed=False,
                        note=f"{len(reps)} clusters from {active.size} units")


# ---------------------------------------------------------------------------
# DLG attack


def _softmax_rows(z: Array) -> Array:
    return neural.softmax(z)


def _logits_chain(probs: Array, dprobs: Array) -> Array:
    # Backprop through row-wise softmax: dlogits = p * (dp - sum(dp*p)).
    inner = (dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dprobs - inner)


def dlg_objective(spec: ModelSpec, params: ParamVector, x: Array, y_logits: Array,
                  target_grad: Array) -> float:
    probs = _softmax_rows(y_logits)
    _, grad, _, _ = neural.input_gradients(spec, params, x, probs)
    r = grad.values - target_grad
    return float(r @ r)


def dlg_gradient_fast(spec: ModelSpec, params: ParamVector, x: Array,
                      y_logits: Array, target_grad: Array,
                      eps: float = 1e-4) -> tuple[float, Array, Array]:
    """(objective, dD/dx, dD/dy_logits) via a directional central difference.

    The objective gradient is 2 J^T r where J is the Jacobian of the
    parameter gradient w.r.t. (x, y). J^T r is the input/label gradient of
    the directional derivative of the loss along r in parameter space,
    which a central difference over two analytic backprops delivers.
    """
    probs = _softmax_rows(y_logits)
    _, grad, _, _ = neural.input_gradients(spec, params, x, probs)
    r = grad.values - target_grad
    objective = float(r @ r)
    norm = float(np.sqrt(r @ r))
    if norm == 0.0:
        return objective, np.zeros_like(x), np.zeros_like(y_logits)
    u = r / norm
    plus = params.with_values(params.values + eps * u)
    minus = params.with_values(params.values - eps * u)
    _, _, dx_p, dt_p = neural.input_gradients(spec, plus, x, probs)
    _, _, dx_m, dt_m = neural.input_gradients(spec, minus, x, probs)
    scale = norm / eps  # = 2*norm / (2*eps)
    ddx = (dx_p - dx_m) * scale
    ddprobs = (dt_p - dt_m) * scale
    ddy = _logits_chain(probs, ddprobs)
    return objective, ddx, ddy


def dlg_gradient_fd(spec: ModelSpec, params: ParamVector, x: Array,
                    y_logits: Array, target_grad: Array,
                    eps: float = 1e-4) -> tuple[float, Array, Array]:
    """Reference outer gradient: per-coordinate central differences over D."""
    objective = dlg_objective(spec, params, x, y_logits, target_grad)
    ddx = np.zeros_like(x)
    flat = ddx.reshape(-1)
    xflat = x.reshape(-1)
    for i in range(xflat.size):
        orig = xflat[i]
        xflat[i] = orig + eps
        d_plus = dlg_objective(spec, params, x, y_logits, target_grad)
        xflat[i] = orig - eps
        d_minus = dlg_objective(spec, params, x, y_logits, target_grad)
        xflat[i] = orig
        flat[i] = (d_plus - d_minus) / (2 * eps)
    ddy = np.zeros_like(y_logits)
    yflat = y_logits.reshape(-1)
    dyflat = ddy.reshape(-1)
    for i in range(yflat.size):
        orig = yflat[i]
        yflat[i] = orig + eps
        d_plus = dlg_objective(spec, params, x, y_logits, target_grad)
        yflat[i] = orig - eps
        d_minus = dlg_objective(spec, params, x, y_logits, target_grad)
        yflat[i] = orig
        dyflat[i] = (d_plus - d_minus) / (2 * eps)
    return objective, ddx, ddy


@dataclass(frozen=True)
class DlgConfig:
    iterations: int = 200
    lr: float = 1.0
    init_seed: int = 0
    grad_mode: str = "fast"  # fast | coordinate_fd
    fd_eps: float = 1e-4
    fail_streak: int = 100
    init_x: Array | None = None
    init_y_logits: Array | None = None


def dlg_attack(grad: ParamVector, spec: ModelSpec, params: ParamVector,
               n_images: int, config: DlgConfig,
               image_shape: tuple[int, ...]) -> AttackResult:
    """Gradient-matching reconstruction of inputs and labels.

    ``params`` are the weights the gradient was taken at (the broadcast
    weights an attacker observes anyway). Gradient descent runs on (dummy
    inputs, dummy label logits) with a backtracking step size: the step is
    halved whenever the objective fails to decrease, so accepted iterations
    are strictly monotone. After ``fail_streak`` consecutive rejections the
    attack gives up and is flagged failed.
    """
    if config.grad_mode not in ("fast", "coordinate_fd"):
        raise ConfigError(f"unknown dlg grad_mode {config.grad_mode!r}")
    grad_fn = dlg_gradient_fast if config.grad_mode == "fast" else dlg_gradient_fd
    target = grad.values
    rng = np.random.default_rng([config.init_seed & 0xFFFFFFFF, 0xD16])
    n_classes = spec.n_classes
    x = (np.array(config.init_x, dtype=np.float64) if config.init_x is not None
         else rng.random((n_images,) + tuple(image_shape)))
    y = (np.array(config.init_y_logits, dtype=np.float64)
         if config.init_y_logits is not None
         else 0.01 * rng.standard_normal((n_images, n_classes)))

    objective, gx, gy = grad_fn(spec, params, x, y, target, config.fd_eps)
    lr = config.lr
    streak = 0
    failed = False
    iterations_used = 0
    for _ in range(config.iterations):
        iterations_used += 1
        trial_x = x - lr * gx
        trial_y = y - lr * gy
        trial_obj = dlg_objective(spec, params, trial_x, trial_y, target)
        if trial_obj < objective:
            x, y = trial_x, trial_y
            objective, gx, gy = grad_fn(spec, params, x, y, target, config.fd_eps)
            lr *= 1.1
            streak = 0
        else:
            lr *= 0.5
            streak += 1
            if streak >= config.fail_streak:
                failed = True
                break
    images = [np.clip(x[i], 0.0, 1.0) for i in range(n_images)]
    labels = [int(c) for c in y.argmax(axis=1)]
    return AttackResult(images=images, labels=labels, failed=failed,
                        iterations_used=iterations_used, final_objective=objective)


# ---------------------------------------------------------------------------
# Scoring


@dataclass(frozen=True)
class OracleClassifier:
    """Well-trained reference classifier used to label FC reconstructions."""

    spec: ModelSpec
    params: ParamVector
    test_accuracy: float

    def predict(self, images: Array) -> Array:
        probs = neural.forward(self.spec, self.params, np.asarray(images))
        return probs.argmax(axis=1)


def match_reconstructions(recon_images: list[Array], truth_images: Array
                          ) -> list[tuple[int, int, float]]:
    """Optimal assignment (recon_idx, truth_idx, per-pixel MSE) pairs."""
    if not recon_images:
        return []
    cost = np.zeros((len(recon_images), truth_images.shape[0]))
    for i, rec in enumerate(recon_images):
        diff = truth_images - rec[None, ...]
        cost[i, :] = np.mean(diff.reshape(truth_images.shape[0], -1) ** 2, axis=1)
    rows, cols = linear_sum_assignment(cost)
    return [(int(r), int(c), float(cost[r, c])) for r, c in zip(rows, cols)]


def score_attack(result: AttackResult, truth_images: Array, truth_labels: Array,
                 oracle: OracleClassifier | None = None
                 ) -> tuple[float, float]:
    """(label accuracy, mean matched per-pixel MSE) for a reconstruction set.

    Label correctness uses the attack's own labels when it produced them
    (dlg); otherwise the oracle classifier predicts a label for each
    reconstructed image (fc).
    """
    truth_images = np.asarray(truth_images, dtype=np.float64)
    truth_labels = np.asarray(truth_labels)
    n_truth = truth_images.shape[0]
    if len(result.images) > n_truth:
        raise MetricError("more reconstructions than truth images")
    if not result.images:
        raise MetricError("nothing to score: empty reconstruction set")
    pairs = match_reconstructions(result.images, truth_images)
    l2 = float(np.mean([mse for _, _, mse in pairs]))
    if result.labels is not None:
        correct = sum(1 for r, t, _ in pairs
                      if result.labels[r] == int(truth_labels[t]))
    else:
        if oracle is None:
            raise ConfigError("fc scoring needs an oracle classifier")
        if oracle.test_accuracy < 0.95:
            raise ConfigError(
                f"oracle classifier accuracy {oracle.test_accuracy:.3f} below 0.95")
        preds = oracle.predict(np.stack([r for r in result.images]))
        pred_by_recon = {i: int(p) for i, p in enumerate(preds)}
        correct = sum(1 for r, t, _ in pairs
                      if pred_by_recon[r] == int(truth_labels[t]))
    return correct / n_truth, l2


# ---------------------------------------------------------------------------
# Image dumps (binary PGM, 8-bit)


def write_pgm(path: str | Path, image: Array) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] != 1:
            raise ConfigError("pgm export supports single-channel images only")
        img = img[:, :, 0]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def dump_attack_images(directory: str | Path, truth_images: Array,
                       result: AttackResult) -> None:
    """truth_<i>.pgm for every truth image; recon_<i>.pgm named after the
    matched truth index so pairs can be compared side by side."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(truth_images.shape[0]):
        write_pgm(directory / f"truth_{i}.pgm", truth_images[i])
    for r, t, _ in match_reconstructions(result.images, np.asarray(truth_images)):
        write_pgm(directory / f"recon_{t}.pgm", result.images[r])
