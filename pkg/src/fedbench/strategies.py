"""Federated strategies and local training loops.

FedSGD clients upload a full-batch gradient and the server applies one
optimizer step to the weighted gradient sum (the single optimizer lives on
the server). FedAvg clients run E epochs of size-B mini-batch training and
upload their final weights; the server takes the n_k-weighted mean. With
``aggregate_moments`` the Adam moment vectors ride along with the weight
upload and are aggregated the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from . import neural
from .data import ClientDataset, Dataset, pooled_train, pooled_val
from .errors import ConfigError
from .neural import ModelSpec, OptimizerState, ParamVector

Array = np.ndarray

STRATEGY_NAMES = ("fedsgd", "fedavg", "local_only", "central")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def make_state(self, n_params: int) -> OptimizerState:
        return neural.make_optimizer(self.kind, self.lr, n_params, beta=self.beta,
                                     beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class StrategyConfig:
    """B is the local batch size (None means full batch), C the participation
    fraction, E the local epoch count. fedsgd pins B=None, C=1, E=1."""

    name: str
    B: int | None = None
    C: float = 1.0
    E: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    aggregate_moments: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {self.name!r}")
        if self.name == "fedsgd":
            object.__setattr__(self, "B", None)
            object.__setattr__(self, "C", 1.0)
            object.__setattr__(self, "E", 1)
        if not 0.0 < self.C <= 1.0:
            raise ConfigError("C must be in (0, 1]")
        if self.E < 1:
            raise ConfigError("E must be >= 1")
        if self.B is not None and self.B < 1:
            raise ConfigError("B must be >= 1 (or None for full batch)")


def participant_count(n_clients: int, C: float) -> int:
    # round-half-to-even, at least one participant
    return max(1, round(C * n_clients))


def select_clients(n_clients: int, C: float, round_no: int, seed: int) -> list[int]:
    """Uniform sample without replacement, deterministic in (seed, round)."""
    if not 0.0 < C <= 1.0:
        raise ConfigError("C must be in (0, 1]")
    size = participant_count(n_clients, C)
    if size >= n_clients:
        return list(range(n_clients))
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5E1, round_no])
    return sorted(int(i) for i in rng.choice(n_clients, size=size, replace=False))


def weights_from_sizes(sizes: list[int]) -> Array:
    """p_k = n_k / sum(n); nonnegative and summing to 1."""
    sizes = np.asarray(sizes, dtype=np.float64)
    total = sizes.sum()
    if total <= 0:
        raise ConfigError("aggregation needs at least one nonempty participant")
    return sizes / total


def aggregate(uploads: list[ParamVector], weights: Array) -> ParamVector:
    if len(uploads) != len(weights):
        raise ConfigError("aggregate: uploads and weights differ in length")
    layout = uploads[0].layout
    for u in uploads[1:]:
        if u.layout != layout:
            raise ConfigError("aggregate: mismatched parameter layouts")
    acc = weights[0] * uploads[0].values
    for w, u in zip(weights[1:], uploads[1:]):
        acc = acc + w * u.values
    return uploads[0].with_values(acc)


def client_update_fedsgd(spec: ModelSpec, params: ParamVector, client: ClientDataset,
                         rng: np.random.Generator | None = None,
                         dropout_active: bool = True) -> tuple[float, ParamVector]:
    """One full-batch gradient over the client's train set (no local step)."""
    if client.n_k == 0:
        raise ValueError("fedsgd update: empty client train set")
    mode = "train" if dropout_active else "eval"
    return neural.gradients(spec, params, client.train.images, client.train.labels,
                            mode=mode, rng=rng)


@dataclass
class FedAvgResult:
    params: ParamVector
    moments: tuple[Array, ...]
    steps: int
    last_loss: float


def client_update_fedavg(spec: ModelSpec, params: ParamVector, client: ClientDataset,
                         B: int | None, E: int, optimizer: OptimizerConfig,
                         rng: np.random.Generator,
                         dropout_active: bool = True,
                         initial_moments: tuple[Array, ...] | None = None,
                         initial_step: int = 0,
                         on_step=None) -> FedAvgResult:
    """E epochs of shuffled mini-batch training from the broadcast params."""
    if client.n_k == 0:
        raise ValueError("fedavg update: empty client train set")
    state = optimizer.make_state(len(params))
    if initial_moments is not None:
        if len(initial_moments) != len(state.moments):
            raise ConfigError("initial moments do not match optimizer kind")
        state = OptimizerState(kind=state.kind, lr=state.lr, beta=state.beta,
                               beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                               moments=tuple(m.copy() for m in initial_moments),
                               step_count=initial_step)
    images, labels = client.train.images, client.train.labels
    n = images.shape[0]
    batch = n if B is None else min(B, n)
    mode = "train" if dropout_active else "eval"
    last_loss = 0.0
    for _ in range(E):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            loss, grad = neural.gradients(spec, params, images[idx], labels[idx],
                                          mode=mode, rng=rng)
            before = params
            params, state = neural.optimizer_apply(state, params, grad)
            last_loss = loss
            if on_step is not None:
                on_step(before, params)
    return FedAvgResult(params=params, moments=state.moments, steps=state.step_count,
                        last_loss=last_loss)


# ---------------------------------------------------------------------------
# Plain local training (baselines, oracle classifier)


def train_with_early_stopping(spec: ModelSpec, params: ParamVector,
                              train: Dataset, val: Dataset,
                              optimizer: OptimizerConfig, B: int = 32,
                              max_epochs: int = 200, patience: int = 10,
                              seed: int = 0, dropout_active: bool = True
                              ) -> tuple[ParamVector, int]:
    """Mini-batch training, early-stopped on validation loss. Returns the
    best-validation parameters and the number of epochs actually run."""
    if len(val) == 0:
        val = train
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xB5])
    state = optimizer.make_state(len(params))
    best = (float("inf"), params.copy())
    bad = 0
    epochs_run = 0
    mode = "train" if dropout_active else "eval"
    n = len(train)
    batch = min(B, n) if B else n
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            _, grad = neural.gradients(spec, params, train.images[idx],
                                       train.labels[idx], mode=mode, rng=rng)
            params, state = neural.optimizer_apply(state, params, grad)
        epochs_run = epoch + 1
        val_loss, _ = neural.evaluate(spec, params, val.images, val.labels)
        if val_loss < best[0]:
            best = (val_loss, params.copy())
            bad = 0
        else:
            bad += 1
            if bad >= patience:
                break
    return best[1], epochs_run


@dataclass(frozen=True)
class BaselineReport:
    local_acc: float
    central_acc: float
    per_client_local: tuple[float, ...]


def run_baselines(spec: ModelSpec, clients: list[ClientDataset],
                  optimizer: OptimizerConfig, B: int = 32, max_epochs: int = 200,
                  patience: int = 10, seed: int = 0,
                  dropout_active: bool = True) -> BaselineReport:
    """Per-client local training vs centralized training on pooled data.

    Both accuracies are n_k-weighted over the clients' test sets.
    """
    if not clients:
        raise ConfigError("run_baselines needs at least one client")
    p = weights_from_sizes([c.n_k for c in clients])

    local_accs = []
    for i, client in enumerate(clients):
        params = neural.init_params(spec, seed + 1000 + i)
        params, _ = train_with_early_stopping(
            spec, params, client.train, client.val, optimizer, B=B,
            max_epochs=max_epochs, patience=patience, seed=seed + 1000 + i,
            dropout_active=dropout_active)
        _, acc = neural.evaluate(spec, params, client.test.images, client.test.labels)
        local_accs.append(acc)
    local_acc = float(np.dot(p, local_accs))

    params = neural.init_params(spec, seed)
    params, _ = train_with_early_stopping(
        spec, params, pooled_train(clients), pooled_val(clients), optimizer, B=B,
        max_epochs=max_epochs, patience=patience, seed=seed,
        dropout_active=dropout_active)
    central_accs = [neural.evaluate(spec, params, c.test.images, c.test.labels)[1]
                    for c in clients]
    central_acc = float(np.dot(p, central_accs))
    return BaselineReport(local_acc=local_acc, central_acc=central_acc,
                          per_client_local=tuple(local_accs))
