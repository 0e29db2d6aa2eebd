"""From-scratch neural-network engine: forward, backprop, optimizers.

All arithmetic is float64 numpy. A model is a ModelSpec (an ordered list of
layer descriptors); its parameters live in a flat ParamVector whose layout is
a deterministic function of the spec, so flatten/unflatten round-trip
bit-exactly and the same vector can be aggregated, diffed or serialized
without knowing the model. Supported layers: dense, small valid-padding
convolution, 2x2 average pooling, flatten, inverted dropout. The classifier
head is always softmax + categorical cross-entropy.

Besides ordinary parameter gradients the engine exposes gradients with
respect to the *inputs* and to soft target distributions
(``input_gradients``); combined with a directional finite difference this is
what gradient-matching reconstruction needs (see attacks module).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericError

Array = np.ndarray

ACTIVATIONS = ("relu", "sigmoid", "linear")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv | avgpool | flatten | dropout
    in_dim: int = 0
    out_dim: int = 0
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    activation: str = "linear"
    rate: float = 0.0


def dense(in_dim: int, out_dim: int, activation: str = "linear") -> LayerSpec:
    return LayerSpec(kind="dense", in_dim=in_dim, out_dim=out_dim, activation=activation)


def conv(channels: int, kernel: int, stride: int = 1, activation: str = "linear") -> LayerSpec:
    return LayerSpec(kind="conv", channels=channels, kernel=kernel, stride=stride,
                     activation=activation)


def avgpool() -> LayerSpec:
    return LayerSpec(kind="avgpool")


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def dropout(rate: float) -> LayerSpec:
    return LayerSpec(kind="dropout", rate=rate)


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus the per-sample input shape (channels last)."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shape_chain(self)  # validates composition

    @property
    def n_classes(self) -> int:
        return shape_chain(self)[-1][0]


def shape_chain(spec: ModelSpec) -> list[tuple[int, ...]]:
    """Per-sample shape before and after each layer; raises ConfigError on mismatch."""
    shape = tuple(spec.input_shape)
    chain = [shape]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if len(shape) != 1 or shape[0] != layer.in_dim:
                raise ConfigError(
                    f"layer {i}: dense expects flat input of {layer.in_dim}, got {shape}")
            shape = (layer.out_dim,)
        elif layer.kind == "conv":
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv expects HxWxC input, got {shape}")
            h, w, _ = shape
            k, s = layer.kernel, layer.stride
            if h < k or w < k:
                raise ConfigError(f"layer {i}: kernel {k} larger than input {shape}")
            shape = ((h - k) // s + 1, (w - k) // s + 1, layer.channels)
        elif layer.kind == "avgpool":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: avgpool expects HxWxC input, got {shape}")
            h, w, c = shape
            if h < 2 or w < 2:
                raise ConfigError(f"layer {i}: avgpool needs at least 2x2 input, got {shape}")
            shape = (h // 2, w // 2, c)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dropout":
            if not 0.0 <= layer.rate < 1.0:
                raise ConfigError(f"layer {i}: dropout rate must be in [0,1), got {layer.rate}")
        else:
            raise ConfigError(f"layer {i}: unknown layer kind {layer.kind!r}")
        chain.append(shape)
    if len(shape) != 1:
        raise ConfigError(f"model must end with a flat class layer, got {shape}")
    return chain


def mlp_spec(input_shape: tuple[int, ...], hidden: list[int], n_classes: int,
             activation: str = "relu", dropout_rate: float = 0.0) -> ModelSpec:
    """Flatten -> hidden dense stack -> linear class layer."""
    flat = int(np.prod(input_shape))
    layers: list[LayerSpec] = [flatten()] if len(input_shape) > 1 else []
    prev = flat
    for width in hidden:
        layers.append(dense(prev, width, activation))
        if dropout_rate > 0.0:
            layers.append(dropout(dropout_rate))
        prev = width
    layers.append(dense(prev, n_classes, "linear"))
    return ModelSpec(layers=tuple(layers), input_shape=tuple(input_shape))


def cnn_spec(input_shape: tuple[int, ...], n_classes: int,
             channels: tuple[int, int] = (4, 8), kernel: int = 3,
             hidden: int = 32, activation: str = "relu") -> ModelSpec:
    """Small two-stage conv net with 2x2 average pooling."""
    spec_layers = [
        conv(channels[0], kernel, activation=activation),
        avgpool(),
        conv(channels[1], kernel, activation=activation),
        avgpool(),
        flatten(),
    ]
    probe = ModelSpec(layers=tuple(spec_layers), input_shape=tuple(input_shape))
    flat = shape_chain(probe)[-1][0]
    spec_layers.append(dense(flat, hidden, activation))
    spec_layers.append(dense(hidden, n_classes, "linear"))
    return ModelSpec(layers=tuple(spec_layers), input_shape=tuple(input_shape))


def twice_differentiable(spec: ModelSpec) -> ModelSpec:
    """Smooth-activation variant usable by second-order reconstruction.

    ReLU is replaced by sigmoid on dense layers and by linear on conv
    layers; other activations already have continuous derivatives.
    """
    new_layers = []
    for layer in spec.layers:
        if layer.activation == "relu":
            sub = "sigmoid" if layer.kind == "dense" else "linear"
            new_layers.append(replace(layer, activation=sub))
        else:
            new_layers.append(layer)
    return ModelSpec(layers=tuple(new_layers), input_shape=spec.input_shape)


# ---------------------------------------------------------------------------
# Parameter layout


@dataclass(frozen=True)
class ParamVector:
    """Flat float64 parameter vector with its (layer, name, shape) layout."""

    values: Array
    layout: tuple[tuple[int, str, tuple[int, ...]], ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", values)
        expected = sum(int(np.prod(shape)) for _, _, shape in self.layout)
        if expected != values.size:
            raise ConfigError(
                f"param vector length {values.size} does not match layout size {expected}")

    def __len__(self) -> int:
        return int(self.values.size)

    def with_values(self, values: Array) -> "ParamVector":
        return ParamVector(values=np.asarray(values, dtype=np.float64), layout=self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(values=self.values.copy(), layout=self.layout)


def param_layout(spec: ModelSpec) -> tuple[tuple[int, str, tuple[int, ...]], ...]:
    chain = shape_chain(spec)
    entries = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            entries.append((i, "W", (layer.in_dim, layer.out_dim)))
            entries.append((i, "b", (layer.out_dim,)))
        elif layer.kind == "conv":
            in_c = chain[i][2]
            entries.append((i, "K", (layer.kernel, layer.kernel, in_c, layer.channels)))
            entries.append((i, "b", (layer.channels,)))
    return tuple(entries)


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, _, shape in param_layout(spec))


def unflatten_params(spec: ModelSpec, params: ParamVector) -> list[dict[str, Array]]:
    """ParamVector -> per-layer {name: array} views (copies are not made)."""
    layout = param_layout(spec)
    if params.layout != layout:
        raise ConfigError("param vector layout does not match model spec")
    per_layer: list[dict[str, Array]] = [{} for _ in spec.layers]
    offset = 0
    for layer_idx, name, shape in layout:
        size = int(np.prod(shape))
        per_layer[layer_idx][name] = params.values[offset:offset + size].reshape(shape)
        offset += size
    return per_layer


def flatten_params(spec: ModelSpec, per_layer: list[dict[str, Array]]) -> ParamVector:
    layout = param_layout(spec)
    chunks = []
    for layer_idx, name, shape in layout:
        arr = np.asarray(per_layer[layer_idx][name], dtype=np.float64)
        if arr.shape != shape:
            raise ConfigError(f"layer {layer_idx} param {name}: expected {shape}, got {arr.shape}")
        chunks.append(arr.reshape(-1))
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values=values, layout=layout)


def zeros_like_params(spec: ModelSpec) -> ParamVector:
    return ParamVector(values=np.zeros(param_count(spec)), layout=param_layout(spec))


def init_params(spec: ModelSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, one seeded stream per layer."""
    layout = param_layout(spec)
    chain = shape_chain(spec)
    per_layer: list[dict[str, Array]] = [{} for _ in spec.layers]
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            rng = np.random.default_rng([seed & 0xFFFFFFFF, i])
            bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            per_layer[i]["W"] = rng.uniform(-bound, bound, size=(layer.in_dim, layer.out_dim))
            per_layer[i]["b"] = np.zeros(layer.out_dim)
        elif layer.kind == "conv":
            rng = np.random.default_rng([seed & 0xFFFFFFFF, i])
            in_c = chain[i][2]
            fan_in = layer.kernel * layer.kernel * in_c
            fan_out = layer.kernel * layer.kernel * layer.channels
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            per_layer[i]["K"] = rng.uniform(
                -bound, bound, size=(layer.kernel, layer.kernel, in_c, layer.channels))
            per_layer[i]["b"] = np.zeros(layer.channels)
    pv = flatten_params(spec, per_layer)
    assert pv.layout == layout
    return pv


# ---------------------------------------------------------------------------
# Forward / backward


def softmax(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: Array) -> Array:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def one_hot(labels: Array, n_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return np.asarray(labels, dtype=np.float64)
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def _activate(z: Array, activation: str) -> Array:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        # Stable in both tails.
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    return z


def _activate_grad(z: Array, a: Array, activation: str) -> Array:
    if activation == "relu":
        return (z > 0.0).astype(np.float64)
    if activation == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def _forward_pass(spec: ModelSpec, per_layer: list[dict[str, Array]], batch: Array,
                  train: bool, rng: np.random.Generator | None):
    """Returns (logits, caches). Caches hold what backward needs per layer."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ConfigError(
            f"batch shape {x.shape[1:]} does not match model input {spec.input_shape}")
    caches: list[tuple] = []
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            w, b = per_layer[i]["W"], per_layer[i]["b"]
            z = x @ w + b
            a = _activate(z, layer.activation)
            caches.append(("dense", x, z, a))
            x = a
        elif layer.kind == "conv":
            k_arr, b = per_layer[i]["K"], per_layer[i]["b"]
            z = _conv_forward(x, k_arr, layer.stride) + b
            a = _activate(z, layer.activation)
            caches.append(("conv", x, z, a))
            x = a
        elif layer.kind == "avgpool":
            caches.append(("avgpool", x.shape))
            x = _avgpool_forward(x)
        elif layer.kind == "flatten":
            caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "dropout":
            if train and layer.rate > 0.0:
                if rng is None:
                    raise ConfigError("train-mode dropout requires an rng")
                mask = (rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
                caches.append(("dropout", mask))
                x = x * mask
            else:
                caches.append(("dropout", None))
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations after layer {i} ({layer.kind})")
    return x, caches


def _conv_forward(x: Array, kernel: Array, stride: int) -> Array:
    n, h, w, _ = x.shape
    kh, kw, _, out_c = kernel.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    out = np.empty((n, oh, ow, out_c))
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            out[:, i, j, :] = np.tensordot(patch, kernel, axes=([1, 2, 3], [0, 1, 2]))
    return out


def _conv_backward(x: Array, kernel: Array, stride: int, dz: Array):
    n, h, w, in_c = x.shape
    kh, kw, _, out_c = kernel.shape
    oh, ow = dz.shape[1], dz.shape[2]
    dk = np.zeros_like(kernel)
    dx = np.zeros_like(x)
    for i in range(oh):
        for j in range(ow):
            patch = x[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :]
            d = dz[:, i, j, :]
            dk += np.tensordot(patch, d, axes=([0], [0]))
            dx[:, i * stride:i * stride + kh, j * stride:j * stride + kw, :] += (
                np.tensordot(d, kernel, axes=([1], [3])))
    db = dz.sum(axis=(0, 1, 2))
    return dx, dk, db


def _avgpool_forward(x: Array) -> Array:
    n, h, w, c = x.shape
    h2, w2 = h // 2 * 2, w // 2 * 2
    x = x[:, :h2, :w2, :]
    return x.reshape(n, h2 // 2, 2, w2 // 2, 2, c).mean(axis=(2, 4))


def _avgpool_backward(in_shape: tuple[int, ...], dout: Array) -> Array:
    n, h, w, c = in_shape
    dx = np.zeros(in_shape)
    expanded = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) / 4.0
    dx[:, :expanded.shape[1], :expanded.shape[2], :] = expanded
    return dx


def _backward_pass(spec: ModelSpec, per_layer: list[dict[str, Array]],
                   caches: list[tuple], dlogits: Array):
    """Backprop dlogits to per-layer parameter grads and the input grad."""
    grads: list[dict[str, Array]] = [{} for _ in spec.layers]
    d = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if layer.kind == "dense":
            _, x, z, a = cache
            dz = d * _activate_grad(z, a, layer.activation)
            grads[i]["W"] = x.T @ dz
            grads[i]["b"] = dz.sum(axis=0)
            d = dz @ per_layer[i]["W"].T
        elif layer.kind == "conv":
            _, x, z, a = cache
            dz = d * _activate_grad(z, a, layer.activation)
            dx, dk, db = _conv_backward(x, per_layer[i]["K"], layer.stride, dz)
            grads[i]["K"] = dk
            grads[i]["b"] = db
            d = dx
        elif layer.kind == "avgpool":
            d = _avgpool_backward(cache[1], d)
        elif layer.kind == "flatten":
            d = d.reshape(cache[1])
        elif layer.kind == "dropout":
            mask = cache[1]
            if mask is not None:
                d = d * mask
    return grads, d


def forward(spec: ModelSpec, params: ParamVector, batch: Array, mode: str = "eval",
            rng: np.random.Generator | None = None) -> Array:
    """Class probabilities for a batch; rows sum to 1."""
    per_layer = unflatten_params(spec, params)
    logits, _ = _forward_pass(spec, per_layer, batch, mode == "train", rng)
    probs = softmax(logits)
    if not np.all(np.isfinite(probs)):
        raise NumericError("non-finite output probabilities")
    return probs


def gradients(spec: ModelSpec, params: ParamVector, batch: Array, labels: Array,
              mode: str = "train", rng: np.random.Generator | None = None
              ) -> tuple[float, ParamVector]:
    """Mean cross-entropy loss over the batch and its parameter gradient."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("gradients: empty batch")
    per_layer = unflatten_params(spec, params)
    logits, caches = _forward_pass(spec, per_layer, batch, mode == "train", rng)
    targets = one_hot(labels, spec.n_classes)
    logq = log_softmax(logits)
    loss = float(-(targets * logq).sum() / batch.shape[0])
    dlogits = (softmax(logits) - targets) / batch.shape[0]
    grads, _ = _backward_pass(spec, per_layer, caches, dlogits)
    grad = flatten_params(spec, grads)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad.values))):
        raise NumericError("non-finite loss or gradient")
    return loss, grad


def input_gradients(spec: ModelSpec, params: ParamVector, batch: Array,
                    target_probs: Array
                    ) -> tuple[float, ParamVector, Array, Array]:
    """Loss plus gradients w.r.t. params, inputs, and the soft targets.

    Dropout is always inactive here so the result is a deterministic
    function of (params, batch, targets).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("input_gradients: empty batch")
    per_layer = unflatten_params(spec, params)
    logits, caches = _forward_pass(spec, per_layer, batch, False, None)
    targets = np.asarray(target_probs, dtype=np.float64)
    n = batch.shape[0]
    logq = log_softmax(logits)
    loss = float(-(targets * logq).sum() / n)
    q = softmax(logits)
    # d/dlogits of -(1/n) sum targets*logq, valid for unnormalized target rows too
    dlogits = (q * targets.sum(axis=1, keepdims=True) - targets) / n
    grads, dinput = _backward_pass(spec, per_layer, caches, dlogits)
    dtargets = -logq / n
    return loss, flatten_params(spec, grads), dinput, dtargets


def evaluate(spec: ModelSpec, params: ParamVector, images: Array, labels: Array,
             batch_size: int = 512) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) on a labelled set, eval mode."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("evaluate: empty dataset")
    per_layer = unflatten_params(spec, params)
    total_loss = 0.0
    correct = 0
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        yb = labels[start:start + batch_size]
        logits, _ = _forward_pass(spec, per_layer, xb, False, None)
        logq = log_softmax(logits)
        targets = one_hot(yb, spec.n_classes)
        total_loss += float(-(targets * logq).sum())
        correct += int((logits.argmax(axis=1) == np.asarray(yb).astype(int)).sum())
    n = images.shape[0]
    return total_loss / n, correct / n


def forward_flops_per_sample(spec: ModelSpec) -> int:
    """Rough multiply-add count of one forward pass, for the simulated clock."""
    chain = shape_chain(spec)
    flops = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            flops += 2 * layer.in_dim * layer.out_dim
        elif layer.kind == "conv":
            in_c = chain[i][2]
            oh, ow, oc = chain[i + 1]
            flops += 2 * oh * ow * oc * in_c * layer.kernel * layer.kernel
    return flops


# ---------------------------------------------------------------------------
# Optimizers


@dataclass(frozen=True)
class OptimizerState:
    """Pure-value optimizer state; apply returns a new state every step."""

    kind: str  # sgd | momentum | adam
    lr: float
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    moments: tuple[Array, ...] = ()
    step_count: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        need = {"sgd": 0, "momentum": 1, "adam": 2}[self.kind]
        if len(self.moments) != need:
            raise ConfigError(
                f"{self.kind} needs {need} moment vectors, got {len(self.moments)}")


def make_optimizer(kind: str, lr: float, n_params: int, beta: float = 0.9,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
                   ) -> OptimizerState:
    need = {"sgd": 0, "momentum": 1, "adam": 2}.get(kind)
    if need is None:
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    moments = tuple(np.zeros(n_params) for _ in range(need))
    return OptimizerState(kind=kind, lr=lr, beta=beta, beta1=beta1, beta2=beta2,
                          eps=eps, moments=moments, step_count=0)


def optimizer_apply(state: OptimizerState, params: ParamVector, grad: ParamVector
                    ) -> tuple[ParamVector, OptimizerState]:
    if params.layout != grad.layout:
        raise ConfigError("optimizer_apply: param and gradient layouts differ")
    for m in state.moments:
        if m.size != params.values.size:
            raise ConfigError("optimizer_apply: moment size does not match params")
    g = grad.values
    t = state.step_count + 1
    if state.kind == "sgd":
        new_values = params.values - state.lr * g
        new_state = replace(state, step_count=t)
    elif state.kind == "momentum":
        vel = state.beta * state.moments[0] + g
        new_values = params.values - state.lr * vel
        new_state = replace(state, moments=(vel,), step_count=t)
    else:  # adam
        m = state.beta1 * state.moments[0] + (1.0 - state.beta1) * g
        v = state.beta2 * state.moments[1] + (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_state = replace(state, moments=(m, v), step_count=t)
    return params.with_values(new_values), new_state
