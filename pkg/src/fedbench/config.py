"""Experiment configuration: YAML schema 1, validation, and resolution.

``resolve_config`` turns a raw dict (usually parsed from YAML) into a fully
materialized config with every default filled in; records embed that
resolved form so a run can be reproduced from its own output.
Validation errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import yaml

from .errors import ConfigError

SCHEMA_VERSION = 1


def load_config(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    return resolve_config(raw)


def _require_mapping(tree: dict, key: str, path: str) -> dict:
    value = tree.get(key, {})
    if value is None:
        value = {}
    if not isinstance(value, dict):
        raise ConfigError("expected a mapping", field=path)
    return value


def _check_unknown(tree: dict, allowed: set[str], path: str) -> None:
    unknown = set(tree) - allowed
    if unknown:
        name = sorted(unknown)[0]
        where = f"{path}.{name}" if path else name
        raise ConfigError("unknown config key", field=where)


def _int(tree, key, path, default=None, minimum=None, maximum=None):
    value = tree.get(key, default)
    if value is None and default is None:
        raise ConfigError("missing required integer", field=f"{path}.{key}")
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field=f"{path}.{key}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", field=f"{path}.{key}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"must be <= {maximum}, got {value}", field=f"{path}.{key}")
    return value


def _float(tree, key, path, default=None, minimum=None, maximum=None,
           exclusive_min=False):
    value = tree.get(key, default)
    if value is None and default is None:
        raise ConfigError("missing required number", field=f"{path}.{key}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", field=f"{path}.{key}")
    value = float(value)
    if minimum is not None:
        if exclusive_min and value <= minimum:
            raise ConfigError(f"must be > {minimum}, got {value}", field=f"{path}.{key}")
        if not exclusive_min and value < minimum:
            raise ConfigError(f"must be >= {minimum}, got {value}", field=f"{path}.{key}")
    if maximum is not None and value > maximum:
        raise ConfigError(f"must be <= {maximum}, got {value}", field=f"{path}.{key}")
    return value


def _choice(tree, key, path, choices, default=None):
    value = tree.get(key, default)
    if value not in choices:
        raise ConfigError(f"must be one of {sorted(choices)}, got {value!r}",
                          field=f"{path}.{key}")
    return value


def _bool(tree, key, path, default):
    value = tree.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(f"expected a boolean, got {value!r}", field=f"{path}.{key}")
    return value


def _resolve_dataset(tree: dict, seed: int) -> dict:
    path = "dataset"
    allowed = {"source", "n", "n_classes", "image_side", "noise_sigma",
               "template_contrast", "images", "labels", "root", "n_clients",
               "max_per_client", "partition", "seed"}
    _check_unknown(tree, allowed, path)
    source = _choice(tree, "source", path, ("synth", "mnist", "dir"), default="synth")
    out = {
        "source": source,
        "seed": _int(tree, "seed", path, default=seed),
        "n_clients": _int(tree, "n_clients", path, default=10, minimum=1),
        "max_per_client": _int(tree, "max_per_client", path, default=200, minimum=3),
    }
    if source == "synth":
        out["n"] = _int(tree, "n", path, default=2000, minimum=1)
        out["n_classes"] = _int(tree, "n_classes", path, default=10, minimum=2)
        out["image_side"] = _int(tree, "image_side", path, default=28, minimum=2)
        out["noise_sigma"] = _float(tree, "noise_sigma", path, default=0.1, minimum=0.0)
        out["template_contrast"] = _float(tree, "template_contrast", path,
                                          default=1.0, minimum=0.0, maximum=1.0)
    elif source == "mnist":
        for key in ("images", "labels"):
            value = tree.get(key)
            if not isinstance(value, str):
                raise ConfigError("missing IDX file path", field=f"{path}.{key}")
            if not Path(value).exists():
                raise ConfigError(f"file not found: {value}", field=f"{path}.{key}")
            out[key] = value
        out["n"] = _int(tree, "n", path, default=0, minimum=0)  # 0 = all
    else:  # dir
        root = tree.get("root")
        if not isinstance(root, str):
            raise ConfigError("missing client directory root", field=f"{path}.root")
        if not Path(root).is_dir():
            raise ConfigError(f"directory not found: {root}", field=f"{path}.root")
        out["root"] = root

    part = _require_mapping(tree, "partition", f"{path}.partition")
    _check_unknown(part, {"mode", "k", "size_jitter"}, f"{path}.partition")
    out["partition"] = {
        "mode": _choice(part, "mode", f"{path}.partition", ("iid", "k_class"),
                        default="iid"),
        "k": _int(part, "k", f"{path}.partition", default=1, minimum=1),
        "size_jitter": _float(part, "size_jitter", f"{path}.partition",
                              default=0.0, minimum=0.0, maximum=0.999),
    }
    return out


def _resolve_model(tree: dict) -> dict:
    path = "model"
    _check_unknown(tree, {"name", "hidden", "activation", "dropout",
                          "twice_differentiable"}, path)
    name = _choice(tree, "name", path, ("mlp", "cnn"), default="mlp")
    hidden = tree.get("hidden", [64, 64])
    if (not isinstance(hidden, list) or not hidden
            or any(isinstance(h, bool) or not isinstance(h, int) or h < 1 for h in hidden)):
        raise ConfigError("expected a nonempty list of positive ints",
                          field=f"{path}.hidden")
    return {
        "name": name,
        "hidden": list(hidden),
        "activation": _choice(tree, "activation", path,
                              ("relu", "sigmoid", "linear"), default="relu"),
        "dropout": _float(tree, "dropout", path, default=0.0, minimum=0.0,
                          maximum=0.999),
        "twice_differentiable": _bool(tree, "twice_differentiable", path, False),
    }


def _resolve_optimizer(tree: dict, path: str) -> dict:
    _check_unknown(tree, {"kind", "lr", "beta", "beta1", "beta2", "eps"}, path)
    return {
        "kind": _choice(tree, "kind", path, ("sgd", "momentum", "adam"),
                        default="adam"),
        "lr": _float(tree, "lr", path, default=1e-3, minimum=0.0, exclusive_min=True),
        "beta": _float(tree, "beta", path, default=0.9, minimum=0.0, maximum=1.0),
        "beta1": _float(tree, "beta1", path, default=0.9, minimum=0.0, maximum=1.0),
        "beta2": _float(tree, "beta2", path, default=0.999, minimum=0.0, maximum=1.0),
        "eps": _float(tree, "eps", path, default=1e-8, minimum=0.0, exclusive_min=True),
    }


def _resolve_strategy(tree: dict) -> dict:
    path = "strategy"
    _check_unknown(tree, {"name", "B", "C", "E", "aggregate_moments", "optimizer"},
                   path)
    name = _choice(tree, "name", path, ("fedsgd", "fedavg", "local_only", "central"),
                   default="fedsgd")
    b_raw = tree.get("B", "inf")
    if b_raw in ("inf", None):
        B = "inf"
    elif isinstance(b_raw, int) and not isinstance(b_raw, bool) and b_raw >= 1:
        B = b_raw
    else:
        raise ConfigError(f"B must be a positive int or 'inf', got {b_raw!r}",
                          field=f"{path}.B")
    C = _float(tree, "C", path, default=1.0, minimum=0.0, maximum=1.0,
               exclusive_min=True)
    E = _int(tree, "E", path, default=1, minimum=1)
    if name == "fedsgd":
        B, C, E = "inf", 1.0, 1
    return {
        "name": name,
        "B": B,
        "C": C,
        "E": E,
        "aggregate_moments": _bool(tree, "aggregate_moments", path, False),
        "optimizer": _resolve_optimizer(_require_mapping(tree, "optimizer",
                                                         f"{path}.optimizer"),
                                        f"{path}.optimizer"),
    }


def _resolve_bandwidth(tree, key, path, default):
    value = tree.get(key, default)
    if value in ("unlimited", None):
        return "unlimited"
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0:
        raise ConfigError(f"must be a positive number of Mb/s or 'unlimited', got "
                          f"{value!r}", field=f"{path}.{key}")
    return float(value)


def _resolve_network(tree: dict) -> dict:
    path = "network"
    _check_unknown(tree, {"client_bandwidth_mbps", "server_bandwidth_mbps",
                          "latency_ms"}, path)
    return {
        "client_bandwidth_mbps": _resolve_bandwidth(tree, "client_bandwidth_mbps",
                                                    path, 100),
        "server_bandwidth_mbps": _resolve_bandwidth(tree, "server_bandwidth_mbps",
                                                    path, "unlimited"),
        "latency_ms": _float(tree, "latency_ms", path, default=5.0, minimum=0.0),
    }


def _resolve_attack(tree: dict) -> dict:
    path = "attack"
    _check_unknown(tree, {"kind", "n_images", "E", "B", "seeds", "train_lr",
                          "iterations", "attack_lr", "oracle_min_acc",
                          "dump_images"}, path)
    kind = _choice(tree, "kind", path, ("fc", "dlg"), default="fc")
    for key, default in (("n_images", [1]), ("E", [1])):
        values = tree.get(key, default)
        if (not isinstance(values, list) or not values
                or any(isinstance(v, bool) or not isinstance(v, int) or v < 1
                       for v in values)):
            raise ConfigError("expected a nonempty list of positive ints",
                              field=f"{path}.{key}")
        tree[key] = values
    b_raw = tree.get("B", 1)
    if b_raw in ("inf", None):
        B = "inf"
    elif isinstance(b_raw, int) and not isinstance(b_raw, bool) and b_raw >= 1:
        B = b_raw
    else:
        raise ConfigError(f"B must be a positive int or 'inf', got {b_raw!r}",
                          field=f"{path}.B")
    return {
        "kind": kind,
        "n_images": list(tree["n_images"]),
        "E": list(tree["E"]),
        "B": B,
        "seeds": _int(tree, "seeds", path, default=1, minimum=1),
        "train_lr": _float(tree, "train_lr", path, default=0.1, minimum=0.0,
                           exclusive_min=True),
        "iterations": _int(tree, "iterations", path, default=300, minimum=0),
        "attack_lr": _float(tree, "attack_lr", path, default=1.0, minimum=0.0,
                            exclusive_min=True),
        "oracle_min_acc": _float(tree, "oracle_min_acc", path, default=0.95,
                                 minimum=0.0, maximum=1.0),
        "dump_images": _bool(tree, "dump_images", path, False),
    }


def _resolve_sweep(tree: dict) -> dict:
    path = "sweep"
    _check_unknown(tree, {"axes", "repeats"}, path)
    axes_in = _require_mapping(tree, "axes", f"{path}.axes")
    _check_unknown(axes_in, {"B", "C", "E", "lr", "optimizer", "k"}, f"{path}.axes")
    axes: dict[str, list] = {}
    for key, default in (("B", ["inf"]), ("C", [0.1]), ("E", [1]),
                         ("lr", [1e-3]), ("optimizer", ["adam"]), ("k", [0])):
        values = axes_in.get(key, default)
        if not isinstance(values, list) or not values:
            raise ConfigError("expected a nonempty list", field=f"{path}.axes.{key}")
        axes[key] = values
    for b in axes["B"]:
        if b != "inf" and (isinstance(b, bool) or not isinstance(b, int) or b < 1):
            raise ConfigError("B values must be positive ints or 'inf'",
                              field=f"{path}.axes.B")
    for k in axes["k"]:
        if isinstance(k, bool) or not isinstance(k, int) or k < 0:
            raise ConfigError("k values must be ints >= 0 (0 means iid)",
                              field=f"{path}.axes.k")
    for opt in axes["optimizer"]:
        if opt not in ("sgd", "momentum", "adam"):
            raise ConfigError(f"unknown optimizer {opt!r}", field=f"{path}.axes.optimizer")
    return {"axes": axes, "repeats": _int(tree, "repeats", path, default=1, minimum=1)}


def resolve_config(raw: dict) -> dict:
    """Validate and materialize every default; idempotent on its own output."""
    allowed = {"schema", "seed", "output", "dataset", "model", "strategy",
               "network", "stop", "durations", "baselines", "baseline_opts",
               "dropout_active", "validate_on_all", "sweep", "attack"}
    _check_unknown(raw, allowed, "")
    schema = raw.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {schema!r}", field="schema")
    seed = _int(raw, "seed", "", default=0)

    stop = _require_mapping(raw, "stop", "stop")
    _check_unknown(stop, {"max_round", "patience"}, "stop")
    durations = _require_mapping(raw, "durations", "durations")
    _check_unknown(durations, {"mode", "sim_gflops"}, "durations")
    baseline_opts = _require_mapping(raw, "baseline_opts", "baseline_opts")
    _check_unknown(baseline_opts, {"B", "max_epochs", "patience"}, "baseline_opts")

    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("expected a path string", field="output")

    resolved = {
        "schema": SCHEMA_VERSION,
        "seed": seed,
        "output": output,
        "dataset": _resolve_dataset(_require_mapping(raw, "dataset", "dataset"), seed),
        "model": _resolve_model(_require_mapping(raw, "model", "model")),
        "strategy": _resolve_strategy(_require_mapping(raw, "strategy", "strategy")),
        "network": _resolve_network(_require_mapping(raw, "network", "network")),
        "stop": {
            "max_round": _int(stop, "max_round", "stop", default=500, minimum=0),
            "patience": _int(stop, "patience", "stop", default=20, minimum=1),
        },
        "durations": {
            "mode": _choice(durations, "mode", "durations",
                            ("simulated", "measured"), default="simulated"),
            "sim_gflops": _float(durations, "sim_gflops", "durations", default=1.0,
                                 minimum=0.0, exclusive_min=True),
        },
        "baselines": _bool(raw, "baselines", "", False),
        "baseline_opts": {
            "B": _int(baseline_opts, "B", "baseline_opts", default=32, minimum=1),
            "max_epochs": _int(baseline_opts, "max_epochs", "baseline_opts",
                               default=200, minimum=1),
            "patience": _int(baseline_opts, "patience", "baseline_opts",
                             default=10, minimum=1),
        },
        "dropout_active": _bool(raw, "dropout_active", "", True),
        "validate_on_all": _bool(raw, "validate_on_all", "", True),
        "sweep": None,
        "attack": None,
    }
    if raw.get("sweep") is not None:
        resolved["sweep"] = _resolve_sweep(_require_mapping(raw, "sweep", "sweep"))
    if raw.get("attack") is not None:
        resolved["attack"] = _resolve_attack(_require_mapping(raw, "attack", "attack"))
    return resolved


def cell_seed(base_seed: int, **axis_values) -> int:
    """Stable 63-bit per-cell seed; adding axis values never shifts others."""
    text = f"{base_seed}|" + "|".join(
        f"{k}={axis_values[k]}" for k in sorted(axis_values))
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFFFFFFFFFF


def cell_key(base_seed: int, **axis_values) -> str:
    text = f"{base_seed}|" + "|".join(
        f"{k}={axis_values[k]}" for k in sorted(axis_values))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
