"""Experiment execution: config -> records.

Builds datasets, clients, model specs and strategies from a resolved config
and runs single experiments, resumable sweeps, and attack campaigns. Every
record embeds the fully resolved config it was produced from.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attacks, metrics, neural, protocol, strategies
from .config import cell_key, cell_seed, resolve_config
from .data import (ClientDataset, Dataset, PartitionPlan, load_client_dir,
                   load_idx, partition, pooled_train, pooled_val, synth_dataset)
from .errors import ConfigError, DivergedError
from .neural import ModelSpec
from .protocol import NetworkModel, RunOptions, TrainingRun
from .strategies import OptimizerConfig, StrategyConfig


def _timestamp() -> str:
    return time.strftime("%Y-%m-%d %H:%M:%S")


def build_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    if ds["source"] == "synth":
        return synth_dataset(ds["n"], ds["n_classes"], ds["image_side"], ds["seed"],
                             noise_sigma=ds["noise_sigma"],
                             template_contrast=ds["template_contrast"])
    if ds["source"] == "mnist":
        full = load_idx(ds["images"], ds["labels"])
        n = ds["n"]
        if n and n < len(full):
            rng = np.random.default_rng([ds["seed"] & 0xFFFFFFFF, 0x5B])
            idx = rng.choice(len(full), size=n, replace=False)
            return full.subset(np.sort(idx))
        return full
    raise ConfigError("build_dataset cannot handle 'dir' source; use build_clients")


def build_clients(cfg: dict) -> list[ClientDataset]:
    ds = cfg["dataset"]
    if ds["source"] == "dir":
        return load_client_dir(ds["root"])
    dataset = build_dataset(cfg)
    plan = PartitionPlan(
        mode=ds["partition"]["mode"], n_clients=ds["n_clients"],
        max_per_client=ds["max_per_client"], k=ds["partition"]["k"],
        seed=ds["seed"], size_jitter=ds["partition"]["size_jitter"])
    return partition(dataset, plan)


def build_model(cfg: dict, image_shape: tuple[int, ...], n_classes: int) -> ModelSpec:
    m = cfg["model"]
    if m["name"] == "mlp":
        spec = neural.mlp_spec(image_shape, m["hidden"], n_classes,
                               activation=m["activation"],
                               dropout_rate=m["dropout"])
    else:
        spec = neural.cnn_spec(image_shape, n_classes, hidden=m["hidden"][0],
                               activation=m["activation"])
    if m["twice_differentiable"]:
        spec = neural.twice_differentiable(spec)
    return spec


def build_strategy(cfg: dict) -> StrategyConfig:
    s = cfg["strategy"]
    opt = s["optimizer"]
    b = None if s["B"] == "inf" else int(s["B"])
    return StrategyConfig(
        name=s["name"], B=b, C=s["C"], E=s["E"],
        optimizer=OptimizerConfig(kind=opt["kind"], lr=opt["lr"], beta=opt["beta"],
                                  beta1=opt["beta1"], beta2=opt["beta2"],
                                  eps=opt["eps"]),
        aggregate_moments=s["aggregate_moments"], seed=cfg["seed"])


def build_network(cfg: dict) -> NetworkModel:
    net = cfg["network"]

    def bps(mbps):
        return None if mbps == "unlimited" else int(round(mbps * 1_000_000))

    return NetworkModel(client_bandwidth_bps=bps(net["client_bandwidth_mbps"]),
                        server_bandwidth_bps=bps(net["server_bandwidth_mbps"]),
                        latency_s=net["latency_ms"] / 1000.0)


def build_options(cfg: dict) -> RunOptions:
    return RunOptions(max_round=cfg["stop"]["max_round"],
                      patience=cfg["stop"]["patience"],
                      durations_mode=cfg["durations"]["mode"],
                      sim_gflops=cfg["durations"]["sim_gflops"],
                      validate_on_all=cfg["validate_on_all"],
                      dropout_active=cfg["dropout_active"])


def _partition_label(cfg: dict) -> tuple[bool, str]:
    part = cfg["dataset"]["partition"]
    if part["mode"] == "iid":
        return True, "iid"
    return False, f"{part['k']}-class"


def run_experiment(cfg: dict) -> dict:
    """One federated (or baseline-only) experiment -> one flat record."""
    cfg = resolve_config(cfg)
    clients = build_clients(cfg)
    image_shape = clients[0].train.image_shape
    n_classes = clients[0].train.n_classes
    spec = build_model(cfg, image_shape, n_classes)
    strategy = build_strategy(cfg)
    iid, iid_strategy = _partition_label(cfg)

    local_acc = central_acc = None
    if cfg["baselines"] or strategy.name in ("local_only", "central"):
        bl = cfg["baseline_opts"]
        report = strategies.run_baselines(
            spec, clients, strategy.optimizer, B=bl["B"],
            max_epochs=bl["max_epochs"], patience=bl["patience"], seed=cfg["seed"],
            dropout_active=cfg["dropout_active"])
        local_acc, central_acc = report.local_acc, report.central_acc

    if strategy.name in ("fedsgd", "fedavg"):
        run = protocol.run_training(spec, strategy, clients, build_network(cfg),
                                    build_options(cfg))
        fl_acc, per_client = metrics.fl_accuracy(spec, run.best_params, clients)
    else:
        run = TrainingRun(traces=[], stop_reason="max_round",
                          best_params=neural.init_params(spec, cfg["seed"]),
                          best_round=0,
                          final_params=neural.init_params(spec, cfg["seed"]),
                          client_sent_bytes={c.client_id: 0 for c in clients},
                          client_received_bytes={c.client_id: 0 for c in clients})
        fl_acc, per_client = None, ()

    accuracy = metrics.AccuracyReport(fl_acc=fl_acc, local_acc=local_acc,
                                      central_acc=central_acc,
                                      per_client_acc=tuple(per_client))
    return metrics.compile_record(
        run, accuracy, timestamp=_timestamp(), dataset=cfg["dataset"]["source"],
        model=cfg["model"]["name"], optimizer=cfg["strategy"]["optimizer"]["kind"],
        iid=iid, iid_strategy=iid_strategy,
        B=None if cfg["strategy"]["B"] == "inf" else cfg["strategy"]["B"],
        C=cfg["strategy"]["C"], E=cfg["strategy"]["E"],
        lr=cfg["strategy"]["optimizer"]["lr"], patience=cfg["stop"]["patience"],
        max_round=cfg["stop"]["max_round"], seed=cfg["seed"],
        durations_mode=cfg["durations"]["mode"],
        dropout_active=cfg["dropout_active"], config=cfg)


# ---------------------------------------------------------------------------
# Sweeps


def sweep_cells(cfg: dict) -> list[dict]:
    """Materialize one resolved config per sweep cell, each with its own
    derived seed and cell key."""
    sweep = cfg.get("sweep")
    if not sweep:
        raise ConfigError("config has no sweep section", field="sweep")
    axes, repeats = sweep["axes"], sweep["repeats"]
    cells = []
    for b in axes["B"]:
        for c in axes["C"]:
            for e in axes["E"]:
                for lr in axes["lr"]:
                    for opt in axes["optimizer"]:
                        for k in axes["k"]:
                            for rep in range(repeats):
                                cells.append(_make_cell(cfg, b, c, e, lr, opt, k, rep))
    return cells


def _make_cell(cfg, b, c, e, lr, opt, k, rep) -> dict:
    axis = dict(B=b, C=c, E=e, lr=lr, optimizer=opt, k=k, rep=rep)
    cell = json.loads(json.dumps(cfg))  # deep copy
    cell["sweep"] = None
    cell["strategy"]["B"] = b
    cell["strategy"]["C"] = c
    cell["strategy"]["E"] = e
    cell["strategy"]["optimizer"]["kind"] = opt
    cell["strategy"]["optimizer"]["lr"] = lr
    if k == 0:
        cell["dataset"]["partition"]["mode"] = "iid"
    else:
        cell["dataset"]["partition"]["mode"] = "k_class"
        cell["dataset"]["partition"]["k"] = k
    cell["seed"] = cell_seed(cfg["seed"], **axis)
    cell["_cell_key"] = cell_key(cfg["seed"], **axis)
    return cell


def _run_cell(cell: dict) -> dict:
    key = cell.pop("_cell_key")
    try:
        record = run_experiment(cell)
        record["cell_key"] = key
        record["status"] = "ok"
    except DivergedError as exc:
        record = {"cell_key": key, "status": "diverged", "error": str(exc),
                  "timestamp": _timestamp(), "config": cell}
    except Exception as exc:  # per-cell failures never kill the sweep
        record = {"cell_key": key, "status": "failed", "error": str(exc),
                  "timestamp": _timestamp(), "config": cell}
    return record


def run_sweep(cfg: dict, out_path: str | Path, jobs: int = 1) -> list[dict]:
    """Run all sweep cells, skipping ones already present in the output file."""
    cfg = resolve_config(cfg)
    cells = sweep_cells(cfg)
    done = {r.get("cell_key") for r in read_records(out_path)}
    todo = [c for c in cells if c["_cell_key"] not in done]
    records = []
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for record in pool.map(_run_cell, todo):
                append_record(out_path, record)
                records.append(record)
    else:
        for cell in todo:
            record = _run_cell(cell)
            append_record(out_path, record)
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# Attack campaigns


def _train_oracle(cfg: dict, min_acc: float) -> attacks.OracleClassifier:
    """Centrally trained classifier used to label fc reconstructions."""
    ds_cfg = cfg["dataset"]
    dataset = build_dataset(cfg)
    rng = np.random.default_rng([cfg["seed"] & 0xFFFFFFFF, 0x0AC1])
    perm = rng.permutation(len(dataset))
    n_test = max(1, len(dataset) // 10)
    test, train = dataset.subset(perm[:n_test]), dataset.subset(perm[n_test:])
    spec = neural.mlp_spec(dataset.image_shape, [64], dataset.n_classes)
    params = neural.init_params(spec, cfg["seed"])
    params, _ = strategies.train_with_early_stopping(
        spec, params, train, test, OptimizerConfig(kind="adam", lr=1e-3),
        B=32, max_epochs=100, patience=5, seed=cfg["seed"])
    _, acc = neural.evaluate(spec, params, test.images, test.labels)
    if acc < min_acc:
        raise ConfigError(
            f"oracle classifier reached only {acc:.3f} accuracy (need {min_acc})")
    return attacks.OracleClassifier(spec=spec, params=params, test_accuracy=acc)


def attack_cells(cfg: dict) -> list[dict]:
    atk = cfg.get("attack")
    if not atk:
        raise ConfigError("config has no attack section", field="attack")
    cells = []
    for n_images in atk["n_images"]:
        for e in atk["E"]:
            for rep in range(atk["seeds"]):
                cells.append({"n_images": n_images, "E": e, "rep": rep,
                              "seed": cell_seed(cfg["seed"], attack=atk["kind"],
                                                n=n_images, E=e, rep=rep),
                              "key": cell_key(cfg["seed"], attack=atk["kind"],
                                              n=n_images, E=e, rep=rep)})
    return cells


def run_attack_cell(cfg: dict, cell: dict,
                    oracle: attacks.OracleClassifier | None) -> dict:
    """One (n_images, E, seed) attack instance -> one record."""
    atk = cfg["attack"]
    dataset = build_dataset(cfg)
    rng = np.random.default_rng([cell["seed"] & 0xFFFFFFFF, 0xA7])
    idx = rng.choice(len(dataset), size=cell["n_images"], replace=False)
    images, labels = dataset.images[idx], dataset.labels[idx]

    spec = build_model(cfg, dataset.image_shape, dataset.n_classes)
    if atk["kind"] == "dlg":
        spec = neural.twice_differentiable(spec)
    params = neural.init_params(spec, cell["seed"])

    if cell["E"] == 1:
        capture = attacks.capture_fedsgd(spec, params, images, labels,
                                         lr=atk["train_lr"])
        strat_label = "FedSGD"
    else:
        b = None if atk["B"] == "inf" else int(atk["B"])
        capture = attacks.capture_fedavg(spec, params, images, labels,
                                         lr=atk["train_lr"], B=b, E=cell["E"],
                                         seed=cell["seed"])
        strat_label = "FedAvg"
    derived = capture.derived_gradient

    if atk["kind"] == "fc":
        result = attacks.fc_attack(derived, spec, cell["n_images"],
                                   dataset.image_shape)
    else:
        dlg_cfg = attacks.DlgConfig(iterations=atk["iterations"],
                                    lr=atk["attack_lr"], init_seed=cell["seed"])
        result = attacks.dlg_attack(derived, spec, params, cell["n_images"],
                                    dlg_cfg, dataset.image_shape)

    record = {
        "timestamp": _timestamp(),
        "kind": "attack",
        "attack": atk["kind"],
        "model": cfg["model"]["name"],
        "strategy": strat_label.lower(),
        "n_images": cell["n_images"],
        "epochs": cell["E"],
        "seed": cell["seed"],
        "cell_key": cell["key"],
        "approximate_gradient": capture.approximate,
        "failed": result.failed or not result.images,
        "iterations_used": result.iterations_used,
        "final_objective": result.final_objective,
        "label_accuracy": None,
        "l2_distance": None,
        "config": cfg,
    }
    if not record["failed"]:
        oracle_arg = oracle if atk["kind"] == "fc" else None
        acc, l2 = attacks.score_attack(result, images, labels, oracle_arg)
        record["label_accuracy"] = acc
        record["l2_distance"] = l2
    record["_images"] = (images, result)  # stripped before writing
    return record


def attack_summary_line(record: dict, model_label: str) -> str:
    acc = record["label_accuracy"]
    l2 = record["l2_distance"]
    acc_text = "failed" if acc is None else f"{acc:.3f}"
    l2_text = "failed" if l2 is None else repr(l2)
    return (f"{record['attack'].upper()}-{model_label}-"
            f"{'FedSGD' if record['epochs'] == 1 else 'FedAvg'} "
            f"#Images={record['n_images']} #Epochs={record['epochs']} "
            f"LabelAcc={acc_text} L2-Distance={l2_text}")


def _attack_cell_safe(args) -> dict:
    cfg, cell, oracle = args
    try:
        return run_attack_cell(cfg, cell, oracle)
    except Exception as exc:
        return {"timestamp": _timestamp(), "kind": "attack",
                "attack": cfg["attack"]["kind"], "cell_key": cell["key"],
                "n_images": cell["n_images"], "epochs": cell["E"],
                "seed": cell["seed"], "failed": True, "error": str(exc),
                "label_accuracy": None, "l2_distance": None, "config": cfg}


def run_attack_campaign(cfg: dict, out_path: str | Path, jobs: int = 1,
                        dump_dir: str | Path | None = None,
                        echo=print) -> list[dict]:
    cfg = resolve_config(cfg)
    if not cfg.get("attack"):
        raise ConfigError("config has no attack section", field="attack")
    atk = cfg["attack"]
    oracle = _train_oracle(cfg, atk["oracle_min_acc"]) if atk["kind"] == "fc" else None
    model_label = cfg["model"]["name"].upper()
    cells = attack_cells(cfg)
    jobs = max(1, jobs)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_attack_cell_safe,
                                    [(cfg, cell, oracle) for cell in cells]))
    else:
        results = [_attack_cell_safe((cfg, cell, oracle)) for cell in cells]
    records = []
    for record in results:
        images_result = record.pop("_images", None)
        if dump_dir is not None and images_result is not None:
            truth, result = images_result
            cell_dir = Path(dump_dir) / record["cell_key"]
            attacks.dump_attack_images(cell_dir, truth, result)
            record["images_dir"] = str(cell_dir)
        append_record(out_path, record)
        if "error" not in record:
            echo(attack_summary_line(record, model_label))
        records.append(record)
    return records


# ---------------------------------------------------------------------------
# Record IO


def append_record(path: str | Path, record: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {k: v for k, v in record.items() if not k.startswith("_")}
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(clean) + "\n")


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
