"""Benchmark reports: accuracy, communication, time decomposition, robustness.

``compile_record`` flattens one federated run (plus optional baselines) into
the frozen tabular record documented in docs/records.md; the same record is
what the CLI appends to its JSONL output and renders as CSV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import neural
from .data import ClientDataset
from .errors import MetricError
from .neural import ModelSpec, ParamVector
from .protocol import SUBSTEPS, TrainingRun
from .strategies import weights_from_sizes

MIB = 1024.0 * 1024.0

# Every run record carries at least these keys, in this order.
RECORD_COLUMNS = (
    "timestamp", "dataset", "model", "optimizer", "gradient_filter", "iid",
    "iid_strategy", "compress", "compress_rate", "B", "C", "E", "lr",
    "early_stop_patience", "max_round", "device", "seed", "durations_mode",
    "dropout_active", "local_acc", "central_acc", "fl_acc", "time_all",
    "time_init", "time_tra_req", "time_tra_run", "time_tra_sync",
    "time_tra_agg", "time_val_req", "time_val_run", "time_val_sync",
    "time_val_agg", "comm_round", "comm_amount_server_send_bytes",
    "comm_amount_server_receive_bytes", "comm_amount_server_send_mib",
    "comm_amount_server_receive_mib", "client_avg_sent_bytes",
    "client_avg_received_bytes", "stop_reason",
)


@dataclass(frozen=True)
class AccuracyReport:
    fl_acc: float
    local_acc: float | None
    central_acc: float | None
    per_client_acc: tuple[float, ...]


@dataclass(frozen=True)
class CommReport:
    comm_round: int
    server_sent_bytes: int
    server_received_bytes: int
    avg_client_sent_bytes: float
    avg_client_received_bytes: float


@dataclass(frozen=True)
class TimeReport:
    time_all_s: float
    substep_means_s: dict[str, float]


def fl_accuracy(spec: ModelSpec, params: ParamVector,
                clients: list[ClientDataset]) -> tuple[float, tuple[float, ...]]:
    """n_k-weighted mean of per-client test accuracies under one global model."""
    for c in clients:
        if len(c.test) == 0:
            raise MetricError(f"client {c.client_id} has an empty test set")
    p = weights_from_sizes([c.n_k for c in clients])
    accs = [neural.evaluate(spec, params, c.test.images, c.test.labels)[1]
            for c in clients]
    return float(np.dot(p, accs)), tuple(accs)


def delta_accuracy_loss(fl_acc: float, central_acc: float, delta: float) -> bool:
    """True when the federated model is within delta of centralized training."""
    if delta <= 0:
        raise MetricError("delta must be positive")
    return abs(fl_acc - central_acc) < delta


def comm_report(run: TrainingRun) -> CommReport:
    n = len(run.client_sent_bytes)
    return CommReport(
        comm_round=run.comm_round,
        server_sent_bytes=run.server_sent_bytes,
        server_received_bytes=run.server_received_bytes,
        avg_client_sent_bytes=sum(run.client_sent_bytes.values()) / n,
        avg_client_received_bytes=sum(run.client_received_bytes.values()) / n,
    )


def time_report(run: TrainingRun) -> TimeReport:
    rounds = max(1, run.comm_round)
    means = {s: sum(t.durations_ns[s] for t in run.traces) / rounds / 1e9
             for s in SUBSTEPS}
    if not run.traces:
        means = {s: 0.0 for s in SUBSTEPS}
    return TimeReport(time_all_s=run.time_all_s, substep_means_s=means)


def compile_record(run: TrainingRun, accuracy: AccuracyReport, *,
                   timestamp: str, dataset: str, model: str, optimizer: str,
                   iid: bool, iid_strategy: str, B: int | None, C: float, E: int,
                   lr: float, patience: int, max_round: int, seed: int,
                   durations_mode: str, dropout_active: bool,
                   config: dict | None = None) -> dict:
    """One flat result row; every listed column is always present."""
    comm = comm_report(run)
    times = time_report(run)
    record = {
        "timestamp": timestamp,
        "dataset": dataset,
        "model": model,
        "optimizer": optimizer,
        "gradient_filter": "none",
        "iid": int(iid),
        "iid_strategy": iid_strategy,
        "compress": "no-compress",
        "compress_rate": 1.0,
        "B": "inf" if B is None else int(B),
        "C": float(C),
        "E": int(E),
        "lr": float(lr),
        "early_stop_patience": int(patience),
        "max_round": int(max_round),
        "device": "sim",
        "seed": int(seed),
        "durations_mode": durations_mode,
        "dropout_active": bool(dropout_active),
        "local_acc": accuracy.local_acc,
        "central_acc": accuracy.central_acc,
        "fl_acc": accuracy.fl_acc,
        "time_all": times.time_all_s,
        "time_init": times.substep_means_s["init"],
        "time_tra_req": times.substep_means_s["tra_req"],
        "time_tra_run": times.substep_means_s["tra_run"],
        "time_tra_sync": times.substep_means_s["tra_sync"],
        "time_tra_agg": times.substep_means_s["tra_agg"],
        "time_val_req": times.substep_means_s["val_req"],
        "time_val_run": times.substep_means_s["val_run"],
        "time_val_sync": times.substep_means_s["val_sync"],
        "time_val_agg": times.substep_means_s["val_agg"],
        "comm_round": comm.comm_round,
        "comm_amount_server_send_bytes": comm.server_sent_bytes,
        "comm_amount_server_receive_bytes": comm.server_received_bytes,
        "comm_amount_server_send_mib": comm.server_sent_bytes / MIB,
        "comm_amount_server_receive_mib": comm.server_received_bytes / MIB,
        "client_avg_sent_bytes": comm.avg_client_sent_bytes,
        "client_avg_received_bytes": comm.avg_client_received_bytes,
        "stop_reason": run.stop_reason,
    }
    if config is not None:
        record["config"] = config
    return record


def robustness_deltas(by_setting: dict[str, float], baseline: str = "iid"
                      ) -> dict[str, float]:
    """Accuracy drop of each setting relative to the IID run (positive = worse)."""
    if baseline not in by_setting:
        raise MetricError(f"missing baseline setting {baseline!r}")
    ref = by_setting[baseline]
    return {setting: ref - acc for setting, acc in by_setting.items()
            if setting != baseline}


def eligible_cells(records: list[dict], delta: float = 0.01) -> list[dict]:
    """Sweep cells within delta accuracy loss of centralized training,
    sorted fastest first. Cells lacking central_acc or fl_acc are skipped."""
    keep = []
    for r in records:
        fl, central = r.get("fl_acc"), r.get("central_acc")
        if fl is None or central is None or r.get("time_all") is None:
            continue
        if delta_accuracy_loss(fl, central, delta):
            keep.append(r)
    return sorted(keep, key=lambda r: r["time_all"])


def select_best_cell(records: list[dict], delta: float = 0.01) -> dict | None:
    """The fastest cell among those within delta of centralized accuracy;
    falls back to the highest-accuracy cell when none qualifies."""
    ranked = eligible_cells(records, delta)
    if ranked:
        return ranked[0]
    scored = [r for r in records if r.get("fl_acc") is not None]
    if not scored:
        return None
    return max(scored, key=lambda r: r["fl_acc"])
