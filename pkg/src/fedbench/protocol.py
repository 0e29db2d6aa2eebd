"""Server/client round state machine over a byte-metered simulated network.

Every parameter exchange goes through one wire format: a 24-byte header
(magic, round, sender, value count) followed by little-endian float32
values, so byte accounting is exact by construction. The clock is integer
nanoseconds; per-round time is decomposed into nine substeps:

    init      client selection (plus the round-1 weight broadcast)
    tra_req   training requests to the selected clients (fan-out)
    tra_run   clients' local training (parallel: max over clients)
    tra_sync  weight/gradient uploads (server ingress is sequential: sum)
    tra_agg   server-side aggregation and optimizer step
    val_req   broadcast of the new weights (fan-out)
    val_run   clients' local validation (parallel: max)
    val_sync  validation result uploads (sum)
    val_agg   weighted mean of validation metrics

Fan-out steps take the maximum over the parallel per-client transfers;
uploads are serialized at the server, matching how sync time grows with
participation on a real parameter server. In ``simulated`` durations mode
compute costs come from a FLOP estimate at a fixed simulated rate
(deterministic); ``measured`` mode wall-clocks the local computations.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import neural, strategies
from .data import ClientDataset
from .errors import ConfigError, DivergedError, NumericError, ProtocolError
from .neural import ModelSpec, ParamVector
from .strategies import StrategyConfig

Array = np.ndarray

SUBSTEPS = ("init", "tra_req", "tra_run", "tra_sync", "tra_agg",
            "val_req", "val_run", "val_sync", "val_agg")

WIRE_MAGIC = b"FBPARAMS"
HEADER_FORMAT = "<8sIiQ"  # magic, round, sender, value count
HEADER_BYTES = struct.calcsize(HEADER_FORMAT)
assert HEADER_BYTES == 24

SERVER_ID = -1

# Simulated server-side costs, in nanoseconds.
SELECT_NS_PER_CLIENT = 1_000
AGG_NS_PER_VALUE = 1
VAL_AGG_NS_PER_RESULT = 1_000


def serialize_params(values: Array | ParamVector, round_no: int = 0,
                     sender: int = SERVER_ID) -> bytes:
    """Header + float32 little-endian values; 24 + 4*len bytes exactly."""
    if isinstance(values, ParamVector):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    payload = values.astype("<f4").tobytes()
    header = struct.pack(HEADER_FORMAT, WIRE_MAGIC, round_no, sender, values.size)
    return header + payload


def deserialize_params(data: bytes) -> tuple[Array, int, int]:
    """Inverse of serialize_params; returns (float64 values, round, sender)."""
    if len(data) < HEADER_BYTES:
        raise ProtocolError("payload shorter than header")
    magic, round_no, sender, count = struct.unpack_from(HEADER_FORMAT, data)
    if magic != WIRE_MAGIC:
        raise ProtocolError(f"bad payload magic {magic!r}")
    if len(data) != HEADER_BYTES + 4 * count:
        raise ProtocolError(
            f"payload length {len(data)} does not match {count} declared values")
    values = np.frombuffer(data, dtype="<f4", offset=HEADER_BYTES).astype(np.float64)
    return values, round_no, sender


def payload_bytes(n_values: int) -> int:
    return HEADER_BYTES + 4 * n_values


@dataclass(frozen=True)
class Message:
    kind: str  # init | train_request | weight_upload | weight_broadcast | val_request | val_result
    sender: int
    receiver: int
    round_no: int
    payload: bytes

    @property
    def size(self) -> int:
        return len(self.payload)


@dataclass(frozen=True)
class NetworkModel:
    """Per-message cost: latency + bytes*8/bandwidth. None = unlimited."""

    client_bandwidth_bps: int | None = 100_000_000
    server_bandwidth_bps: int | None = None
    latency_s: float = 0.005

    def __post_init__(self):
        for bw in (self.client_bandwidth_bps, self.server_bandwidth_bps):
            if bw is not None and bw <= 0:
                raise ConfigError("bandwidth must be positive (or None for unlimited)")
        if self.latency_s < 0:
            raise ConfigError("latency must be nonnegative")

    @property
    def latency_ns(self) -> int:
        return int(round(self.latency_s * 1e9))


def _bits_ns(n_bytes: int, bandwidth_bps: int | None) -> int:
    if bandwidth_bps is None:
        return 0
    bw = int(bandwidth_bps)
    return (n_bytes * 8 * 1_000_000_000 + bw // 2) // bw


def transfer_ns(n_bytes: int, network: NetworkModel, side: str = "client") -> int:
    """Nanoseconds to move n_bytes over one link (client side by default)."""
    if n_bytes < 0:
        raise ConfigError("byte count must be nonnegative")
    bw = (network.client_bandwidth_bps if side == "client"
          else network.server_bandwidth_bps)
    return network.latency_ns + _bits_ns(n_bytes, bw)


def transfer_time(n_bytes: int, network: NetworkModel, side: str = "client") -> float:
    """Seconds; convenience wrapper over the integer-ns computation."""
    return transfer_ns(n_bytes, network, side) / 1e9


@dataclass(frozen=True)
class RoundTrace:
    round_no: int
    durations_ns: dict[str, int]
    bytes_server_sent: int
    bytes_server_received: int
    participants: tuple[int, ...]
    val_loss: float
    val_acc: float

    @property
    def total_ns(self) -> int:
        return sum(self.durations_ns[s] for s in SUBSTEPS)

    def durations_s(self) -> dict[str, float]:
        return {s: self.durations_ns[s] / 1e9 for s in SUBSTEPS}


@dataclass
class TrainingRun:
    traces: list[RoundTrace]
    stop_reason: str  # early_stop | max_round
    best_params: ParamVector
    best_round: int
    final_params: ParamVector
    client_sent_bytes: dict[int, int]
    client_received_bytes: dict[int, int]

    @property
    def comm_round(self) -> int:
        return len(self.traces)

    @property
    def time_all_ns(self) -> int:
        return sum(t.total_ns for t in self.traces)

    @property
    def time_all_s(self) -> float:
        return self.time_all_ns / 1e9

    @property
    def server_sent_bytes(self) -> int:
        return sum(t.bytes_server_sent for t in self.traces)

    @property
    def server_received_bytes(self) -> int:
        return sum(t.bytes_server_received for t in self.traces)


@dataclass(frozen=True)
class RunOptions:
    max_round: int = 500
    patience: int = 20
    durations_mode: str = "simulated"  # simulated | measured
    sim_gflops: float = 1.0
    validate_on_all: bool = True  # False = lazy updating: only participants validate
    dropout_active: bool = True

    def __post_init__(self):
        if self.durations_mode not in ("simulated", "measured"):
            raise ConfigError("durations_mode must be 'simulated' or 'measured'")
        if self.max_round < 0 or self.patience < 1:
            raise ConfigError("max_round must be >= 0 and patience >= 1")
        if self.sim_gflops <= 0:
            raise ConfigError("sim_gflops must be positive")


class _Meter:
    """Accumulates per-client and per-round byte counters."""

    def __init__(self, n_clients: int):
        self.client_sent = {i: 0 for i in range(n_clients)}
        self.client_received = {i: 0 for i in range(n_clients)}
        self.round_server_sent = 0
        self.round_server_received = 0

    def start_round(self):
        self.round_server_sent = 0
        self.round_server_received = 0

    def server_to_client(self, msg: Message):
        self.round_server_sent += msg.size
        self.client_received[msg.receiver] += msg.size

    def client_to_server(self, msg: Message):
        self.round_server_received += msg.size
        self.client_sent[msg.sender] += msg.size


def run_training(spec: ModelSpec, strategy: StrategyConfig,
                 clients: list[ClientDataset], network: NetworkModel,
                 options: RunOptions,
                 initial_params: ParamVector | None = None) -> TrainingRun:
    """Execute federated rounds until early stopping or the round cap.

    Raises DivergedError if any local computation produces a non-finite
    loss. Returns the best-validation-loss parameters.
    """
    if not clients:
        raise ConfigError("run_training needs at least one client")
    if strategy.name not in ("fedsgd", "fedavg"):
        raise ConfigError(f"run_training cannot execute strategy {strategy.name!r}")
    n_clients = len(clients)
    params = initial_params.copy() if initial_params is not None \
        else neural.init_params(spec, strategy.seed)
    n_values = len(params)

    ns_per_flop = 1.0 / options.sim_gflops
    fwd_flops = neural.forward_flops_per_sample(spec)
    measured = options.durations_mode == "measured"

    server_opt = strategy.optimizer.make_state(n_values) if strategy.name == "fedsgd" else None
    global_moments: tuple[Array, ...] | None = None
    global_step = 0
    if strategy.name == "fedavg" and strategy.aggregate_moments:
        template = strategy.optimizer.make_state(n_values)
        global_moments = template.moments

    meter = _Meter(n_clients)
    traces: list[RoundTrace] = []
    best_loss = float("inf")
    best_params = params.copy()
    best_round = 0
    bad_rounds = 0
    stop_reason = "max_round"

    for round_no in range(1, options.max_round + 1):
        meter.start_round()
        durations = {s: 0 for s in SUBSTEPS}

        # --- Step 1: init (selection; plus the first-round weight broadcast)
        selected = strategies.select_clients(n_clients, strategy.C, round_no, strategy.seed)
        durations["init"] = SELECT_NS_PER_CLIENT * len(selected)
        if round_no == 1:
            fan_out = 0
            blob = serialize_params(params, round_no, SERVER_ID)
            for cid in range(n_clients):
                msg = Message("init", SERVER_ID, cid, round_no, blob)
                meter.server_to_client(msg)
                fan_out = max(fan_out, transfer_ns(msg.size, network, "client"))
            durations["init"] += fan_out

        # --- Step 2a: training requests
        if strategy.name == "fedavg" and global_moments is not None:
            req_values = np.concatenate(global_moments)
        else:
            req_values = np.zeros(0)
        req_blob = serialize_params(req_values, round_no, SERVER_ID)
        fan_out = 0
        for cid in selected:
            msg = Message("train_request", SERVER_ID, cid, round_no, req_blob)
            meter.server_to_client(msg)
            fan_out = max(fan_out, transfer_ns(msg.size, network, "client"))
        durations["tra_req"] = fan_out

        # --- Step 2b: local training
        uploads: list[tuple[int, Array]] = []
        run_ns = 0
        for cid in selected:
            client = clients[cid]
            rng = np.random.default_rng(
                [strategy.seed & 0xFFFFFFFF, 0xC0, round_no, cid])
            t0 = time.perf_counter_ns()
            try:
                if strategy.name == "fedsgd":
                    _, grad = strategies.client_update_fedsgd(
                        spec, params, client, rng=rng,
                        dropout_active=options.dropout_active)
                    upload_values = grad.values
                    flops = 3 * fwd_flops * client.n_k
                else:
                    init_m = None
                    if global_moments is not None:
                        init_m = tuple(m.copy() for m in global_moments)
                    result = strategies.client_update_fedavg(
                        spec, params, client, strategy.B, strategy.E,
                        strategy.optimizer, rng,
                        dropout_active=options.dropout_active,
                        initial_moments=init_m, initial_step=global_step)
                    if global_moments is not None:
                        upload_values = np.concatenate(
                            (result.params.values,) + tuple(result.moments))
                    else:
                        upload_values = result.params.values
                    local_steps = result.steps - global_step
                    flops = (3 * fwd_flops * client.n_k * strategy.E
                             + local_steps * 10 * n_values)
            except NumericError as exc:
                raise DivergedError(f"client {cid} diverged in round {round_no}: {exc}",
                                    round_no) from exc
            elapsed = time.perf_counter_ns() - t0
            cost = elapsed if measured else int(round(flops * ns_per_flop))
            run_ns = max(run_ns, cost)
            uploads.append((cid, upload_values))
        durations["tra_run"] = run_ns

        # --- Step 2c: uploads (sequential server ingress)
        # The wire blob is what gets metered; aggregation consumes the
        # float64 originals so the training trajectory is exactly the
        # mathematical one (serialization precision is tested separately).
        sync_ns = 0
        received: list[tuple[int, Array]] = []
        for cid, values in uploads:
            blob = serialize_params(values, round_no, cid)
            msg = Message("weight_upload", cid, SERVER_ID, round_no, blob)
            meter.client_to_server(msg)
            sync_ns += transfer_ns(msg.size, network, "client")
            received.append((cid, values))
        durations["tra_sync"] = sync_ns

        # --- Step 2d: aggregation (and the server step for fedsgd)
        p = strategies.weights_from_sizes([clients[cid].n_k for cid, _ in received])
        agg_flops = len(received) * n_values * (3 if global_moments is not None else 1)
        if strategy.name == "fedsgd":
            grads = [params.with_values(v) for _, v in received]
            agg_grad = strategies.aggregate(grads, p)
            params, server_opt = neural.optimizer_apply(server_opt, params, agg_grad)
            agg_flops += 10 * n_values
        else:
            if global_moments is not None:
                w_vecs, m_parts = [], []
                for _, v in received:
                    w_vecs.append(params.with_values(v[:n_values]))
                    m_parts.append([v[n_values * (1 + j):n_values * (2 + j)]
                                    for j in range(len(global_moments))])
                params = strategies.aggregate(w_vecs, p)
                global_moments = tuple(
                    sum(pk * parts[j] for pk, parts in zip(p, m_parts))
                    for j in range(len(global_moments)))
                # Step counts are a deterministic function of (n_k, B, E), so
                # they need not travel on the wire.
                local_steps = [strategy.E * -(-clients[cid].n_k // (strategy.B or clients[cid].n_k))
                               for cid, _ in received]
                global_step += max(1, int(round(float(np.dot(p, local_steps)))))
            else:
                params = strategies.aggregate(
                    [params.with_values(v) for _, v in received], p)
        if not np.all(np.isfinite(params.values)):
            raise DivergedError(f"aggregated parameters non-finite in round {round_no}",
                                round_no)
        durations["tra_agg"] = int(round(agg_flops * ns_per_flop))

        # --- Step 3a: broadcast new weights
        val_targets = list(range(n_clients)) if options.validate_on_all else selected
        blob = serialize_params(params, round_no, SERVER_ID)
        fan_out = 0
        for cid in val_targets:
            msg = Message("weight_broadcast", SERVER_ID, cid, round_no, blob)
            meter.server_to_client(msg)
            fan_out = max(fan_out, transfer_ns(msg.size, network, "client"))
        durations["val_req"] = fan_out

        # --- Step 3b: local validation
        val_ns = 0
        results: list[tuple[int, float, float, int]] = []
        for cid in val_targets:
            client = clients[cid]
            val_set = client.val if len(client.val) else client.train
            t0 = time.perf_counter_ns()
            loss, acc = neural.evaluate(spec, params, val_set.images, val_set.labels)
            elapsed = time.perf_counter_ns() - t0
            cost = elapsed if measured else int(round(fwd_flops * len(val_set) * ns_per_flop))
            val_ns = max(val_ns, cost)
            results.append((cid, loss, acc, client.n_k))
        durations["val_run"] = val_ns

        # --- Step 3c: result uploads
        sync_ns = 0
        for cid, loss, acc, n_k in results:
            blob = serialize_params(np.array([loss, acc, float(n_k)]), round_no, cid)
            msg = Message("val_result", cid, SERVER_ID, round_no, blob)
            meter.client_to_server(msg)
            sync_ns += transfer_ns(msg.size, network, "client")
        durations["val_sync"] = sync_ns

        # --- Step 3d: aggregate validation metrics
        weights = strategies.weights_from_sizes([r[3] for r in results])
        val_loss = float(np.dot(weights, [r[1] for r in results]))
        val_acc = float(np.dot(weights, [r[2] for r in results]))
        durations["val_agg"] = VAL_AGG_NS_PER_RESULT * len(results)
        if not np.isfinite(val_loss):
            raise DivergedError(f"validation loss non-finite in round {round_no}", round_no)

        traces.append(RoundTrace(
            round_no=round_no, durations_ns=durations,
            bytes_server_sent=meter.round_server_sent,
            bytes_server_received=meter.round_server_received,
            participants=tuple(selected), val_loss=val_loss, val_acc=val_acc))

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = params.copy()
            best_round = round_no
            bad_rounds = 0
        else:
            bad_rounds += 1
            if bad_rounds >= options.patience:
                stop_reason = "early_stop"
                break

    return TrainingRun(traces=traces, stop_reason=stop_reason, best_params=best_params,
                       best_round=best_round, final_params=params,
                       client_sent_bytes=meter.client_sent,
                       client_received_bytes=meter.client_received)
