"""Experiment orchestration: the round loop, metrics, and checkpoints.

A run is deterministic given its config: datasets, client sampling,
minibatch shuffles, and initialization all come from counter-based
streams keyed by (seed, purpose, client, round), so resuming from a
checkpoint replays exactly the rounds an uninterrupted run would have
produced. Wall-clock timings are recorded but are the one field outside
the determinism contract.
"""

from __future__ import annotations

import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models
from .data import (
    FederatedDataset,
    PartitionPlan,
    SyntheticConfig,
    generate_synthetic,
    load_mnist_idx,
    partition,
)
from .errors import (
    DimensionError,
    EmptyEvaluationError,
    FormatError,
    LengthError,
    ParameterError,
    RunError,
    VersionError,
)
from .federation import (
    AlgoConfig,
    ClientState,
    ServerState,
    apply_update,
    download_vectors,
    gradient_variance_diagnostic,
    run_local_round,
    sample_active_set,
    server_aggregate,
    steps_per_round,
)
from .models import ModelSpec, init_params
from .rng import stream
from .vectors import ParamVector

__all__ = [
    "MnistConfig",
    "ExperimentConfig",
    "RoundRecord",
    "RunSummary",
    "FederatedRun",
    "run_experiment",
    "rounds_to_target",
    "summarize",
    "centralized_oracle",
    "checkpoint_save",
    "checkpoint_load",
    "write_records_csv",
    "write_summary_json",
    "CSV_HEADER",
    "dataset_label",
]

CSV_HEADER = (
    "round,algorithm,dataset,seed,test_accuracy,train_loss,"
    "bytes_up,bytes_down,grad_variance,wall_ms"
)

_CKPT_MAGIC = b"FDRC"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class MnistConfig:
    """IDX-file dataset plus how to deal it to clients."""

    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    n_clients: int = 100
    plan: PartitionPlan = field(default_factory=PartitionPlan)
    subsample: int | None = None  # keep only the first n train samples

    def __post_init__(self):
        if self.n_clients < 1:
            raise ParameterError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.subsample is not None and self.subsample < 1:
            raise ParameterError("subsample must be >= 1 when given")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: object  # SyntheticConfig | MnistConfig | prebuilt FederatedDataset
    model: ModelSpec
    algo: AlgoConfig
    rounds: int
    eval_every: int = 1
    target_accuracies: tuple = ()
    seed: int = 0
    stop_at_target: float | None = None
    n_workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")
        if self.eval_every < 1:
            raise ParameterError(f"eval_every must be >= 1, got {self.eval_every}")
        targets = tuple(float(t) for t in self.target_accuracies)
        if any(not 0 < t < 1 for t in targets):
            raise ParameterError(f"targets must lie in (0, 1), got {targets}")
        object.__setattr__(self, "target_accuracies", targets)
        if self.stop_at_target is not None and not 0 < self.stop_at_target < 1:
            raise ParameterError("stop_at_target must lie in (0, 1) when given")
        if self.n_workers < 1:
            raise ParameterError("n_workers must be >= 1")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float | None
    train_loss: float | None
    bytes_up: int
    bytes_down: int
    grad_variance: float | None
    wall_ms: int


@dataclass(frozen=True)
class RunSummary:
    rounds_to_target: dict
    best_accuracy: float
    speedup_vs_baseline: float | None = None


def build_dataset(dataset_cfg) -> FederatedDataset:
    if isinstance(dataset_cfg, FederatedDataset):
        return dataset_cfg
    if isinstance(dataset_cfg, SyntheticConfig):
        return generate_synthetic(dataset_cfg)
    if isinstance(dataset_cfg, MnistConfig):
        x, y = load_mnist_idx(dataset_cfg.train_images, dataset_cfg.train_labels)
        xt, yt = load_mnist_idx(dataset_cfg.test_images, dataset_cfg.test_labels)
        if dataset_cfg.subsample is not None:
            x, y = x[: dataset_cfg.subsample], y[: dataset_cfg.subsample]
        parts = partition(y, dataset_cfg.n_clients, dataset_cfg.plan)
        plan = dataset_cfg.plan
        return FederatedDataset(
            train_inputs=x,
            train_labels=y,
            test_inputs=xt,
            test_labels=yt,
            partitions=tuple(parts),
            num_classes=int(max(y.max(), yt.max())) + 1,
            meta={
                "source": "mnist",
                "mode": plan.mode,
                "conc": plan.conc,
                "balance": plan.balance,
                "n_clients": dataset_cfg.n_clients,
                "seed": plan.seed,
            },
        )
    raise ParameterError(f"unsupported dataset config {type(dataset_cfg).__name__}")


def dataset_label(ds: FederatedDataset) -> str:
    meta = ds.meta
    src = meta.get("source", "custom")
    if "name" in meta:
        return str(meta["name"])
    if src == "synthetic":
        # Semicolon, not comma: the label becomes a CSV cell.
        return f"synthetic({meta.get('gamma1', 0):g};{meta.get('gamma2', 0):g})"
    if src == "mnist":
        tag = "iid" if meta.get("mode") == "iid" else f"d{meta.get('conc'):g}"
        if meta.get("balance") == "lognormal":
            tag += "-unbalanced"
        return f"mnist-{tag}"
    return src


class FederatedRun:
    """One deterministic experiment: immutable config, mutable progress.

    Client training inside a round may fan out to a thread pool; each
    task reads only round-start snapshots and the aggregation folds the
    gathered updates in client-id order, so the worker count cannot
    change any result.
    """

    def __init__(self, cfg: ExperimentConfig, dataset: FederatedDataset | None = None):
        self.cfg = cfg
        self.dataset = dataset if dataset is not None else build_dataset(cfg.dataset)
        ds = self.dataset
        if ds.train_inputs.shape[1] != cfg.model.input_dim:
            raise DimensionError(
                f"dataset has {ds.train_inputs.shape[1]} features, "
                f"model expects {cfg.model.input_dim}"
            )
        if ds.num_classes > cfg.model.num_classes:
            raise DimensionError(
                f"dataset has {ds.num_classes} classes, model only {cfg.model.num_classes}"
            )
        self._client_data = [ds.client_arrays(i) for i in range(ds.n_clients)]
        init = init_params(cfg.model, stream(cfg.seed, "global-init"))
        self.server = ServerState.fresh(init, ds.n_clients, cfg.seed)
        self.clients = [
            ClientState.fresh(i, init, len(ds.partitions[i]))
            for i in range(ds.n_clients)
        ]
        pooled = ds.pooled_indices()
        self._pool = (ds.train_inputs[pooled], ds.train_labels[pooled])
        self.records: list[RoundRecord] = []
        self.param_history: list = []

    @property
    def round(self) -> int:
        return self.server.round

    def _train_one(self, client_id: int):
        x, y = self._client_data[client_id]
        rng = stream(
            self.cfg.seed, "batch-shuffle", client=client_id, round_index=self.server.round
        )
        return run_local_round(
            self.clients[client_id], self.server, self.cfg.algo, x, y, rng, self.cfg.model
        )

    def run_round(self) -> RoundRecord:
        cfg = self.cfg
        t = self.server.round
        start = time.perf_counter()
        try:
            active = sample_active_set(
                self.dataset.n_clients,
                cfg.algo.participation,
                t,
                stream(cfg.seed, "participation", round_index=t),
            )
            if cfg.n_workers > 1:
                with ThreadPoolExecutor(max_workers=cfg.n_workers) as pool:
                    updates = list(pool.map(self._train_one, active))
            else:
                updates = [self._train_one(i) for i in active]
            grad_var = gradient_variance_diagnostic(updates, self.server, cfg.algo)
            self.server = server_aggregate(self.server, updates, cfg.algo)
            for up in updates:
                apply_update(self.clients[up.client_id], up)
        except Exception as exc:
            raise RunError(f"round {t + 1}: {exc}") from exc

        round_number = self.server.round  # 1-based once aggregated
        param_count = len(self.server.global_params)
        bytes_up = sum(up.bytes_up for up in updates)
        bytes_down = len(active) * download_vectors(cfg.algo) * 8 * param_count

        test_acc = train_loss = None
        if round_number % cfg.eval_every == 0 or round_number == cfg.rounds:
            test_acc = self.evaluate_accuracy()
            train_loss = self.evaluate_train_loss()
        wall_ms = int(round((time.perf_counter() - start) * 1000))
        rec = RoundRecord(
            round=round_number,
            test_accuracy=test_acc,
            train_loss=train_loss,
            bytes_up=bytes_up,
            bytes_down=bytes_down,
            grad_variance=grad_var,
            wall_ms=wall_ms,
        )
        self.records.append(rec)
        return rec

    def evaluate_accuracy(self) -> float:
        """Top-1 accuracy of the global model on the pooled test set."""
        return models.accuracy(
            self.cfg.model,
            self.server.global_params,
            self.dataset.test_inputs,
            self.dataset.test_labels,
        )

    def evaluate_train_loss(self) -> float:
        """Loss of the global model over the union of train partitions."""
        return models.mean_loss(self.cfg.model, self.server.global_params, *self._pool)

    def run_to_completion(self, keep_params: bool = False):
        cfg = self.cfg
        while self.server.round < cfg.rounds:
            rec = self.run_round()
            if keep_params and rec.test_accuracy is not None:
                self.param_history.append((rec.round, self.server.global_params))
            if (
                cfg.stop_at_target is not None
                and rec.test_accuracy is not None
                and rec.test_accuracy >= cfg.stop_at_target
            ):
                break
        return self.records, summarize(self.records, cfg.target_accuracies)


def run_experiment(cfg: ExperimentConfig, dataset: FederatedDataset | None = None):
    """Execute a full run; returns (records, summary)."""
    return FederatedRun(cfg, dataset).run_to_completion()


def rounds_to_target(records, target: float):
    """First round whose recorded test accuracy meets the target, else None."""
    records = list(records)
    if not records:
        raise EmptyEvaluationError("rounds_to_target over no records")
    for rec in records:
        if rec.test_accuracy is not None and rec.test_accuracy >= target:
            return rec.round
    return None


def summarize(records, targets) -> RunSummary:
    accs = [r.test_accuracy for r in records if r.test_accuracy is not None]
    best = max(accs) if accs else float("nan")
    return RunSummary(
        rounds_to_target={t: rounds_to_target(records, t) for t in targets},
        best_accuracy=best,
    )


def centralized_oracle(cfg: ExperimentConfig, fed_params=None,
                       dataset: FederatedDataset | None = None):
    """Plain SGD on the pooled training data at matched compute.

    Runs one pseudo-client over the union of all partitions for
    cfg.rounds rounds of round(mean K_i) SGD steps each, with the same
    initialization stream, learning-rate schedule, and evaluation
    cadence as the federated run. When `fed_params` (pairs of
    (round, ParamVector) from a federated run sharing the seed) is
    given, also returns the L2 distance series between the two
    parameter trajectories at matching rounds.
    """
    ds = dataset if dataset is not None else build_dataset(cfg.dataset)
    pooled = ds.pooled_indices()
    x, y = ds.train_inputs[pooled], ds.train_labels[pooled]
    algo = AlgoConfig(
        "fedavg",
        lr=cfg.algo.lr,
        lr_decay=cfg.algo.lr_decay,
        local_epochs=cfg.algo.local_epochs,
        batch_size=cfg.algo.batch_size,
    )
    budget = max(
        1, round(float(np.mean([steps_per_round(p.size, algo) for p in ds.partitions])))
    )
    init = init_params(cfg.model, stream(cfg.seed, "global-init"))
    server = ServerState.fresh(init, 1, cfg.seed)
    client = ClientState.fresh(0, init, len(pooled))
    records = []
    fed_by_round = dict(fed_params) if fed_params is not None else None
    distances = [] if fed_params is not None else None
    for t in range(cfg.rounds):
        start = time.perf_counter()
        rng = stream(cfg.seed, "batch-shuffle", client=0, round_index=t)
        up = run_local_round(
            client, server, algo, x, y, rng, cfg.model, step_budget=budget
        )
        server = server_aggregate(server, [up], algo)
        apply_update(client, up)
        rnum = server.round
        acc = loss = None
        if rnum % cfg.eval_every == 0 or rnum == cfg.rounds:
            acc = models.accuracy(
                cfg.model, server.global_params, ds.test_inputs, ds.test_labels
            )
            loss = models.mean_loss(cfg.model, server.global_params, x, y)
            if distances is not None and rnum in fed_by_round:
                gap = fed_by_round[rnum].values - server.global_params.values
                distances.append((rnum, float(np.linalg.norm(gap))))
        records.append(
            RoundRecord(
                round=rnum,
                test_accuracy=acc,
                train_loss=loss,
                bytes_up=0,
                bytes_down=0,
                grad_variance=None,
                wall_ms=int(round((time.perf_counter() - start) * 1000)),
            )
        )
    if distances is not None:
        return records, distances
    return records, None


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary, JSON header + length-prefixed LE f64 vectors.
# ---------------------------------------------------------------------------


def _write_vec(fh, vec: ParamVector):
    data = vec.values.astype("<f8", copy=False).tobytes()
    fh.write(struct.pack("<Q", len(vec)))
    fh.write(data)


def _read_vec(fh, path) -> ParamVector:
    raw = fh.read(8)
    if len(raw) != 8:
        raise LengthError(f"{path}: truncated vector length prefix")
    (n,) = struct.unpack("<Q", raw)
    data = fh.read(8 * n)
    if len(data) != 8 * n:
        raise LengthError(f"{path}: truncated vector payload ({len(data)} of {8 * n} bytes)")
    return ParamVector(np.frombuffer(data, dtype="<f8"))


def checkpoint_save(path, server: ServerState, clients) -> None:
    header = {
        "round": server.round,
        "n_clients": server.n_clients,
        "param_count": len(server.global_params),
        "rng_seed": server.rng_seed,
        "client_ids": [c.client_id for c in clients],
        "n_samples": [c.n_samples for c in clients],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(blob)))
        fh.write(blob)
        for vec in (
            server.global_params,
            server.global_delta,
            server.scaffold_c,
            server.dyn_corrector,
        ):
            _write_vec(fh, vec)
        for c in clients:
            for vec in (c.theta, c.drift, c.last_delta, c.scaffold_c):
                _write_vec(fh, vec)


def checkpoint_load(path):
    """Returns (server, clients) exactly as saved."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise LengthError(f"{path}: truncated checkpoint header")
        version, hlen = struct.unpack("<II", raw)
        if version != _CKPT_VERSION:
            raise VersionError(
                f"{path}: checkpoint version {version}, expected {_CKPT_VERSION}"
            )
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise LengthError(f"{path}: truncated checkpoint header payload")
        try:
            header = json.loads(blob.decode("utf-8"))
        except ValueError as exc:
            raise FormatError(f"{path}: unreadable checkpoint header: {exc}") from exc
        server = ServerState(
            global_params=_read_vec(fh, path),
            global_delta=_read_vec(fh, path),
            scaffold_c=_read_vec(fh, path),
            dyn_corrector=_read_vec(fh, path),
            round=int(header["round"]),
            n_clients=int(header["n_clients"]),
            rng_seed=int(header["rng_seed"]),
        )
        clients = []
        for cid, n in zip(header["client_ids"], header["n_samples"]):
            clients.append(
                ClientState(
                    client_id=int(cid),
                    theta=_read_vec(fh, path),
                    drift=_read_vec(fh, path),
                    last_delta=_read_vec(fh, path),
                    scaffold_c=_read_vec(fh, path),
                    n_samples=int(n),
                )
            )
    return server, clients


def checkpoint_restore(run: FederatedRun, path) -> FederatedRun:
    """Load saved states into a freshly built run of the same config."""
    server, clients = checkpoint_load(path)
    if server.n_clients != run.dataset.n_clients:
        raise FormatError(
            f"checkpoint holds {server.n_clients} clients, run has {run.dataset.n_clients}"
        )
    if len(server.global_params) != run.cfg.model.param_count:
        raise FormatError(
            f"checkpoint holds {len(server.global_params)} parameters, "
            f"model expects {run.cfg.model.param_count}"
        )
    run.server = server
    run.clients = clients
    return run


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_records_csv(path, records, algorithm: str, dataset: str, seed: int) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            ",".join(
                [
                    str(r.round),
                    algorithm,
                    dataset,
                    str(seed),
                    _fmt(r.test_accuracy),
                    _fmt(r.train_loss),
                    str(r.bytes_up),
                    str(r.bytes_down),
                    _fmt(r.grad_variance),
                    str(r.wall_ms),
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary_json(path, summary: RunSummary) -> None:
    payload = {
        "best_accuracy": summary.best_accuracy,
        "rounds_to_target": {repr(t): n for t, n in summary.rounds_to_target.items()},
        "speedup_vs_baseline": summary.speedup_vs_baseline,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
