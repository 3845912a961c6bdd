"""Client update rules and server aggregation for five algorithms.

The round contract is snapshot-in / gather-out: every client trains from
an immutable copy of the round-start server state, and the server folds
the gathered updates in ascending client-id order, so results do not
depend on scheduling.

Algorithms, by the structure of the gradient each local SGD step uses
(g is the minibatch gradient of the empirical loss at the current theta,
G the round-start global parameters):

  fedavg     g
  fedprox    g + mu * (theta - G)
  scaffold   g + (c - c_i)                        with control variates
  feddyn     g + alpha * (theta - (G - s_i))      s_i = accumulated local updates
  feddc      g + alpha * (theta - (G - h_i))      drift penalty
               + (delta_i_prev - delta_prev) / (K * lr_t)   gradient correction

feddc additionally uploads drift-corrected parameters (theta + h) and the
server averages those, which decouples the global model from the local
optima. Its two correction terms can be ablated independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import models
from .errors import (
    DimensionError,
    EmptyAggregateError,
    ParameterError,
    PartitionError,
)
from .models import ModelSpec
from .rng import RngStream
from .vectors import ParamVector, weighted_mean

__all__ = [
    "ALGORITHMS",
    "ABLATION_TERMS",
    "FULL_ABLATION",
    "AlgoConfig",
    "ClientState",
    "ServerState",
    "ClientUpdate",
    "ablation_from_code",
    "steps_per_round",
    "round_lr",
    "feddc_local_objective",
    "feddc_local_objective_grad",
    "run_local_round",
    "server_aggregate",
    "apply_update",
    "sample_active_set",
    "gradient_variance_diagnostic",
    "upload_vectors",
    "download_vectors",
]

ALGORITHMS = ("fedavg", "fedprox", "scaffold", "feddyn", "feddc")
ABLATION_TERMS = ("empirical", "grad_correction", "param_correction")
FULL_ABLATION = frozenset(ABLATION_TERMS)

# Short codes for the feddc ablation variants: empirical loss only,
# +gradient correction, +parameter correction, both.
_ABLATION_CODES = {
    "le": frozenset({"empirical"}),
    "lelg": frozenset({"empirical", "grad_correction"}),
    "lelp": frozenset({"empirical", "param_correction"}),
    "lelglp": FULL_ABLATION,
}

BYTES_PER_PARAM = 8  # float64 on the wire


def ablation_from_code(code: str) -> frozenset:
    if code not in _ABLATION_CODES:
        raise ParameterError(
            f"unknown ablation code {code!r}; expected one of {sorted(_ABLATION_CODES)}"
        )
    return _ABLATION_CODES[code]


@dataclass(frozen=True)
class AlgoConfig:
    algorithm: str
    lr: float = 0.1
    lr_decay: float = 0.998
    local_epochs: int = 5
    batch_size: int = 50
    participation: float = 1.0
    aggregation_weighting: str = "uniform"  # or "by_samples"
    mu: float = 1e-4
    alpha: float | None = None
    ablation: frozenset = FULL_ABLATION

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ParameterError(f"unknown algorithm {self.algorithm!r}")
        if not (np.isfinite(self.lr) and self.lr > 0):
            raise ParameterError(f"lr must be positive, got {self.lr!r}")
        if not (0 < self.lr_decay <= 1):
            raise ParameterError(f"lr_decay must be in (0, 1], got {self.lr_decay!r}")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ParameterError("local_epochs and batch_size must be >= 1")
        if not (0 < self.participation <= 1):
            raise ParameterError(
                f"participation must be in (0, 1], got {self.participation!r}"
            )
        if self.aggregation_weighting not in ("uniform", "by_samples"):
            raise ParameterError(
                f"unknown aggregation weighting {self.aggregation_weighting!r}"
            )
        if self.mu < 0 or not np.isfinite(self.mu):
            raise ParameterError(f"mu must be >= 0, got {self.mu!r}")
        abl = frozenset(self.ablation)
        if not abl <= set(ABLATION_TERMS):
            raise ParameterError(f"unknown ablation terms {abl - set(ABLATION_TERMS)}")
        if "empirical" not in abl:
            raise ParameterError("the empirical loss term cannot be ablated away")
        object.__setattr__(self, "ablation", abl)
        if self.algorithm == "feddyn":
            if self.alpha is None or not (np.isfinite(self.alpha) and self.alpha > 0):
                raise ParameterError("feddyn requires alpha > 0")
        if self.algorithm == "feddc":
            if self.alpha is None or not (np.isfinite(self.alpha) and self.alpha >= 0):
                raise ParameterError("feddc requires alpha >= 0")


@dataclass
class ClientState:
    """Per-client persistent state; inactive clients keep theirs stale."""

    client_id: int
    theta: ParamVector
    drift: ParamVector        # feddc h_i; feddyn accumulated local updates
    last_delta: ParamVector   # previous round's local update (feddc)
    scaffold_c: ParamVector   # scaffold control variate c_i
    n_samples: int

    @classmethod
    def fresh(cls, client_id: int, global_params: ParamVector, n_samples: int):
        dim = len(global_params)
        zero = ParamVector.zeros(dim)
        return cls(
            client_id=client_id,
            theta=global_params,
            drift=zero,
            last_delta=zero,
            scaffold_c=zero,
            n_samples=int(n_samples),
        )


@dataclass(frozen=True)
class ServerState:
    """Round-start snapshot of everything the server owns.

    Beyond the aggregate parameters this also carries the feddyn server
    corrector (the cited method folds a running penalty-state into the
    global model) and the total client count scaffold's control update
    scales by.
    """

    global_params: ParamVector
    global_delta: ParamVector
    scaffold_c: ParamVector
    dyn_corrector: ParamVector
    round: int
    n_clients: int
    rng_seed: int

    @classmethod
    def fresh(cls, global_params: ParamVector, n_clients: int, rng_seed: int):
        zero = ParamVector.zeros(len(global_params))
        return cls(
            global_params=global_params,
            global_delta=zero,
            scaffold_c=zero,
            dyn_corrector=zero,
            round=0,
            n_clients=int(n_clients),
            rng_seed=int(rng_seed),
        )


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    theta_plus: ParamVector
    drift_plus: ParamVector
    delta: ParamVector
    scaffold_c_plus: ParamVector
    n_samples: int
    k_steps: int
    bytes_up: int


def steps_per_round(n_samples: int, cfg: AlgoConfig) -> int:
    """K = local_epochs * ceil(n_i / batch_size), per client."""
    if n_samples < 1:
        raise PartitionError("client has no samples")
    return cfg.local_epochs * math.ceil(n_samples / cfg.batch_size)


def round_lr(cfg: AlgoConfig, round_index: int) -> float:
    """Learning rate of a round: lr * decay^t, decayed once per round."""
    return cfg.lr * cfg.lr_decay**round_index


def _correction_terms(client: ClientState, server: ServerState, cfg: AlgoConfig,
                      k_steps: int, lr_t: float):
    """Round-constant pieces of the per-step gradient.

    Returns (pull, anchor, extra): the step gradient is
    g + pull * (theta - anchor) + extra, with either piece possibly
    absent. Terms that are structurally off (ablated, zero coefficient,
    or an exactly zero vector) are skipped rather than added, so the
    remaining arithmetic is bit-identical to the plain-SGD path.
    """
    g = server.global_params.values
    algo = cfg.algorithm
    if algo == "fedavg":
        return 0.0, None, None
    if algo == "fedprox":
        if cfg.mu == 0.0:
            return 0.0, None, None
        return cfg.mu, g, None
    if algo == "scaffold":
        corr = server.scaffold_c.values - client.scaffold_c.values
        return 0.0, None, (corr if corr.any() else None)
    if algo == "feddyn":
        return cfg.alpha, g - client.drift.values, None
    # feddc
    pull, anchor, extra = 0.0, None, None
    if "param_correction" in cfg.ablation and cfg.alpha != 0.0:
        pull, anchor = cfg.alpha, g - client.drift.values
    if "grad_correction" in cfg.ablation:
        corr = (client.last_delta.values - server.global_delta.values) / (k_steps * lr_t)
        if corr.any():
            extra = corr
    return pull, anchor, extra


def feddc_local_objective(client: ClientState, server: ServerState, cfg: AlgoConfig,
                          batch: models.Batch, spec: ModelSpec,
                          theta: ParamVector | None = None) -> float:
    """Scalar value of the drift-corrected local objective at theta.

    Used by gradient checks: its finite-difference gradient must match
    :func:`feddc_local_objective_grad`.
    """
    if cfg.algorithm != "feddc":
        raise ParameterError("objective is defined for feddc only")
    th = client.theta if theta is None else theta
    value = models.mean_loss(spec, th, batch.inputs, batch.labels)
    k = steps_per_round(client.n_samples, cfg)
    lr_t = round_lr(cfg, server.round)
    if "param_correction" in cfg.ablation and cfg.alpha != 0.0:
        gap = th.values - (server.global_params.values - client.drift.values)
        value += 0.5 * cfg.alpha * float(gap @ gap)
    if "grad_correction" in cfg.ablation:
        corr = (client.last_delta.values - server.global_delta.values) / (k * lr_t)
        value += float(th.values @ corr)
    return value


def feddc_local_objective_grad(client: ClientState, server: ServerState,
                               cfg: AlgoConfig, batch: models.Batch,
                               spec: ModelSpec) -> ParamVector:
    """Gradient of the drift-corrected local objective at the client's theta."""
    if cfg.algorithm != "feddc":
        raise ParameterError("objective gradient is defined for feddc only")
    if len(client.theta) != spec.param_count:
        raise DimensionError(
            f"client holds {len(client.theta)} parameters, model expects {spec.param_count}"
        )
    k = steps_per_round(client.n_samples, cfg)
    lr_t = round_lr(cfg, server.round)
    pull, anchor, extra = _correction_terms(client, server, cfg, k, lr_t)
    _, grad = models.loss_and_grad(spec, client.theta, batch)
    out = grad.values.copy()
    if anchor is not None and pull != 0.0:
        out += pull * (client.theta.values - anchor)
    if extra is not None:
        out += extra
    return ParamVector(out)


def run_local_round(client: ClientState, server: ServerState, cfg: AlgoConfig,
                    inputs: np.ndarray, labels: np.ndarray, rng: RngStream,
                    spec: ModelSpec, step_budget: int | None = None) -> ClientUpdate:
    """K local SGD steps from the global snapshot; returns the upload.

    theta starts at the round-start global parameters. Minibatches come
    from a fresh shuffle per epoch drawn from `rng`. Round-start
    snapshots (global parameters, drift, control variates, previous
    deltas) stay frozen for all K steps. The drift accumulator advances
    once per round by exactly the round's parameter update.
    """
    n = inputs.shape[0]
    if n == 0:
        raise PartitionError(f"client {client.client_id} has an empty partition")
    k_nominal = steps_per_round(n, cfg)
    k_steps = k_nominal if step_budget is None else int(step_budget)
    if k_steps < 1:
        raise ParameterError("step budget must be >= 1")
    lr_t = round_lr(cfg, server.round)
    pull, anchor, extra = _correction_terms(client, server, cfg, k_nominal, lr_t)

    start = server.global_params.values
    theta = start.copy()
    grad = np.empty_like(theta)
    layers = models._split(spec, theta)
    glayers = models._split(spec, grad)
    loss_grad = models._loss_grad_views
    wd = spec.weight_decay
    bs = cfg.batch_size
    steps = 0
    while steps < k_steps:
        order = rng.permutation(n)
        xp, yp = inputs[order], labels[order]
        for lo in range(0, n, bs):
            loss_grad(wd, layers, glayers, xp[lo : lo + bs], yp[lo : lo + bs])
            if anchor is not None:
                grad += pull * (theta - anchor)
            if extra is not None:
                grad += extra
            theta -= lr_t * grad
            steps += 1
            if steps >= k_steps:
                break

    theta_plus = ParamVector(theta)
    delta = ParamVector(theta - start)
    if cfg.algorithm in ("feddc", "feddyn"):
        drift_plus = client.drift + delta
    else:
        drift_plus = client.drift
    if cfg.algorithm == "scaffold":
        c_plus = ParamVector(
            client.scaffold_c.values
            - server.scaffold_c.values
            - delta.values / (k_steps * lr_t)
        )
        uploads = 2  # parameters plus the control-variate update
    else:
        c_plus = client.scaffold_c
        uploads = 1  # feddc uploads theta+h pre-summed into one vector
    return ClientUpdate(
        client_id=client.client_id,
        theta_plus=theta_plus,
        drift_plus=drift_plus,
        delta=delta,
        scaffold_c_plus=c_plus,
        n_samples=n,
        k_steps=k_steps,
        bytes_up=uploads * BYTES_PER_PARAM * len(theta_plus),
    )


def apply_update(client: ClientState, update: ClientUpdate) -> None:
    client.theta = update.theta_plus
    client.drift = update.drift_plus
    client.last_delta = update.delta
    client.scaffold_c = update.scaffold_c_plus


def _agg_weights(updates, cfg: AlgoConfig):
    if cfg.aggregation_weighting == "by_samples":
        return [float(u.n_samples) for u in updates]
    return [1.0] * len(updates)


def server_aggregate(server: ServerState, updates, cfg: AlgoConfig) -> ServerState:
    """Fold the round's updates into the next server state.

    Updates are folded in ascending client-id order regardless of the
    order they arrived in, so concurrent client execution cannot change
    the result.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise EmptyAggregateError("server_aggregate with no client updates")
    ws = _agg_weights(updates, cfg)
    deltas = [u.delta for u in updates]
    algo = cfg.algorithm

    global_delta = weighted_mean(deltas, ws)
    scaffold_c = server.scaffold_c
    dyn_corrector = server.dyn_corrector

    if algo == "feddc":
        corrected = [u.theta_plus + u.drift_plus for u in updates]
        new_global = weighted_mean(corrected, ws)
    elif algo in ("fedavg", "fedprox"):
        new_global = weighted_mean([u.theta_plus for u in updates], ws)
    elif algo == "scaffold":
        new_global = server.global_params + global_delta
        # c_i+ - c_i reconstructs from the upload: -c - delta / (K lr_t)
        lr_t = round_lr(cfg, server.round)
        c_deltas = [
            ParamVector(
                -server.scaffold_c.values - u.delta.values / (u.k_steps * lr_t)
            )
            for u in updates
        ]
        mean_cd = weighted_mean(c_deltas, [1.0] * len(c_deltas))
        scale = len(updates) / server.n_clients
        scaffold_c = ParamVector(server.scaffold_c.values + scale * mean_cd.values)
    elif algo == "feddyn":
        scale = cfg.alpha * len(updates) / server.n_clients
        dyn_corrector = ParamVector(
            server.dyn_corrector.values - scale * global_delta.values
        )
        mean_theta = weighted_mean([u.theta_plus for u in updates], ws)
        new_global = ParamVector(
            mean_theta.values - dyn_corrector.values / cfg.alpha
        )
    else:  # pragma: no cover - exhaustive over ALGORITHMS
        raise ParameterError(f"unknown algorithm {algo!r}")

    return replace(
        server,
        global_params=new_global,
        global_delta=global_delta,
        scaffold_c=scaffold_c,
        dyn_corrector=dyn_corrector,
        round=server.round + 1,
    )


def sample_active_set(n_clients: int, participation: float, round_index: int,
                      rng: RngStream) -> list:
    """Sorted ids of this round's active clients, uniform without replacement."""
    if not (0 < participation <= 1):
        raise ParameterError(f"participation must be in (0, 1], got {participation!r}")
    count = min(n_clients, max(1, round(participation * n_clients)))
    del round_index  # identity lives in the rng key; kept for call-site clarity
    return sorted(int(i) for i in rng.permutation(n_clients)[:count])


def gradient_variance_diagnostic(updates, server: ServerState, cfg: AlgoConfig):
    """Empirical variance of implied local gradients, or None if < 2 updates.

    Each client's round update implies an average step direction
    g_i = -delta_i / (K_i * lr_t); the diagnostic is the mean squared
    distance of the g_i from their mean. Recorded per round, never
    asserted against a closed-form bound.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if len(updates) < 2:
        return None
    lr_t = round_lr(cfg, server.round)
    gs = np.stack([-u.delta.values / (u.k_steps * lr_t) for u in updates])
    center = gs.mean(axis=0)
    return float(np.mean(np.sum((gs - center) ** 2, axis=1)))


def upload_vectors(cfg: AlgoConfig) -> int:
    """Vectors a client sends per round (scaffold also uploads its control)."""
    return 2 if cfg.algorithm == "scaffold" else 1


def download_vectors(cfg: AlgoConfig) -> int:
    """Vectors a client receives per round.

    feddc ships the global parameters and the previous global delta;
    scaffold ships the parameters and the server control variate; the
    rest ship parameters only.
    """
    return 2 if cfg.algorithm in ("feddc", "scaffold") else 1
