"""Federated protocol: client sampling, local training, aggregation, removal.

Each round: sample clients, let every selected client refresh its assignment
weights against the broadcast models using last round's label statistics, run
local gradient steps per cluster, then fold the weighted deltas on the server
and rebuild the statistics from the selected clients' (possibly noised)
contributions.  Non-selected clients keep their weights frozen.

Per-client work items are independent and may run on a thread pool; the
server-side reduction folds results in ascending client order, so outputs do
not depend on the worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import engine, models
from .engine import AssignmentState, Dataset, LabelStats, RCHyper
from .errors import ConfigurationError, NumericError
from .models import ModelSpec
from .rng import STREAM_BATCH, STREAM_NOISE, STREAM_SAMPLING, substream
from .scenario import FederatedScenario


@dataclass
class FedConfig:
    """Protocol knobs for one federated run."""

    num_rounds: int = 50
    local_steps: int = 5
    batch_size: int = 64
    eta_local: float = 0.05
    eta_global: float = 1.0
    participation_fraction: float = 1.0
    removal_enabled: bool = False
    removal_delta: float = 0.05
    removal_warmup: int = 20
    removal_gamma_tol: float = 1e-3
    noise_sigma: float = 0.0
    adam_enabled: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_rounds < 0:
            raise ConfigurationError("num_rounds must be non-negative")
        if self.local_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("local_steps and batch_size must be positive")
        if self.eta_local <= 0 or self.eta_global <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not (0.0 < self.participation_fraction <= 1.0):
            raise ConfigurationError("participation_fraction must lie in (0, 1]")
        if not (0.0 <= self.removal_delta < 1.0):
            raise ConfigurationError("removal_delta must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be non-negative")


@dataclass
class ClusterEnsemble:
    """The cluster models: K parameter vectors with stable ids and active flags."""

    spec: ModelSpec
    params: list[np.ndarray]
    active: list[bool]

    @classmethod
    def init(cls, spec: ModelSpec, num_clusters: int, rng: np.random.Generator) -> "ClusterEnsemble":
        if num_clusters < 1:
            raise ConfigurationError("num_clusters must be at least 1")
        params = [models.init_params(spec, rng) for _ in range(num_clusters)]
        if spec.shared_trunk:
            trunk = params[0][: spec.trunk_size].copy()
            for p in params:
                p[: spec.trunk_size] = trunk
        return cls(spec=spec, params=params, active=[True] * num_clusters)

    @property
    def num_clusters(self) -> int:
        return len(self.params)

    def active_ids(self) -> tuple[int, ...]:
        return tuple(k for k, a in enumerate(self.active) if a)

    def active_params(self) -> list[np.ndarray]:
        return [self.params[k] for k in self.active_ids()]

    def num_active(self) -> int:
        return sum(self.active)

    def copy(self) -> "ClusterEnsemble":
        return ClusterEnsemble(self.spec, [p.copy() for p in self.params], list(self.active))


@dataclass
class ClientUpdate:
    """What one client sends back: per-cluster deltas plus label-mass sums."""

    client_id: int
    sample_count: int
    deltas: list[np.ndarray]
    local_params: list[np.ndarray]
    label_mass: np.ndarray  # (K_active, C), possibly noised
    label_total: np.ndarray  # (K_active,), exact
    gamma: np.ndarray
    omega: np.ndarray
    adam_nu: np.ndarray | None = None
    adam_a: np.ndarray | None = None


def _batch_schedule(n: int, batch_size: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deterministic minibatch index lists; full-batch when batch_size >= n."""
    if batch_size >= n:
        idx = np.arange(n)
        return [idx] * steps
    batches: list[np.ndarray] = []
    order = rng.permutation(n)
    pos = 0
    while len(batches) < steps:
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        batches.append(order[pos : pos + batch_size])
        pos += batch_size
    return batches


def local_train(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    start: np.ndarray,
    spec: ModelSpec,
    steps: int,
    eta_local: float,
    batch_size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Weighted local gradient steps for one cluster.

    Each step applies theta -= (eta_local / |B|) * sum_{j in B} w_j grad f_j;
    with a full batch this is exactly the per-client update rule.  All-zero
    weights leave the parameters untouched.
    """
    if not weights.any():
        return start.copy()
    params = start.copy()
    for batch in _batch_schedule(len(y), batch_size, steps, rng):
        grad = models.weighted_grad_sum(spec, params, X[batch], y[batch], weights[batch])
        params -= (eta_local / len(batch)) * grad
    if not np.all(np.isfinite(params)):
        raise NumericError("local training produced non-finite parameters")
    return params


def local_train_all(
    X: np.ndarray,
    y: np.ndarray,
    gamma_i: np.ndarray,
    params_list: list[np.ndarray],
    spec: ModelSpec,
    steps: int,
    eta_local: float,
    batch_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Local training of every active cluster on one shared batch schedule.

    With a shared trunk the clusters are trained jointly: per step the trunk
    takes the sum of all clusters' trunk gradients and each head its own.
    """
    batches = _batch_schedule(len(y), batch_size, steps, rng)
    if not spec.shared_trunk:
        out = []
        for k in range(len(params_list)):
            col = gamma_i[:, k]
            if not col.any():
                out.append(params_list[k].copy())
                continue
            params = params_list[k].copy()
            for batch in batches:
                grad = models.weighted_grad_sum(spec, params, X[batch], y[batch], col[batch])
                params -= (eta_local / len(batch)) * grad
            out.append(params)
    else:
        t = spec.trunk_size
        trunk = params_list[0][:t].copy()
        heads = [p[t:].copy() for p in params_list]
        for batch in batches:
            grads = [
                models.weighted_grad_sum(spec, np.concatenate([trunk, heads[k]]), X[batch], y[batch], gamma_i[batch, k])
                for k in range(len(params_list))
            ]
            scale = eta_local / len(batch)
            trunk_grad = np.zeros(t)
            for g in grads:
                trunk_grad += g[:t]
            trunk = trunk - scale * trunk_grad
            heads = [h - scale * g[t:] for h, g in zip(heads, grads)]
        out = [np.concatenate([trunk, h]) for h in heads]
    for params in out:
        if not np.all(np.isfinite(params)):
            raise NumericError("local training produced non-finite parameters")
    return out


def sample_clients(num_clients: int, fraction: float, seed: int, round_index: int) -> np.ndarray:
    """Uniform without-replacement selection, returned in ascending order."""
    count = int(np.ceil(fraction * num_clients))
    if count < 1:
        raise ConfigurationError("client selection is empty")
    rng = substream(seed, STREAM_SAMPLING, round_index)
    return np.sort(rng.choice(num_clients, size=count, replace=False))


def aggregate(
    ensemble: ClusterEnsemble,
    updates: list[ClientUpdate],
    eta_global: float,
) -> ClusterEnsemble:
    """Sample-count-weighted fold of client updates into the ensemble.

    Clusters whose every delta is exactly zero stay bit-identical.  With
    eta_global == 1 the result is the weighted average of the client-local
    parameters, so a single client's round returns its local models exactly.
    """
    total = float(sum(u.sample_count for u in updates))
    weights = [u.sample_count / total for u in updates]
    new = ensemble.copy()
    for col, k in enumerate(ensemble.active_ids()):
        if all(not u.deltas[col].any() for u in updates):
            continue
        if eta_global == 1.0:
            acc = np.zeros_like(ensemble.params[k])
            for w, u in zip(weights, updates):
                acc += w * u.local_params[col]
            new.params[k] = acc
        else:
            acc = np.zeros_like(ensemble.params[k])
            for w, u in zip(weights, updates):
                acc += w * u.deltas[col]
            new.params[k] = ensemble.params[k] + eta_global * acc
    return new


def check_and_remove(
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    delta: float,
) -> tuple[ClusterEnsemble, AssignmentState, list[int]]:
    """Deactivate clusters whose total assignment mass fraction falls below delta.

    Assignment columns of removed clusters are deleted, remaining rows are
    renormalised (uniform fallback for rows that lose all mass), and the
    per-client weights are recomputed.  The last active cluster is never
    removed.
    """
    ensemble = ensemble.copy()
    state = state.copy()
    removed: list[int] = []
    while True:
        fractions = state.mass_fractions()
        candidates = [
            (col, cid)
            for col, cid in enumerate(state.cluster_ids)
            if fractions[col] < delta and ensemble.num_active() > 1
        ]
        if not candidates:
            break
        col, cid = candidates[0]
        ensemble.active[cid] = False
        removed.append(cid)
        keep = [c for c in range(state.num_clusters) if c != col]
        new_gamma = []
        for g in state.gamma:
            g = g[:, keep]
            row_sum = g.sum(axis=1)
            bad = ~(row_sum > 0)
            row_sum[bad] = 1.0
            g = g / row_sum[:, None]
            g[bad] = 1.0 / len(keep)
            new_gamma.append(g)
        state = AssignmentState(
            gamma=new_gamma,
            omega=np.stack([engine.omega_from_gamma(g) for g in new_gamma]),
            cluster_ids=tuple(c for i, c in enumerate(state.cluster_ids) if i != col),
            adam_nu=None if state.adam_nu is None else [m[:, keep] for m in state.adam_nu],
            adam_a=None if state.adam_a is None else [m[:, keep] for m in state.adam_a],
        )
    return ensemble, state, removed


@dataclass
class RoundOutcome:
    ensemble: ClusterEnsemble
    state: AssignmentState
    stats: LabelStats
    selected: np.ndarray
    gamma_max_change: float


def _client_work(
    client_index: int,
    dataset: Dataset,
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    config: FedConfig,
    hyper: RCHyper,
    round_index: int,
    kernel: str,
) -> ClientUpdate:
    X, y = dataset
    params_list = ensemble.active_params()
    spec = ensemble.spec
    omega_i = state.omega[client_index]
    if config.adam_enabled:
        gamma, omega, nu, a = engine.client_e_step_adam(
            spec, params_list, X, y, omega_i,
            state.gamma[client_index], state.adam_nu[client_index], state.adam_a[client_index],
            stats, hyper, kernel,
        )
    else:
        gamma, omega = engine.client_e_step(spec, params_list, X, y, omega_i, stats, kernel)
        nu = a = None

    mass = engine.client_label_mass(gamma, y, stats.mass.shape[1])
    if config.noise_sigma > 0:
        noise_rng = substream(config.seed, STREAM_NOISE, round_index, client_index)
        mass = mass + noise_rng.normal(0.0, config.noise_sigma, size=mass.shape)
    total = gamma.sum(axis=0)

    batch_rng = substream(config.seed, STREAM_BATCH, round_index, client_index)
    try:
        local = local_train_all(
            X, y, gamma, params_list, spec,
            config.local_steps, config.eta_local, config.batch_size, batch_rng,
        )
    except NumericError as exc:
        raise NumericError(f"client {client_index}: {exc}") from None
    deltas = [loc - start for loc, start in zip(local, params_list)]
    return ClientUpdate(
        client_id=client_index,
        sample_count=len(y),
        deltas=deltas,
        local_params=local,
        label_mass=mass,
        label_total=total,
        gamma=gamma,
        omega=omega,
        adam_nu=nu,
        adam_a=a,
    )


def run_round(
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    scenario: FederatedScenario,
    config: FedConfig,
    hyper: RCHyper,
    round_index: int,
    kernel: str = "rc",
    workers: int = 1,
) -> RoundOutcome:
    """One communication round over the selected clients.

    The statistics passed in are the ones built from the previous round's
    assignments; the returned statistics come from this round's selected
    clients and feed the next round.
    """
    if ensemble.num_active() < 1:
        raise ConfigurationError("ensemble has no active cluster")
    datasets = scenario.train_datasets()
    selected = sample_clients(scenario.num_clients, config.participation_fraction, config.seed, round_index)

    def work(i: int) -> ClientUpdate:
        return _client_work(int(i), datasets[int(i)], ensemble, state, stats, config, hyper, round_index, kernel)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(work, selected))
    else:
        updates = [work(i) for i in selected]

    new_state = state.copy()
    gamma_change = 0.0
    for u in updates:
        gamma_change = max(gamma_change, float(np.abs(u.gamma - state.gamma[u.client_id]).max()))
        new_state.gamma[u.client_id] = u.gamma
        new_state.omega[u.client_id] = u.omega
        if config.adam_enabled:
            new_state.adam_nu[u.client_id] = u.adam_nu
            new_state.adam_a[u.client_id] = u.adam_a

    new_ensemble = aggregate(ensemble, updates, config.eta_global)

    num_classes = stats.mass.shape[1]
    mass = np.zeros((ensemble.num_active(), num_classes))
    total = np.zeros(ensemble.num_active())
    for u in updates:
        mass += u.label_mass
        total += u.label_total
    floored = int((mass < hyper.eps_floor).sum())
    new_stats = LabelStats(
        mass=np.maximum(mass, hyper.eps_floor),
        total=total,
        noise_sigma=config.noise_sigma,
        floored_pairs=floored,
    )
    return RoundOutcome(
        ensemble=new_ensemble,
        state=new_state,
        stats=new_stats,
        selected=selected,
        gamma_max_change=gamma_change,
    )


def evaluate_new_client(
    X: np.ndarray,
    y: np.ndarray,
    ensemble: ClusterEnsemble,
    stats: LabelStats,
    kernel: str = "rc",
    max_iters: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Adapt cluster weights for an unseen client by iterating the assignment step.

    Model parameters and statistics stay fixed; only omega moves, starting
    uniform, until its largest change drops below ``tol``.
    """
    if len(y) == 0:
        raise ConfigurationError("new-client adaptation requires a non-empty split")
    params_list = ensemble.active_params()
    k = len(params_list)
    loss_mat = engine.cluster_loss_matrix(ensemble.spec, params_list, X, y)
    kmat = engine.kernel_matrix(loss_mat, y, stats, kernel)
    omega = np.full(k, 1.0 / k)
    for _ in range(max_iters):
        numer = kmat * omega[None, :]
        denom = numer.sum(axis=1)
        bad = ~(denom > 0)
        denom[bad] = 1.0
        gamma = numer / denom[:, None]
        gamma[bad] = 1.0 / k
        new_omega = engine.omega_from_gamma(gamma)
        delta = float(np.abs(new_omega - omega).max())
        omega = new_omega
        if delta < tol:
            break
    return omega
