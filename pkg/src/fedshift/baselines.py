"""Contrast algorithms sharing the federated harness.

fedavg   single model; forced K=1, assignments identically 1.
fedem    soft clustering with the plain likelihood kernel exp(-loss).
ifca     per round, each client adopts the cluster with the lowest mean local
         loss and trains only it; the server averages per cluster among its
         adopters, empty clusters keep their parameters.
fesem    hard expectation-maximisation: loss-argmin client-to-cluster
         assignment, then weighted averaging within each cluster.  (The
         original method clusters on parameter distance; the loss-based
         variant reproduces the same qualitative behaviour.)

All baselines run under the identical seed, scenario, and model spec as the
main algorithm; only the assignment rule differs, so composition metrics are
comparable.  Ties in any argmin/argmax break toward the lowest index.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import engine, models
from .engine import AssignmentState, Dataset, LabelStats, RCHyper
from .errors import ConfigurationError
from .federation import (
    ClientUpdate,
    ClusterEnsemble,
    FedConfig,
    RoundOutcome,
    aggregate,
    local_train_all,
    sample_clients,
)
from .models import ModelSpec
from .rng import STREAM_BATCH, STREAM_NOISE, substream
from .scenario import FederatedScenario

ALGORITHMS = ("fedavg", "fedem", "ifca", "fesem", "fedrc")

SOFT_ALGORITHMS = ("fedavg", "fedem", "fedrc")


def algorithm_kernel(algorithm: str) -> str:
    """Assignment kernel used by the soft algorithms."""
    return "em" if algorithm == "fedem" else "rc"


def fedem_e_step(
    datasets: list[Dataset],
    params_list: list[np.ndarray],
    spec: ModelSpec,
    stats: LabelStats,
    state: AssignmentState,
) -> AssignmentState:
    """Assignment update with the likelihood kernel: gamma proportional to omega * exp(-loss)."""
    return engine.e_step(datasets, params_list, spec, stats, state, kernel="em")


def predict_hard(
    X: np.ndarray,
    params_list: list[np.ndarray],
    spec: ModelSpec,
    omega: np.ndarray,
) -> np.ndarray:
    """Predict with the single highest-weight cluster only."""
    k = int(np.argmax(omega))
    return np.argmax(models.predict_proba(spec, params_list[k], X), axis=1)


def predict_soft(
    X: np.ndarray,
    params_list: list[np.ndarray],
    spec: ModelSpec,
    omega: np.ndarray,
) -> np.ndarray:
    """Predict with the omega-weighted ensemble of cluster probabilities."""
    mix = np.zeros((len(X), spec.num_classes))
    for w, p in zip(omega, params_list):
        mix += w * models.predict_proba(spec, p, X)
    return np.argmax(mix, axis=1)


def hard_assignment(
    X: np.ndarray,
    y: np.ndarray,
    params_list: list[np.ndarray],
    spec: ModelSpec,
) -> int:
    """Index of the cluster with the lowest mean loss on the given data."""
    mean_losses = engine.cluster_loss_matrix(spec, params_list, X, y).mean(axis=0)
    return int(np.argmin(mean_losses))


def _hard_client_work(
    client_index: int,
    dataset: Dataset,
    ensemble: ClusterEnsemble,
    config: FedConfig,
    round_index: int,
    num_classes: int,
) -> ClientUpdate:
    X, y = dataset
    params_list = ensemble.active_params()
    k_active = len(params_list)
    pick = hard_assignment(X, y, params_list, ensemble.spec)

    gamma = np.zeros((len(y), k_active))
    gamma[:, pick] = 1.0
    omega = engine.omega_from_gamma(gamma)

    mass = engine.client_label_mass(gamma, y, num_classes)
    if config.noise_sigma > 0:
        noise_rng = substream(config.seed, STREAM_NOISE, round_index, client_index)
        mass = mass + noise_rng.normal(0.0, config.noise_sigma, size=mass.shape)

    batch_rng = substream(config.seed, STREAM_BATCH, round_index, client_index)
    local = local_train_all(
        X, y, gamma, params_list, ensemble.spec,
        config.local_steps, config.eta_local, config.batch_size, batch_rng,
    )
    return ClientUpdate(
        client_id=client_index,
        sample_count=len(y),
        deltas=[loc - start for loc, start in zip(local, params_list)],
        local_params=local,
        label_mass=mass,
        label_total=gamma.sum(axis=0),
        gamma=gamma,
        omega=omega,
    )


def _hard_round(
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    scenario: FederatedScenario,
    config: FedConfig,
    hyper: RCHyper,
    round_index: int,
    workers: int = 1,
) -> RoundOutcome:
    """Shared round body for the hard-assignment baselines.

    Per cluster, only the adopting clients contribute to the fold; a cluster
    with no adopters keeps its previous parameters.
    """
    if ensemble.num_active() < 2:
        raise ConfigurationError("hard-clustering baselines require at least 2 active clusters")
    datasets = scenario.train_datasets()
    selected = sample_clients(scenario.num_clients, config.participation_fraction, config.seed, round_index)
    num_classes = stats.mass.shape[1]

    def work(i: int) -> ClientUpdate:
        return _hard_client_work(int(i), datasets[int(i)], ensemble, config, round_index, num_classes)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            updates = list(pool.map(work, selected))
    else:
        updates = [work(i) for i in selected]

    new_ensemble = ensemble.copy()
    for col, k in enumerate(ensemble.active_ids()):
        adopters = [u for u in updates if u.gamma[:, col].any()]
        if not adopters:
            continue
        sub = [
            ClientUpdate(
                client_id=u.client_id,
                sample_count=u.sample_count,
                deltas=[u.deltas[col]],
                local_params=[u.local_params[col]],
                label_mass=u.label_mass,
                label_total=u.label_total,
                gamma=u.gamma,
                omega=u.omega,
            )
            for u in adopters
        ]
        single = ClusterEnsemble(ensemble.spec, [ensemble.params[k]], [True])
        folded = aggregate(single, sub, config.eta_global)
        new_ensemble.params[k] = folded.params[0]

    new_state = state.copy()
    gamma_change = 0.0
    for u in updates:
        gamma_change = max(gamma_change, float(np.abs(u.gamma - state.gamma[u.client_id]).max()))
        new_state.gamma[u.client_id] = u.gamma
        new_state.omega[u.client_id] = u.omega

    mass = np.zeros((ensemble.num_active(), num_classes))
    total = np.zeros(ensemble.num_active())
    for u in updates:
        mass += u.label_mass
        total += u.label_total
    new_stats = LabelStats(
        mass=np.maximum(mass, hyper.eps_floor),
        total=total,
        noise_sigma=config.noise_sigma,
        floored_pairs=int((mass < hyper.eps_floor).sum()),
    )
    return RoundOutcome(
        ensemble=new_ensemble,
        state=new_state,
        stats=new_stats,
        selected=selected,
        gamma_max_change=gamma_change,
    )


def ifca_round(
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    scenario: FederatedScenario,
    config: FedConfig,
    hyper: RCHyper,
    round_index: int,
    workers: int = 1,
) -> RoundOutcome:
    """Loss-argmin cluster adoption; each client trains only its adopted model."""
    return _hard_round(ensemble, state, stats, scenario, config, hyper, round_index, workers)


def fesem_round(
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    scenario: FederatedScenario,
    config: FedConfig,
    hyper: RCHyper,
    round_index: int,
    workers: int = 1,
) -> RoundOutcome:
    """Hard EM round: assignments recomputed each round, then per-cluster averaging."""
    return _hard_round(ensemble, state, stats, scenario, config, hyper, round_index, workers)
