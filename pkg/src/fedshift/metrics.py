"""Cluster-quality metrics, accuracy evaluation, and report serialisation.

Composition tables answer "where did the mass of class / style / concept a
end up?": for each attribute value, the per-cluster assignment mass is
normalised over the active clusters.  Concept purity scalarises the
concept table into a single mass-weighted score in [0, 1].
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import baselines
from .engine import AssignmentState, LabelStats
from .errors import ConfigurationError
from .federation import ClusterEnsemble, evaluate_new_client
from .scenario import FederatedScenario

ATTRIBUTES = ("class", "style", "concept")

CSV_COLUMNS = (
    "round",
    "objective",
    "train_acc",
    "local_acc",
    "global_acc",
    "active_clusters",
    "gamma_max_row_change",
    "concept_purity",
)


def _sample_attribute(client, attribute: str) -> np.ndarray:
    if attribute == "class":
        return client.y_train
    if attribute == "style":
        return np.full(client.n_train, client.style, dtype=np.int64)
    if attribute == "concept":
        return np.full(client.n_train, client.concept, dtype=np.int64)
    raise ConfigurationError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTES}")


@dataclass
class CompositionTable:
    """Per-attribute-value mass shares over the active clusters."""

    attribute: str
    values: list[int]
    cluster_ids: tuple[int, ...]
    mass: np.ndarray  # (V, K) raw assignment mass
    shares: np.ndarray  # (V, K) rows normalised over clusters

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "clusters": list(self.cluster_ids),
            "shares": {
                str(v): {str(k): float(s) for k, s in zip(self.cluster_ids, row)}
                for v, row in zip(self.values, self.shares)
            },
        }


def composition(
    state: AssignmentState,
    scenario: FederatedScenario,
    attribute: str,
    hard: bool = False,
) -> CompositionTable:
    """Assignment-mass share of every attribute value in every active cluster.

    ``hard=True`` replaces each assignment row by its argmax indicator before
    tallying, for comparison against hard-clustering methods.
    """
    k = state.num_clusters
    buckets: dict[int, np.ndarray] = {}
    for client, gamma in zip(scenario.participating, state.gamma):
        values = _sample_attribute(client, attribute)
        if hard:
            one_hot = np.zeros_like(gamma)
            one_hot[np.arange(len(gamma)), np.argmax(gamma, axis=1)] = 1.0
            gamma = one_hot
        for v in np.unique(values):
            rows = gamma[values == v].sum(axis=0)
            buckets[int(v)] = buckets.get(int(v), np.zeros(k)) + rows
    values_sorted = sorted(buckets)
    mass = np.stack([buckets[v] for v in values_sorted])
    totals = mass.sum(axis=1, keepdims=True)
    shares = mass / np.where(totals > 0, totals, 1.0)
    return CompositionTable(
        attribute=attribute,
        values=values_sorted,
        cluster_ids=state.cluster_ids,
        mass=mass,
        shares=shares,
    )


@dataclass
class PurityScore:
    """Per-cluster dominant-concept mass fraction and its mass-weighted mean."""

    per_cluster: dict[int, float]
    weighted_mean: float


def concept_purity(state: AssignmentState, scenario: FederatedScenario) -> PurityScore:
    """Mass-weighted mean over active clusters of max-concept mass fraction."""
    k = state.num_clusters
    num_concepts = scenario.config.num_concepts
    mass = np.zeros((k, num_concepts))
    for client, gamma in zip(scenario.participating, state.gamma):
        mass[:, client.concept] += gamma.sum(axis=0)
    cluster_total = mass.sum(axis=1)
    per_cluster = {}
    for col, cid in enumerate(state.cluster_ids):
        per_cluster[cid] = float(mass[col].max() / cluster_total[col]) if cluster_total[col] > 0 else 0.0
    total = cluster_total.sum()
    weighted = float(mass.max(axis=1).sum() / total) if total > 0 else 0.0
    return PurityScore(per_cluster=per_cluster, weighted_mean=weighted)


def evaluate_accuracy(
    ensemble: ClusterEnsemble,
    clients: list[tuple[np.ndarray, np.ndarray]],
    omegas: list[np.ndarray],
    mode: str = "soft",
) -> float:
    """Unweighted mean over clients of per-client prediction accuracy."""
    if mode not in ("soft", "hard"):
        raise ConfigurationError(f"unknown prediction mode {mode!r}")
    params_list = ensemble.active_params()
    spec = ensemble.spec
    accs = []
    for (X, y), omega in zip(clients, omegas):
        if mode == "soft":
            pred = baselines.predict_soft(X, params_list, spec, omega)
        else:
            pred = baselines.predict_hard(X, params_list, spec, omega)
        accs.append(float(np.mean(pred == y)))
    return float(np.mean(accs))


def adapt_nonparticipating(
    ensemble: ClusterEnsemble,
    stats: LabelStats,
    scenario: FederatedScenario,
    algorithm: str = "fedrc",
) -> list[np.ndarray]:
    """Cluster weights for the holdout clients, per the algorithm's own rule.

    Soft algorithms iterate the assignment step on the adaptation split; hard
    baselines adopt the single cluster with the lowest mean adaptation loss.
    """
    params_list = ensemble.active_params()
    out = []
    for client in scenario.nonparticipating:
        if len(params_list) == 1:
            out.append(np.ones(1))
        elif algorithm in baselines.SOFT_ALGORITHMS:
            kernel = baselines.algorithm_kernel(algorithm)
            out.append(evaluate_new_client(client.x_train, client.y_train, ensemble, stats, kernel=kernel))
        else:
            pick = baselines.hard_assignment(client.x_train, client.y_train, params_list, ensemble.spec)
            omega = np.zeros(len(params_list))
            omega[pick] = 1.0
            out.append(omega)
    return out


@dataclass
class RoundReport:
    """Scalar metrics of one round; composition filled only where requested."""

    round: int
    objective: float
    train_acc: float
    local_acc: float
    global_acc: float
    active_clusters: int
    gamma_max_row_change: float
    concept_purity: float
    composition: dict | None = None

    def csv_row(self) -> str:
        cells = [
            str(self.round),
            repr(float(self.objective)),
            repr(float(self.train_acc)),
            repr(float(self.local_acc)),
            repr(float(self.global_acc)),
            str(self.active_clusters),
            repr(float(self.gamma_max_row_change)),
            repr(float(self.concept_purity)),
        ]
        return ",".join(cells)


def write_round_csv(path: str, reports: list[RoundReport]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for report in reports:
            fh.write(report.csv_row() + "\n")


def write_composition_csv(path: str, table: CompositionTable) -> None:
    with open(path, "w") as fh:
        header = ["value"] + [f"cluster_{k}" for k in table.cluster_ids]
        fh.write(",".join(header) + "\n")
        for v, row in zip(table.values, table.shares):
            fh.write(",".join([str(v)] + [repr(float(s)) for s in row]) + "\n")


def write_summary(path: str, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def best_train_round(reports: list[RoundReport]) -> RoundReport:
    """Report of the round with the best training accuracy (lowest round wins ties)."""
    best = reports[0]
    for report in reports:
        if report.train_acc > best.train_acc:
            best = report
    return best
