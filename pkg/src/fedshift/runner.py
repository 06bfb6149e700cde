"""Experiment orchestration: drive an algorithm for T rounds and collect reports.

The loop follows the protocol: an optional adapt step (cluster removal once
the assignments have converged past a warm-up), then one communication round,
then metric evaluation on the post-round state.  Row 0 of the report list
describes the initial state before any training.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import baselines, engine, metrics
from .engine import AssignmentState, LabelStats, RCHyper
from .errors import ConfigurationError
from .federation import ClusterEnsemble, FedConfig, check_and_remove, run_round
from .metrics import ATTRIBUTES, RoundReport
from .models import ModelSpec
from .rng import STREAM_INIT, substream
from .scenario import FederatedScenario


@dataclass
class ExperimentResult:
    algorithm: str
    ensemble: ClusterEnsemble
    state: AssignmentState
    stats: LabelStats
    reports: list[RoundReport]
    removal_events: list[tuple[int, list[int]]]  # (round, removed cluster ids)

    @property
    def removal_trigger_round(self) -> int | None:
        return self.removal_events[0][0] if self.removal_events else None

    def final_report(self) -> RoundReport:
        return self.reports[-1]

    def summary(self, scenario: FederatedScenario) -> dict:
        best = metrics.best_train_round(self.reports)
        composition = {
            attr: metrics.composition(self.state, scenario, attr).to_dict() for attr in ATTRIBUTES
        }
        purity = metrics.concept_purity(self.state, scenario)
        return {
            "algorithm": self.algorithm,
            "rounds": len(self.reports) - 1,
            "active_clusters": list(self.ensemble.active_ids()),
            "removal_events": [[r, ids] for r, ids in self.removal_events],
            "best_train_round": {
                "round": best.round,
                "objective": best.objective,
                "train_acc": best.train_acc,
                "local_acc": best.local_acc,
                "global_acc": best.global_acc,
                "active_clusters": best.active_clusters,
                "concept_purity": best.concept_purity,
            },
            "final": {
                "round": self.reports[-1].round,
                "objective": self.reports[-1].objective,
                "train_acc": self.reports[-1].train_acc,
                "local_acc": self.reports[-1].local_acc,
                "global_acc": self.reports[-1].global_acc,
                "concept_purity": purity.weighted_mean,
                "purity_per_cluster": {str(k): v for k, v in purity.per_cluster.items()},
            },
            "composition": composition,
        }


def _evaluate(
    algorithm: str,
    round_index: int,
    ensemble: ClusterEnsemble,
    state: AssignmentState,
    stats: LabelStats,
    scenario: FederatedScenario,
    gamma_change: float,
    eval_mode: str = "soft",
) -> RoundReport:
    datasets = scenario.train_datasets()
    params_list = ensemble.active_params()
    objective = engine.objective(state, params_list, ensemble.spec, stats, datasets)
    omegas = [state.omega[i] for i in range(scenario.num_clients)]
    train_acc = metrics.evaluate_accuracy(ensemble, datasets, omegas, eval_mode)
    local_acc = metrics.evaluate_accuracy(ensemble, scenario.test_datasets(), omegas, eval_mode)
    adapted = metrics.adapt_nonparticipating(ensemble, stats, scenario, algorithm)
    global_acc = metrics.evaluate_accuracy(
        ensemble, [c.test() for c in scenario.nonparticipating], adapted, eval_mode
    )
    purity = metrics.concept_purity(state, scenario)
    return RoundReport(
        round=round_index,
        objective=objective,
        train_acc=train_acc,
        local_acc=local_acc,
        global_acc=global_acc,
        active_clusters=ensemble.num_active(),
        gamma_max_row_change=gamma_change,
        concept_purity=purity.weighted_mean,
    )


def init_run(
    scenario: FederatedScenario,
    spec: ModelSpec,
    num_clusters: int,
    config: FedConfig,
    hyper: RCHyper,
) -> tuple[ClusterEnsemble, AssignmentState, LabelStats]:
    """Fresh ensemble, uniform assignments, and cold-start statistics."""
    rng = substream(config.seed, STREAM_INIT)
    ensemble = ClusterEnsemble.init(spec, num_clusters, rng)
    state = AssignmentState.uniform(
        scenario.train_sizes(), ensemble.active_ids(), adam=config.adam_enabled
    )
    stats = engine.uniform_label_stats(
        scenario.train_datasets(), num_clusters, scenario.config.num_classes, hyper.eps_floor
    )
    return ensemble, state, stats


def run_experiment(
    scenario: FederatedScenario,
    algorithm: str,
    spec: ModelSpec,
    num_clusters: int,
    config: FedConfig,
    hyper: RCHyper,
    workers: int = 1,
    eval_every: int = 1,
) -> ExperimentResult:
    """Run one algorithm end to end, evaluating metrics per round."""
    if algorithm not in baselines.ALGORITHMS:
        raise ConfigurationError(f"unknown algorithm {algorithm!r}; expected one of {baselines.ALGORITHMS}")
    if algorithm == "fedavg":
        num_clusters = 1
    if algorithm in ("ifca", "fesem") and num_clusters < 2:
        raise ConfigurationError(f"{algorithm} requires at least 2 clusters")
    if algorithm in ("ifca", "fesem") and config.adam_enabled:
        raise ConfigurationError(f"{algorithm} has no assignment weights to accelerate")

    ensemble, state, stats = init_run(scenario, spec, num_clusters, config, hyper)
    reports = [_evaluate(algorithm, 0, ensemble, state, stats, scenario, gamma_change=0.0)]
    removal_events: list[tuple[int, list[int]]] = []
    last_gamma_change = np.inf

    for t in range(1, config.num_rounds + 1):
        if (
            config.removal_enabled
            and t > config.removal_warmup
            and last_gamma_change < config.removal_gamma_tol
            and ensemble.num_active() > 1
        ):
            ensemble, state, removed = check_and_remove(ensemble, state, config.removal_delta)
            if removed:
                removal_events.append((t, removed))
                stats = engine.label_stats(
                    state,
                    scenario.train_datasets(),
                    scenario.config.num_classes,
                    eps_floor=hyper.eps_floor,
                )

        if algorithm in baselines.SOFT_ALGORITHMS:
            kernel = baselines.algorithm_kernel(algorithm)
            outcome = run_round(ensemble, state, stats, scenario, config, hyper, t, kernel, workers)
        elif algorithm == "ifca":
            outcome = baselines.ifca_round(ensemble, state, stats, scenario, config, hyper, t, workers)
        else:
            outcome = baselines.fesem_round(ensemble, state, stats, scenario, config, hyper, t, workers)

        ensemble, state = outcome.ensemble, outcome.state
        last_gamma_change = outcome.gamma_max_change
        if t % eval_every == 0 or t == config.num_rounds:
            reports.append(
                _evaluate(algorithm, t, ensemble, state, outcome.stats, scenario, outcome.gamma_max_change)
            )
        stats = outcome.stats

    return ExperimentResult(
        algorithm=algorithm,
        ensemble=ensemble,
        state=state,
        stats=stats,
        reports=reports,
        removal_events=removal_events,
    )
