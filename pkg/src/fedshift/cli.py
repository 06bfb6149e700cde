"""Command-line entry point: generate, train, compose, eval.

Exit codes: 0 success, 2 configuration or parse error, 3 numeric failure,
4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

import numpy as np
import yaml

from . import metrics
from .config import ExperimentConfig, load_experiment_config
from .engine import AssignmentState, LabelStats
from .errors import ConfigurationError, NumericError
from .federation import ClusterEnsemble
from .metrics import ATTRIBUTES
from .runner import run_experiment
from .scenario import FederatedScenario, generate, load_scenario, save_scenario

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

MODEL_FILE = "model.npz"
ASSIGNMENT_FILE = "assignment.npz"
ROUNDS_FILE = "rounds.csv"
SUMMARY_FILE = "summary.json"
CONFIG_ECHO_FILE = "config.yaml"


def _resolve_scenario(exp: ExperimentConfig) -> FederatedScenario:
    if exp.scenario_path is not None:
        return load_scenario(exp.scenario_path)
    return generate(exp.scenario)


def _save_run(out_dir: str, exp: ExperimentConfig, scenario, result) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_scenario(scenario, out_dir)
    metrics.write_round_csv(os.path.join(out_dir, ROUNDS_FILE), result.reports)
    metrics.write_summary(os.path.join(out_dir, SUMMARY_FILE), result.summary(scenario))
    spec = result.ensemble.spec
    np.savez(
        os.path.join(out_dir, MODEL_FILE),
        params=np.stack(result.ensemble.params),
        active=np.asarray(result.ensemble.active),
        input_dim=spec.input_dim,
        num_classes=spec.num_classes,
        hidden=np.asarray(spec.hidden, dtype=np.int64),
        shared_trunk=spec.shared_trunk,
        algorithm=result.algorithm,
    )
    offsets = np.cumsum([0] + [g.shape[0] for g in result.state.gamma])
    np.savez(
        os.path.join(out_dir, ASSIGNMENT_FILE),
        gamma=np.concatenate(result.state.gamma) if result.state.gamma else np.zeros((0, 0)),
        offsets=offsets,
        omega=result.state.omega,
        cluster_ids=np.asarray(result.state.cluster_ids, dtype=np.int64),
        stats_mass=result.stats.mass,
        stats_total=result.stats.total,
        noise_sigma=result.stats.noise_sigma,
    )
    with open(os.path.join(out_dir, CONFIG_ECHO_FILE), "w") as fh:
        echo = {
            "algorithm": exp.algorithm,
            "num_clusters": exp.num_clusters,
            "seed": exp.seed,
            "output_dir": out_dir,
            "model": exp.model,
            "fed": {k: getattr(exp.fed, k) for k in exp.fed.__dataclass_fields__},
            "rc": {k: getattr(exp.rc, k) for k in exp.rc.__dataclass_fields__},
            "scenario": scenario.config.to_dict(),
        }
        yaml.safe_dump(echo, fh, sort_keys=True)


def _load_run(run_dir: str):
    from .models import ModelSpec

    model = np.load(os.path.join(run_dir, MODEL_FILE), allow_pickle=False)
    spec = ModelSpec(
        input_dim=int(model["input_dim"]),
        num_classes=int(model["num_classes"]),
        hidden=tuple(int(h) for h in model["hidden"]),
        shared_trunk=bool(model["shared_trunk"]),
    )
    ensemble = ClusterEnsemble(
        spec=spec,
        params=[p.copy() for p in model["params"]],
        active=[bool(a) for a in model["active"]],
    )
    algorithm = str(model["algorithm"])
    assign = np.load(os.path.join(run_dir, ASSIGNMENT_FILE), allow_pickle=False)
    offsets = assign["offsets"]
    gamma = [assign["gamma"][offsets[i] : offsets[i + 1]] for i in range(len(offsets) - 1)]
    state = AssignmentState(
        gamma=gamma,
        omega=assign["omega"],
        cluster_ids=tuple(int(k) for k in assign["cluster_ids"]),
    )
    stats = LabelStats(
        mass=assign["stats_mass"],
        total=assign["stats_total"],
        noise_sigma=float(assign["noise_sigma"]),
    )
    scenario = load_scenario(run_dir)
    return scenario, ensemble, state, stats, algorithm


def cmd_generate(args: argparse.Namespace) -> int:
    exp = load_experiment_config(args.config, args.set, args.preset)
    if exp.scenario is None:
        raise ConfigurationError("generate requires an inline scenario section")
    scenario = generate(exp.scenario)
    out = args.out or exp.output_dir
    save_scenario(scenario, out)
    print(f"wrote scenario ({scenario.num_clients} clients, "
          f"{scenario.config.num_concepts} concepts) to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.set)
    if args.rounds is not None:
        overrides.append(f"fed.num_rounds={args.rounds}")
    exp = load_experiment_config(args.config, overrides, args.preset)
    scenario = _resolve_scenario(exp)
    spec = exp.model_spec(scenario.config.input_dim, scenario.config.num_classes)
    result = run_experiment(
        scenario, exp.algorithm, spec, exp.num_clusters, exp.fed, exp.rc, workers=args.workers
    )
    out = args.out or exp.output_dir
    _save_run(out, exp, scenario, result)
    final = result.reports[-1]
    print(f"{exp.algorithm}: {final.round} rounds, train_acc={final.train_acc:.4f}, "
          f"local_acc={final.local_acc:.4f}, global_acc={final.global_acc:.4f}, "
          f"active_clusters={final.active_clusters} -> {out}")
    return EXIT_OK


def cmd_compose(args: argparse.Namespace) -> int:
    scenario, _, state, _, _ = _load_run(args.run_dir)
    table = metrics.composition(state, scenario, args.attribute, hard=args.hard)
    out = args.out or os.path.join(args.run_dir, f"composition_{args.attribute}.csv")
    metrics.write_composition_csv(out, table)
    print(f"wrote {args.attribute} composition ({len(table.values)} values x "
          f"{len(table.cluster_ids)} clusters) to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    scenario, ensemble, state, stats, algorithm = _load_run(args.run_dir)
    omegas = [state.omega[i] for i in range(scenario.num_clients)]
    adapted = metrics.adapt_nonparticipating(ensemble, stats, scenario, algorithm)
    holdout = [c.test() for c in scenario.nonparticipating]
    report = {
        "algorithm": algorithm,
        "local_acc_soft": metrics.evaluate_accuracy(ensemble, scenario.test_datasets(), omegas, "soft"),
        "local_acc_hard": metrics.evaluate_accuracy(ensemble, scenario.test_datasets(), omegas, "hard"),
        "global_acc_soft": metrics.evaluate_accuracy(ensemble, holdout, adapted, "soft"),
        "global_acc_hard": metrics.evaluate_accuracy(ensemble, holdout, adapted, "hard"),
        "concept_purity": metrics.concept_purity(state, scenario).weighted_mean,
        "active_clusters": list(ensemble.active_ids()),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedshift", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        if config_required:
            p.add_argument("--config", required=True, help="path to a YAML experiment manifest")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override a config key, e.g. fed.num_rounds=10")
            p.add_argument("--preset", default=None, help="named scenario preset (paper-mix)")
        p.add_argument("--out", default=None, help="output directory (defaults to config output_dir)")

    p_gen = sub.add_parser("generate", help="build a scenario and write it to disk")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="run an algorithm and write reports")
    common(p_train)
    p_train.add_argument("--workers", type=int, default=1, help="thread count for per-client work")
    p_train.add_argument("--rounds", type=int, default=None, help="shorthand for --set fed.num_rounds=N")
    p_train.set_defaults(func=cmd_train)

    p_comp = sub.add_parser("compose", help="export a composition table from a run directory")
    p_comp.add_argument("run_dir", help="directory written by train")
    p_comp.add_argument("attribute", choices=ATTRIBUTES)
    p_comp.add_argument("--hard", action="store_true", help="tally argmax assignments instead of soft mass")
    p_comp.add_argument("--out", default=None)
    p_comp.set_defaults(func=cmd_compose)

    p_eval = sub.add_parser("eval", help="re-evaluate accuracies of a finished run")
    p_eval.add_argument("run_dir", help="directory written by train")
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
