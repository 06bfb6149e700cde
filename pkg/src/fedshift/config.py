"""Experiment configuration: YAML manifest, overrides, presets.

A manifest is one hierarchical key-value file with sections ``scenario``,
``model``, ``fed``, ``rc`` plus top-level ``algorithm``, ``num_clusters``,
``output_dir``, ``seed``.  The root seed feeds every sub-config unless a
section pins its own.  ``--set a.b=value`` overrides any key.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .engine import RCHyper
from .errors import ConfigurationError
from .federation import FedConfig
from .models import ModelSpec
from .scenario import ScenarioConfig, default_concept_maps


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig | None
    scenario_path: str | None
    algorithm: str
    num_clusters: int
    fed: FedConfig
    rc: RCHyper
    model: dict
    output_dir: str
    seed: int

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(
            input_dim=input_dim,
            num_classes=num_classes,
            hidden=tuple(self.model.get("hidden", ())),
            shared_trunk=bool(self.model.get("shared_trunk", False)),
        )


PRESETS = ("paper-mix",)


def apply_preset(scenario_section: dict, preset: str) -> dict:
    """Named scenario presets; ``paper-mix`` reproduces the reference mixing.

    Half the clients keep the identity mapping (a 30% clean / 20% styled
    split), and each of the two permuted concepts takes a quarter of the
    clients with a fifth of them styled.
    """
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    section = dict(scenario_section)
    c = int(section.get("num_classes", 10))
    section["concept_maps"] = [
        list(range(c)),
        [c - 1 - y for y in range(c)],
        [(y + 1) % c for y in range(c)],
    ]
    section["concept_proportions"] = [0.5, 0.25, 0.25]
    section["fraction_with_feature_shift"] = [0.4, 0.2, 0.2]
    return section


def _build_scenario_config(section: dict, seed: int) -> ScenarioConfig:
    section = dict(section)
    section.setdefault("seed", seed)
    num_concepts = section.pop("num_concepts", None)
    if num_concepts is not None and "concept_maps" not in section:
        section["concept_maps"] = [
            list(m) for m in default_concept_maps(int(section.get("num_classes", 10)), int(num_concepts))
        ]
    return ScenarioConfig.from_dict(section)


def _pick(section: dict, cls, label: str):
    unknown = set(section) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown {label} fields: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigurationError(f"bad {label} section: {exc}") from None


def parse_override(text: str) -> tuple[list[str], object]:
    """Parse one ``--set path.to.key=value`` override; values go through YAML."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigurationError(f"override {text!r} has an empty key")
    return path, yaml.safe_load(raw)


def _apply_overrides(tree: dict, overrides: list[str]) -> dict:
    tree = copy.deepcopy(tree)
    for text in overrides:
        path, value = parse_override(text)
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {text!r} descends into a non-section value")
        node[path[-1]] = value
    return tree


def build_experiment(tree: dict, overrides: list[str] = (), preset: str | None = None) -> ExperimentConfig:
    if not isinstance(tree, dict):
        raise ConfigurationError("config file must contain a mapping at the top level")
    tree = _apply_overrides(tree, list(overrides))

    seed = int(tree.get("seed", 0))
    scenario_section = tree.get("scenario")
    scenario_path = tree.get("scenario_path")
    if scenario_section is None and scenario_path is None:
        raise ConfigurationError("missing field: scenario (inline section) or scenario_path")
    if preset is not None:
        if scenario_section is None:
            raise ConfigurationError("presets require an inline scenario section")
        scenario_section = apply_preset(scenario_section, preset)

    fed_section = dict(tree.get("fed", {}))
    fed_section.setdefault("seed", seed)
    rc_section = dict(tree.get("rc", {}))
    fed = _pick(fed_section, FedConfig, "fed")
    rc = _pick(rc_section, RCHyper, "rc")
    if fed.adam_enabled:
        rc = RCHyper(**{**rc.__dict__, "adam_enabled": True})

    model = dict(tree.get("model", {}))
    arch = model.get("architecture", "linear")
    if arch not in ("linear", "mlp"):
        raise ConfigurationError(f"model.architecture must be 'linear' or 'mlp', got {arch!r}")
    if arch == "linear":
        model["hidden"] = []
    elif not model.get("hidden"):
        raise ConfigurationError("model.architecture 'mlp' requires non-empty model.hidden")

    return ExperimentConfig(
        scenario=None if scenario_section is None else _build_scenario_config(scenario_section, seed),
        scenario_path=scenario_path,
        algorithm=str(tree.get("algorithm", "fedrc")),
        num_clusters=int(tree.get("num_clusters", 3)),
        fed=fed,
        rc=rc,
        model=model,
        output_dir=str(tree.get("output_dir", "runs/run")),
        seed=seed,
    )


def load_experiment_config(path: str, overrides: list[str] = (), preset: str | None = None) -> ExperimentConfig:
    with open(path) as fh:
        try:
            tree = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    return build_experiment(tree or {}, overrides, preset)
