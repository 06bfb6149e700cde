"""Synthetic multi-shift federated scenarios with ground-truth annotations.

The base task is a seeded Gaussian-blob classification problem (one blob per
class).  Three shift types compose on top of it:

* label shift: per-client class proportions drawn from a Dirichlet;
* feature shift: a per-style invertible affine map applied to the inputs;
* concept shift: a label permutation applied after sampling, so the same
  feature region legitimately carries different labels across concepts.

Every sample keeps its (class, style, concept) annotation.  Alongside the
participating clients, one style-clean, label-balanced holdout client is
built per concept; these never train and measure generalisation.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError
from .rng import STREAM_SCENARIO, substream

CLASS_SEPARATION = 3.0  # blob centre scale relative to unit noise

SCENARIO_HEADER = "scenario.json"
SCENARIO_DATA = "scenario.data"
FORMAT_VERSION = 1


def default_concept_maps(num_classes: int, num_concepts: int) -> tuple[tuple[int, ...], ...]:
    """Identity, label reversal y -> C-1-y, then cyclic shifts y -> (y+s) mod C."""
    if num_concepts < 1:
        raise ConfigurationError("need at least one concept")
    maps: list[tuple[int, ...]] = [tuple(range(num_classes))]
    if num_concepts > 1:
        maps.append(tuple(num_classes - 1 - y for y in range(num_classes)))
    shift = 1
    while len(maps) < num_concepts:
        candidate = tuple((y + shift) % num_classes for y in range(num_classes))
        if candidate not in maps:
            maps.append(candidate)
        shift += 1
        if shift > num_classes:
            raise ConfigurationError(f"cannot build {num_concepts} distinct concept maps for C={num_classes}")
    return tuple(maps)


@dataclass(frozen=True)
class ScenarioConfig:
    num_clients: int = 60
    samples_per_client: tuple[int, int] = (40, 80)
    input_dim: int = 12
    num_classes: int = 10
    dirichlet_alpha: float = 1.0
    num_feature_styles: int = 5
    feature_style_strength: float = 0.25
    concept_maps: tuple[tuple[int, ...], ...] = ()
    concept_proportions: tuple[float, ...] = ()
    fraction_with_feature_shift: tuple[float, ...] | float = 0.5
    holdout_samples_per_concept: int = 400
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        maps = self.concept_maps or default_concept_maps(self.num_classes, 3)
        maps = tuple(tuple(int(v) for v in m) for m in maps)
        object.__setattr__(self, "concept_maps", maps)
        props = self.concept_proportions or tuple(1.0 / len(maps) for _ in maps)
        object.__setattr__(self, "concept_proportions", tuple(float(p) for p in props))
        frac = self.fraction_with_feature_shift
        if isinstance(frac, (tuple, list)):
            object.__setattr__(self, "fraction_with_feature_shift", tuple(float(f) for f in frac))
        object.__setattr__(self, "samples_per_client", tuple(int(v) for v in self.samples_per_client))
        self._validate()

    def _validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be at least 1")
        lo, hi = self.samples_per_client
        if not (2 <= lo <= hi):
            raise ConfigurationError(f"samples_per_client range must satisfy 2 <= lo <= hi, got {(lo, hi)}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ConfigurationError("input_dim must be >= 1 and num_classes >= 2")
        if self.dirichlet_alpha <= 0:
            raise ConfigurationError("dirichlet_alpha must be positive")
        if self.num_feature_styles < 0:
            raise ConfigurationError("num_feature_styles must be non-negative")
        identity = tuple(range(self.num_classes))
        if self.concept_maps[0] != identity:
            raise ConfigurationError("concept map 0 must be the identity")
        for c, cmap in enumerate(self.concept_maps):
            if sorted(cmap) != list(identity):
                raise ConfigurationError(f"concept map {c} is not a permutation of [0, {self.num_classes})")
        if len(set(self.concept_maps)) != len(self.concept_maps):
            raise ConfigurationError("concept maps must be pairwise distinct")
        if len(self.concept_proportions) != len(self.concept_maps):
            raise ConfigurationError("concept_proportions length must match concept_maps")
        if any(p < 0 for p in self.concept_proportions) or abs(sum(self.concept_proportions) - 1.0) > 1e-9:
            raise ConfigurationError("concept_proportions must be non-negative and sum to 1")
        for f in self.style_fractions():
            if not (0.0 <= f <= 1.0):
                raise ConfigurationError("fraction_with_feature_shift entries must lie in [0, 1]")
        if any(f > 0 for f in self.style_fractions()) and self.num_feature_styles < 1:
            raise ConfigurationError("feature shift requested but num_feature_styles is 0")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if self.holdout_samples_per_concept < 2 * self.num_classes:
            raise ConfigurationError("holdout_samples_per_concept too small for a balanced split")

    def style_fractions(self) -> tuple[float, ...]:
        """Per-concept fraction of clients carrying a feature style."""
        f = self.fraction_with_feature_shift
        if isinstance(f, tuple):
            if len(f) != len(self.concept_maps):
                raise ConfigurationError("per-concept fraction_with_feature_shift length must match concept_maps")
            return f
        return tuple(float(f) for _ in self.concept_maps)

    @property
    def num_concepts(self) -> int:
        return len(self.concept_maps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["concept_maps"] = [list(m) for m in self.concept_maps]
        d["concept_proportions"] = list(self.concept_proportions)
        d["samples_per_client"] = list(self.samples_per_client)
        f = self.fraction_with_feature_shift
        d["fraction_with_feature_shift"] = list(f) if isinstance(f, tuple) else f
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("concept_maps", "samples_per_client"):
            if key in d and d[key] is not None:
                d[key] = tuple(tuple(v) if isinstance(v, list) else v for v in d[key]) if key == "concept_maps" else tuple(d[key])
        if isinstance(d.get("concept_proportions"), list):
            d["concept_proportions"] = tuple(d["concept_proportions"])
        if isinstance(d.get("fraction_with_feature_shift"), list):
            d["fraction_with_feature_shift"] = tuple(d["fraction_with_feature_shift"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClientDataset:
    """One client's disjoint train/test split with its shift annotations."""

    client_id: int
    concept: int
    style: int  # 0 means no feature transform
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_test(self) -> int:
        return len(self.y_test)

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_train, self.y_train

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x_test, self.y_test


@dataclass
class FederatedScenario:
    config: ScenarioConfig
    participating: list[ClientDataset]
    nonparticipating: list[ClientDataset]

    @property
    def num_clients(self) -> int:
        return len(self.participating)

    def train_datasets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [c.train() for c in self.participating]

    def test_datasets(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [c.test() for c in self.participating]

    def train_sizes(self) -> list[int]:
        return [c.n_train for c in self.participating]


def _largest_remainder_counts(proportions: tuple[float, ...], total: int) -> list[int]:
    """Integer allocation matching proportions; remainders break ties by index."""
    raw = [p * total for p in proportions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in range(total - sum(counts)):
        counts[order[i % len(order)]] += 1
    return counts


def _style_transforms(config: ScenarioConfig, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Invertible affine maps A x + b with operator-norm deviation = strength."""
    d = config.input_dim
    out = []
    for _ in range(config.num_feature_styles):
        while True:
            g = rng.standard_normal((d, d))
            a = np.eye(d) + config.feature_style_strength * g / np.linalg.norm(g, 2)
            if abs(np.linalg.det(a)) > 1e-9:
                break
        b = config.feature_style_strength * rng.standard_normal(d)
        out.append((a, b))
    return out


def _assign_concepts_and_styles(
    config: ScenarioConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-client concept ids and style ids (0 = clean)."""
    m = config.num_clients
    counts = _largest_remainder_counts(config.concept_proportions, m)
    concepts = np.repeat(np.arange(config.num_concepts), counts)
    concepts = concepts[rng.permutation(m)]
    styles = np.zeros(m, dtype=np.int64)
    for c, frac in enumerate(config.style_fractions()):
        members = np.flatnonzero(concepts == c)
        n_styled = int(round(frac * len(members)))
        chosen = members[rng.permutation(len(members))[:n_styled]]
        styles[chosen] = rng.integers(1, config.num_feature_styles + 1, size=n_styled)
    return concepts, styles


def _sample_client(
    config: ScenarioConfig,
    centers: np.ndarray,
    transforms: list[tuple[np.ndarray, np.ndarray]],
    concept: int,
    style: int,
    n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    props = rng.dirichlet(np.full(config.num_classes, config.dirichlet_alpha))
    base = rng.choice(config.num_classes, size=n, p=props)
    x = centers[base] + rng.standard_normal((n, config.input_dim))
    if style > 0:
        a, b = transforms[style - 1]
        x = x @ a.T + b
    y = np.asarray(config.concept_maps[concept], dtype=np.int64)[base]
    return x, y


def generate(config: ScenarioConfig) -> FederatedScenario:
    """Build a fully annotated scenario; identical bytes for identical config."""
    rng = substream(config.seed, STREAM_SCENARIO)
    centers = CLASS_SEPARATION * rng.standard_normal((config.num_classes, config.input_dim))
    transforms = _style_transforms(config, rng)
    concepts, styles = _assign_concepts_and_styles(config, rng)

    participating = []
    lo, hi = config.samples_per_client
    for i in range(config.num_clients):
        n = int(rng.integers(lo, hi + 1))
        x, y = _sample_client(config, centers, transforms, int(concepts[i]), int(styles[i]), n, rng)
        n_train = min(max(int(round(config.train_fraction * n)), 1), n - 1)
        participating.append(
            ClientDataset(
                client_id=i,
                concept=int(concepts[i]),
                style=int(styles[i]),
                x_train=x[:n_train],
                y_train=y[:n_train],
                x_test=x[n_train:],
                y_test=y[n_train:],
            )
        )

    nonparticipating = []
    per_class = max(1, config.holdout_samples_per_concept // (2 * config.num_classes))
    for c in range(config.num_concepts):
        splits = []
        for _ in range(2):
            base = np.tile(np.arange(config.num_classes), per_class)
            x = centers[base] + rng.standard_normal((len(base), config.input_dim))
            y = np.asarray(config.concept_maps[c], dtype=np.int64)[base]
            splits.append((x, y))
        nonparticipating.append(
            ClientDataset(
                client_id=config.num_clients + c,
                concept=c,
                style=0,
                x_train=splits[0][0],
                y_train=splits[0][1],
                x_test=splits[1][0],
                y_test=splits[1][1],
            )
        )
    return FederatedScenario(config=config, participating=participating, nonparticipating=nonparticipating)


def _client_header(client: ClientDataset, participating: bool) -> dict:
    return {
        "id": client.client_id,
        "participating": participating,
        "concept": client.concept,
        "style": client.style,
        "n_train": client.n_train,
        "n_test": client.n_test,
    }


def save_scenario(scenario: FederatedScenario, out_dir: str) -> None:
    """Write the header and one-sample-per-line data file; overwrites in place.

    Data line format: feature values (full-precision repr), label, client id,
    concept id, style id.  Rows are grouped per client, train split first.
    """
    os.makedirs(out_dir, exist_ok=True)
    header = {
        "format": "fedshift-scenario",
        "version": FORMAT_VERSION,
        "config": scenario.config.to_dict(),
        "clients": [_client_header(c, True) for c in scenario.participating]
        + [_client_header(c, False) for c in scenario.nonparticipating],
    }
    with open(os.path.join(out_dir, SCENARIO_HEADER), "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, SCENARIO_DATA), "w") as fh:
        for client in scenario.participating + scenario.nonparticipating:
            for x_arr, y_arr in ((client.x_train, client.y_train), (client.x_test, client.y_test)):
                for row, label in zip(x_arr, y_arr):
                    feats = ",".join(repr(float(v)) for v in row)
                    fh.write(f"{feats},{int(label)},{client.client_id},{client.concept},{client.style}\n")


def _parse_data_line(line: str, lineno: int, input_dim: int) -> tuple[np.ndarray, int, int, int, int]:
    parts = line.rstrip("\n").split(",")
    if len(parts) != input_dim + 4:
        raise ParseError(f"line {lineno}: expected {input_dim + 4} fields, got {len(parts)}")
    try:
        feats = np.array([float(v) for v in parts[:input_dim]])
        label, client, concept, style = (int(v) for v in parts[input_dim:])
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    return feats, label, client, concept, style


def load_scenario(in_dir: str) -> FederatedScenario:
    """Inverse of save_scenario; round-trips bit-exactly."""
    with open(os.path.join(in_dir, SCENARIO_HEADER)) as fh:
        header = json.load(fh)
    if header.get("format") != "fedshift-scenario":
        raise ParseError(f"{SCENARIO_HEADER}: not a scenario header")
    config = ScenarioConfig.from_dict(header["config"])
    d = config.input_dim

    participating: list[ClientDataset] = []
    nonparticipating: list[ClientDataset] = []
    lineno = 0
    with open(os.path.join(in_dir, SCENARIO_DATA)) as fh:
        for meta in header["clients"]:
            splits = []
            for count in (meta["n_train"], meta["n_test"]):
                x = np.empty((count, d))
                y = np.empty(count, dtype=np.int64)
                for j in range(count):
                    lineno += 1
                    line = fh.readline()
                    if not line:
                        raise ParseError(f"line {lineno}: unexpected end of data file")
                    feats, label, client, concept, style = _parse_data_line(line, lineno, d)
                    if (client, concept, style) != (meta["id"], meta["concept"], meta["style"]):
                        raise ParseError(f"line {lineno}: sample annotations disagree with header")
                    x[j] = feats
                    y[j] = label
                splits.append((x, y))
            client_ds = ClientDataset(
                client_id=meta["id"],
                concept=meta["concept"],
                style=meta["style"],
                x_train=splits[0][0],
                y_train=splits[0][1],
                x_test=splits[1][0],
                y_test=splits[1][1],
            )
            (participating if meta["participating"] else nonparticipating).append(client_ds)
        if fh.readline():
            raise ParseError(f"line {lineno + 1}: trailing data beyond header counts")
    return FederatedScenario(config=config, participating=participating, nonparticipating=nonparticipating)


@dataclass(frozen=True)
class TabularSchema:
    """How to read a delimited numeric file."""

    label_column: int | str = -1
    delimiter: str = ","
    has_header: bool = False


def _read_tabular(path: str, schema: TabularSchema) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as fh:
        lines = fh.readlines()
    start = 0
    label_idx: int
    if schema.has_header:
        if not lines:
            raise ParseError("line 1: empty file")
        columns = [c.strip() for c in lines[0].rstrip("\n").split(schema.delimiter)]
        if isinstance(schema.label_column, str):
            if schema.label_column not in columns:
                raise ConfigurationError(
                    f"label column {schema.label_column!r} not in header {columns}"
                )
            label_idx = columns.index(schema.label_column)
        else:
            label_idx = schema.label_column
        start = 1
    else:
        if isinstance(schema.label_column, str):
            raise ConfigurationError("named label column requires has_header=True")
        label_idx = schema.label_column

    rows, labels = [], []
    width = None
    for lineno, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split(schema.delimiter)
        if width is None:
            width = len(parts)
            if not (-width <= label_idx < width):
                raise ConfigurationError(f"label column {label_idx} outside row width {width}")
        elif len(parts) != width:
            raise ParseError(f"line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            values = [float(v) for v in parts]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        label = values.pop(label_idx % width)
        if label != int(label):
            raise ParseError(f"line {lineno}: label {label} is not an integer")
        rows.append(values)
        labels.append(int(label))
    if not rows:
        raise ParseError("no data rows found")
    return np.asarray(rows), np.asarray(labels, dtype=np.int64)


def load_tabular(path: str, schema: TabularSchema, config: ScenarioConfig) -> FederatedScenario:
    """Partition a delimited numeric file into an annotated federated scenario.

    Class labels are remapped to 0..C-1 by sorted value.  The file's feature
    width and class count override ``config.input_dim`` / ``config.num_classes``.
    A balanced holdout pool is carved out for the per-concept test clients,
    then the remainder is split by a per-class Dirichlet allocation across
    clients; concepts and styles are assigned exactly as in ``generate``.
    """
    x_all, y_raw = _read_tabular(path, schema)
    classes = np.unique(y_raw)
    remap = {int(v): i for i, v in enumerate(classes)}
    y_all = np.asarray([remap[int(v)] for v in y_raw], dtype=np.int64)
    num_classes = len(classes)
    if num_classes < 2:
        raise ConfigurationError("tabular data must contain at least two classes")

    base = config.to_dict()
    base["input_dim"] = x_all.shape[1]
    base["num_classes"] = num_classes
    if not config.concept_maps or len(config.concept_maps[0]) != num_classes:
        base["concept_maps"] = [list(m) for m in default_concept_maps(num_classes, max(1, config.num_concepts))]
    config = ScenarioConfig.from_dict(base)

    rng = substream(config.seed, STREAM_SCENARIO)
    transforms = _style_transforms(config, rng)
    concepts, styles = _assign_concepts_and_styles(config, rng)

    class_pools = [rng.permutation(np.flatnonzero(y_all == c)) for c in range(num_classes)]
    per_class = max(1, config.holdout_samples_per_concept // (2 * num_classes))
    need = 2 * per_class * config.num_concepts
    if any(len(pool) < need + 1 for pool in class_pools):
        raise ConfigurationError(
            f"not enough samples per class for the holdout pool (need {need + 1} per class)"
        )

    nonparticipating = []
    cursor = np.zeros(num_classes, dtype=np.int64)
    for c in range(config.num_concepts):
        splits = []
        for _ in range(2):
            take = np.concatenate(
                [class_pools[cls][cursor[cls] : cursor[cls] + per_class] for cls in range(num_classes)]
            )
            cursor += per_class
            y = np.asarray(config.concept_maps[c], dtype=np.int64)[y_all[take]]
            splits.append((x_all[take], y))
        nonparticipating.append(
            ClientDataset(
                client_id=config.num_clients + c,
                concept=c,
                style=0,
                x_train=splits[0][0],
                y_train=splits[0][1],
                x_test=splits[1][0],
                y_test=splits[1][1],
            )
        )

    remaining = [pool[cursor[c] :] for c, pool in enumerate(class_pools)]
    client_indices: list[list[int]] = [[] for _ in range(config.num_clients)]
    for pool in remaining:
        props = rng.dirichlet(np.full(config.num_clients, config.dirichlet_alpha))
        counts = _largest_remainder_counts(tuple(props), len(pool))
        offset = 0
        for i, cnt in enumerate(counts):
            client_indices[i].extend(pool[offset : offset + cnt].tolist())
            offset += cnt

    participating = []
    for i, idx_list in enumerate(client_indices):
        idx = np.asarray(idx_list, dtype=np.int64)
        if len(idx) < 2:
            raise ConfigurationError(f"client {i} received fewer than 2 samples; lower num_clients")
        idx = idx[rng.permutation(len(idx))]
        x = x_all[idx]
        if styles[i] > 0:
            a, b = transforms[styles[i] - 1]
            x = x @ a.T + b
        y = np.asarray(config.concept_maps[concepts[i]], dtype=np.int64)[y_all[idx]]
        n_train = min(max(int(round(config.train_fraction * len(idx))), 1), len(idx) - 1)
        participating.append(
            ClientDataset(
                client_id=i,
                concept=int(concepts[i]),
                style=int(styles[i]),
                x_train=x[:n_train],
                y_train=y[:n_train],
                x_test=x[n_train:],
                y_test=y[n_train:],
            )
        )
    return FederatedScenario(config=config, participating=participating, nonparticipating=nonparticipating)
