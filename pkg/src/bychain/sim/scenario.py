"""Scenario files: a versioned YAML document that fully determines a run.

Every section is optional; anything omitted takes the defaults below.
Unknown keys are rejected so typos fail at load time instead of silently
running a different experiment.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1
BUNDLED = ("standard",)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class LatencyModel:
    """Per-message one-way latency in simulated seconds."""

    kind: str = "uniform"  # zero | fixed | uniform | exponential
    value: float = 0.0
    low: float = 0.05
    high: float = 0.5
    mean: float = 0.2

    def __post_init__(self):
        if self.kind not in ("zero", "fixed", "uniform", "exponential"):
            raise ScenarioError(f"unknown latency kind {self.kind!r}")
        if min(self.value, self.low, self.high, self.mean) < 0 or self.high < self.low:
            raise ScenarioError("latency parameters must be non-negative with low <= high")


@dataclass(frozen=True)
class Partition:
    start: int
    end: int
    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.end <= self.start:
            raise ScenarioError("partition must end after it starts")
        seen = [n for g in self.groups for n in g]
        if len(seen) != len(set(seen)):
            raise ScenarioError("partition groups overlap")


@dataclass(frozen=True)
class NetworkSpec:
    latency: LatencyModel = LatencyModel()
    partitions: tuple[Partition, ...] = ()
    encounter_prob: float = 1.0
    ble_latency_ms: tuple[float, float] = (20.0, 400.0)


@dataclass(frozen=True)
class WitnessSpec:
    count: int = 10
    radius: float = 50.0
    layout: str = "cluster"  # cluster | uniform | explicit
    cluster_size: float = 100.0
    positions: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.count < 0 or self.radius <= 0:
            raise ScenarioError("witness count must be >= 0 and radius > 0")
        if self.layout not in ("cluster", "uniform", "explicit"):
            raise ScenarioError(f"unknown witness layout {self.layout!r}")
        if self.layout == "explicit" and len(self.positions) != self.count:
            raise ScenarioError("explicit layout needs one position per witness")


@dataclass(frozen=True)
class ProverSpec:
    count: int = 3
    speed: float = 10.0
    waypoint_count: int = 6
    waypoint_spread: float = 150.0
    waypoints: tuple[tuple[tuple[float, float], ...], ...] = ()
    claim_every: int = 1
    quiet_rounds: int | None = None

    def __post_init__(self):
        if self.count < 0 or self.speed < 0 or self.claim_every < 1:
            raise ScenarioError("invalid prover spec")
        if self.waypoints and len(self.waypoints) != self.count:
            raise ScenarioError("waypoints must list one path per prover")


@dataclass(frozen=True)
class ConsensusSpec:
    theta: float = 5.0
    committee_size: int = 3
    block_interval: int = 3
    deterministic_votes: bool = True
    tau_final: float = 3.0
    compute_delay: tuple[float, float] = (0.2, 1.2)
    measure_compute: bool = False
    compute_scale: float = 1.0
    fixed_committee: tuple[int, ...] = ()
    tx_lifetime: int = 100

    def __post_init__(self):
        if self.committee_size < 1 or self.block_interval < 1 or self.theta < 0:
            raise ScenarioError("invalid consensus parameters")


@dataclass(frozen=True)
class FieldSpec:
    k_rep: float = 10.0
    lam: float = 1.5
    R_r: float | None = None
    alpha: float = 0.1
    mass: float = 1.0
    epsilon_sing: float = 1e-3


@dataclass(frozen=True)
class IncentiveSpec:
    budget: float = 1000.0
    epoch_blocks: int = 100
    block_reward: float = 1.0

    def __post_init__(self):
        if self.epoch_blocks < 1 or self.budget < 0:
            raise ScenarioError("invalid incentive parameters")


@dataclass(frozen=True)
class Scenario:
    name: str = "unnamed"
    version: int = SCHEMA_VERSION
    seed: int = 7
    rounds: int = 200
    region: tuple[float, float, float, float] = (0.0, 0.0, 1000.0, 1000.0)
    witnesses: WitnessSpec = WitnessSpec()
    provers: ProverSpec = ProverSpec()
    network: NetworkSpec = NetworkSpec()
    consensus: ConsensusSpec = ConsensusSpec()
    field: FieldSpec = FieldSpec()
    incentive: IncentiveSpec = IncentiveSpec()
    report_every: int = 1
    coverage_resolution: int = 100
    adversary: tuple[dict, ...] = ()

    def __post_init__(self):
        if self.version != SCHEMA_VERSION:
            raise ScenarioError(f"unsupported scenario version {self.version}")
        if self.rounds < 0 or self.report_every < 1:
            raise ScenarioError("rounds must be >= 0 and report_every >= 1")
        n = self.node_count
        for p in self.network.partitions:
            if any(not 0 <= i < n for g in p.groups for i in g):
                raise ScenarioError("partition names an unknown node")
        if any(not 0 <= i < n for i in self.consensus.fixed_committee):
            raise ScenarioError("fixed committee names an unknown node")
        if n == 0:
            raise ScenarioError("scenario needs at least one node")

    @property
    def node_count(self) -> int:
        return self.witnesses.count + self.provers.count

    @property
    def repulsive_cutoff(self) -> float:
        return self.field.R_r if self.field.R_r is not None else 2 * self.witnesses.radius

    def with_overrides(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(tp, data: Any, where: str):
    """Coerce plain YAML data into the annotated type ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise ScenarioError(f"{where}: expected a mapping")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(data) - names
        if unknown:
            raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in data.items()}
        try:
            return tp(**kwargs)
        except TypeError as exc:
            raise ScenarioError(f"{where}: {exc}") from exc
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if data is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], data, where)
    if origin is tuple:
        if not isinstance(data, (list, tuple)):
            raise ScenarioError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(data))
        if len(args) != len(data):
            raise ScenarioError(f"{where}: expected {len(args)} items")
        return tuple(_build(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, data)))
    if tp is dict or origin is dict:
        if not isinstance(data, dict):
            raise ScenarioError(f"{where}: expected a mapping")
        return dict(data)
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise ScenarioError(f"{where}: expected a number")
        return float(data)
    if tp is int:
        if isinstance(data, bool) or not isinstance(data, int):
            raise ScenarioError(f"{where}: expected an integer")
        return data
    if tp is bool:
        if not isinstance(data, bool):
            raise ScenarioError(f"{where}: expected true/false")
        return data
    if tp is str:
        if not isinstance(data, str):
            raise ScenarioError(f"{where}: expected a string")
        return data
    raise ScenarioError(f"{where}: unsupported type {tp}")


def from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("scenario document must be a mapping")
    try:
        return _build(Scenario, data, "scenario")
    except ScenarioError:
        raise
    except (ValueError, TypeError) as exc:
        raise ScenarioError(str(exc)) from exc


def loads(text: str) -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"invalid YAML: {exc}") from exc
    return from_dict(data or {})


def dumps(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False)


def bundled(name: str) -> Scenario:
    if name not in BUNDLED:
        raise ScenarioError(f"no bundled scenario named {name!r}")
    text = resources.files("bychain.sim").joinpath(f"scenarios/{name}.scn").read_text()
    return loads(text)


def standard() -> Scenario:
    return bundled("standard")


def load(path_or_name: str | Path) -> Scenario:
    """Load a scenario file, or a bundled scenario by bare name."""
    path = Path(path_or_name)
    if not path.exists():
        stem = path.name.removesuffix(".scn")
        if str(path_or_name) in BUNDLED or (path.parent == Path(".") and stem in BUNDLED):
            return bundled(stem)
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    return loads(text)
