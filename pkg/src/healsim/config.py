import copy
import dataclasses
import enum
import hashlib
import json
import pathlib
from typing import Any, Optional

import yaml

from .datatypes import JsonDict
from .exceptions import HealsimConfigError
from .models import Hyperparams, ModelKind


class ProtocolName(str, enum.Enum):
    HEAL = 'heal'
    FEDAVG = 'fedavg'
    GAIA = 'gaia'
    GOSSIP = 'gossip'
    EPIDEMIC = 'epidemic'


class TopologyKind(str, enum.Enum):
    ELEVATOR = 'elevator'
    STAR = 'star'
    MULTISTAR = 'multistar'
    RING = 'ring'
    KREGULAR = 'kregular'
    CHORD = 'chord'
    COMPLETE = 'complete'


class FaultKind(str, enum.Enum):
    CRASH_FRACTION = 'crash_fraction'
    CRASH_NODES = 'crash_nodes'
    CRASH_ALL_HUBS = 'crash_all_hubs'
    CRASH_HUBS = 'crash_hubs'
    CHURN = 'churn'


# protocol/topology pairs of the baseline comparison
PRESETS: dict[str, dict[str, Any]] = {
    'heal': {'protocol': 'heal', 'topology': {'kind': 'elevator'}},
    'federated': {'protocol': 'fedavg', 'topology': {'kind': 'star'}},
    'gaia': {'protocol': 'gaia', 'topology': {'kind': 'multistar', 'servers': 5}},
    'gossip': {'protocol': 'gossip', 'topology': {'kind': 'kregular', 'degree': 20}},
    'epidemic': {'protocol': 'epidemic', 'topology': {'kind': 'kregular', 'degree': 20}},
    'ring': {'protocol': 'epidemic', 'topology': {'kind': 'ring'}},
    'chord': {'protocol': 'epidemic', 'topology': {'kind': 'chord'}},
}

SWEEPABLE = ('h', 's', 'n_nodes', 'cycles', 'learning_rate')


@dataclasses.dataclass
class TopologyConfig:
    kind: TopologyKind = TopologyKind.ELEVATOR
    # k of the k-regular graph, also the Elevator bootstrap degree
    degree: int = 20
    servers: int = 5
    cache_size: int = 20

    def __post_init__(self) -> None:
        self.kind = _enum(TopologyKind, self.kind, 'topology.kind')


@dataclasses.dataclass
class DatasetConfig:
    source: str = 'synthetic'
    path: Optional[str] = None
    label_column: int = -1
    header: bool = False
    n_samples: int = 2000
    n_features: int = 64
    n_classes: int = 10
    separation: float = 5.0
    seed: int = 0
    test_fraction: float = 0.2
    normalize: bool = True
    # share of the training set held back for churn joiners
    reserve_fraction: float = 0.1


@dataclasses.dataclass
class ModelConfig:
    kind: str = 'auto'

    def __post_init__(self) -> None:
        if self.kind != 'auto':
            self.kind = _enum(ModelKind, self.kind, 'model.kind').value


@dataclasses.dataclass
class FaultEvent:
    kind: FaultKind
    cycle: int = 0
    fraction: Optional[float] = None
    nodes: list[int] = dataclasses.field(default_factory=list)
    count: Optional[int] = None
    rate: Optional[float] = None
    start_cycle: Optional[int] = None
    end_cycle: Optional[int] = None
    new_node_degree: int = 20

    def __post_init__(self) -> None:
        self.kind = _enum(FaultKind, self.kind, 'faults.kind')
        if self.kind is FaultKind.CHURN:
            if self.start_cycle is None:
                self.start_cycle = self.cycle
            self.cycle = self.start_cycle
            if self.end_cycle is None:
                self.end_cycle = self.start_cycle

    def is_active(self, cycle: int) -> bool:
        if self.kind is FaultKind.CHURN:
            return self.start_cycle <= cycle <= self.end_cycle
        return cycle == self.cycle


@dataclasses.dataclass
class FaultSchedule:
    events: list[FaultEvent] = dataclasses.field(default_factory=list)

    def at(self, cycle: int) -> list[FaultEvent]:
        return [event for event in self.events if event.kind is not FaultKind.CHURN and event.is_active(cycle)]

    def churn_at(self, cycle: int) -> list[FaultEvent]:
        return [event for event in self.events if event.kind is FaultKind.CHURN and event.is_active(cycle)]

    @property
    def has_churn(self) -> bool:
        return any(event.kind is FaultKind.CHURN for event in self.events)


@dataclasses.dataclass
class ExperimentConfig:
    name: str = 'experiment'
    protocol: ProtocolName = ProtocolName.HEAL
    topology: TopologyConfig = dataclasses.field(default_factory=TopologyConfig)
    n_nodes: int = 100
    h: int = 5
    # number_hub_send; the string 'half' means max(1, h // 2)
    s: int | str = 1
    cycles: int = 1000
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    hyper: Hyperparams = dataclasses.field(default_factory=Hyperparams)
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    faults: FaultSchedule = dataclasses.field(default_factory=FaultSchedule)
    repetitions: int = 5
    master_seed: int = 0
    overlay_warmup: int = 10
    overlay_steps_per_cycle: int = 1
    weighted_hub_average: bool = False
    hub_threshold: float = 0.9
    diameter_every: int = 10

    def __post_init__(self) -> None:
        self.protocol = _enum(ProtocolName, self.protocol, 'protocol')

    @property
    def number_hub_send(self) -> int:
        if self.s == 'half':
            return max(1, self.h // 2)
        return int(self.s)

    def validate(self) -> 'ExperimentConfig':
        def fail(field: str, problem: str) -> None:
            raise HealsimConfigError(f"entry '{self.name}': field '{field}': {problem}")

        if self.cycles < 1:
            fail('cycles', f'must be >= 1, got {self.cycles}')
        if self.repetitions < 1:
            fail('repetitions', f'must be >= 1, got {self.repetitions}')
        if not self.hyper.learning_rate > 0:
            fail('hyper.learning_rate', f'must be > 0, got {self.hyper.learning_rate}')
        if self.n_nodes < 2:
            fail('n_nodes', f'must be >= 2, got {self.n_nodes}')
        if self.s != 'half' and not isinstance(self.s, int):
            fail('s', f"must be an integer or 'half', got {self.s!r}")
        topology = self.topology
        if self.protocol is ProtocolName.HEAL:
            if topology.kind is not TopologyKind.ELEVATOR:
                fail('topology.kind', 'heal runs on the elevator overlay')
            if not 1 <= self.h <= topology.cache_size:
                fail('h', f'must be in [1, cache_size={topology.cache_size}], got {self.h}')
            if not 1 <= self.number_hub_send <= self.h:
                fail('s', f'must be in [1, h={self.h}], got {self.s}')
        if self.protocol is ProtocolName.FEDAVG and topology.kind is not TopologyKind.STAR:
            fail('topology.kind', 'fedavg runs on a star')
        if self.protocol is ProtocolName.GAIA:
            if topology.kind is not TopologyKind.MULTISTAR:
                fail('topology.kind', 'gaia runs on a multistar')
        if topology.kind is TopologyKind.MULTISTAR and not 1 <= topology.servers < self.n_nodes:
            fail('topology.servers', f'must be in [1, n_nodes), got {topology.servers}')
        if topology.kind in (TopologyKind.KREGULAR, TopologyKind.ELEVATOR):
            if not 0 < topology.degree < self.n_nodes or (topology.degree * self.n_nodes) % 2:
                fail('topology.degree', f'no {topology.degree}-regular graph on {self.n_nodes} nodes')
        if topology.kind is TopologyKind.RING and self.n_nodes < 3:
            fail('n_nodes', 'a ring needs at least 3 nodes')
        if topology.cache_size < 1:
            fail('topology.cache_size', f'must be positive, got {topology.cache_size}')
        if self.overlay_warmup < 0 or self.overlay_steps_per_cycle < 1:
            fail('overlay_warmup', 'warm-up must be >= 0 and steps per cycle >= 1')
        if not 0 < self.hub_threshold <= 1:
            fail('hub_threshold', f'must be in (0, 1], got {self.hub_threshold}')
        if self.diameter_every < 0:
            fail('diameter_every', f'must be >= 0, got {self.diameter_every}')
        dataset = self.dataset
        if dataset.source not in ('csv', 'synthetic'):
            fail('dataset.source', f"must be 'csv' or 'synthetic', got {dataset.source!r}")
        if dataset.source == 'csv' and not dataset.path:
            fail('dataset.path', 'required for csv datasets')
        if not 0 < dataset.test_fraction < 1:
            fail('dataset.test_fraction', f'must be in (0, 1), got {dataset.test_fraction}')
        if not 0 < dataset.reserve_fraction < 1:
            fail('dataset.reserve_fraction', f'must be in (0, 1), got {dataset.reserve_fraction}')
        for event in self.faults.events:
            if not 0 <= event.cycle <= self.cycles:
                fail('faults.cycle', f'{event.kind.value} at cycle {event.cycle} outside [0, {self.cycles}]')
            if event.kind is FaultKind.CRASH_FRACTION and not (event.fraction and 0 < event.fraction <= 1):
                fail('faults.fraction', f'must be in (0, 1], got {event.fraction}')
            if event.kind is FaultKind.CRASH_NODES and not event.nodes:
                fail('faults.nodes', 'crash_nodes needs a node list')
            if event.kind is FaultKind.CRASH_HUBS and not (event.count and event.count >= 1):
                fail('faults.count', f'crash_hubs needs a positive count, got {event.count}')
            if event.kind is FaultKind.CHURN:
                if not (event.rate and 0 < event.rate <= 1):
                    fail('faults.rate', f'must be in (0, 1], got {event.rate}')
                if event.end_cycle < event.start_cycle or event.end_cycle > self.cycles:
                    fail('faults.end_cycle', f'window [{event.start_cycle}, {event.end_cycle}] is invalid')
                if event.new_node_degree < 1:
                    fail('faults.new_node_degree', f'must be positive, got {event.new_node_degree}')
        return self

    def to_dict(self) -> JsonDict:
        data = dataclasses.asdict(self)
        data['faults'] = data['faults']['events']
        return _jsonable(data)

    @property
    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def replace(self, **changes: Any) -> 'ExperimentConfig':
        return ExperimentConfig.from_dict(_deep_merge(self.to_dict(), changes))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> 'ExperimentConfig':
        data = copy.deepcopy(data)
        name = data.get('name', 'experiment')
        preset = data.pop('preset', None)
        if preset is not None:
            if preset not in PRESETS:
                raise HealsimConfigError(f"entry '{name}': field 'preset': unknown preset {preset!r}")
            data = _deep_merge(PRESETS[preset], data)
        try:
            return cls(
                **{key: value for key, value in data.items()
                   if key not in ('topology', 'model', 'hyper', 'dataset', 'faults')},
                topology=TopologyConfig(**data.get('topology', {})),
                model=ModelConfig(**data.get('model', {})),
                hyper=Hyperparams(**data.get('hyper', {})),
                dataset=DatasetConfig(**data.get('dataset', {})),
                faults=FaultSchedule([FaultEvent(**event) for event in data.get('faults', []) or []]),
            )
        except HealsimConfigError as exc:
            raise HealsimConfigError(f"entry '{name}': {exc}") from None
        except TypeError as exc:
            raise HealsimConfigError(f"entry '{name}': {exc}") from None


def _enum(enum_type: type[enum.Enum], value: Any, field: str) -> Any:
    try:
        return enum_type(value)
    except ValueError:
        choices = ', '.join(member.value for member in enum_type)
        raise HealsimConfigError(f"field '{field}': {value!r} is not one of {choices}") from None


def _jsonable(value: Any) -> Any:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return {key: _jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    return value


def _deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_experiment_file(path: str | pathlib.Path) -> list[ExperimentConfig]:
    """Read a YAML experiment file and validate every entry before returning.

    The file holds an optional ``defaults`` mapping and an ``experiments``
    mapping of name to entry; each entry is deep-merged over the defaults.
    """
    path = pathlib.Path(path)
    try:
        with open(path, encoding='utf-8') as file:
            document = yaml.safe_load(file) or {}
    except OSError as exc:
        raise HealsimConfigError(f'{path}: {exc.strerror}') from None
    except yaml.YAMLError as exc:
        raise HealsimConfigError(f'{path}: invalid YAML: {exc}') from None
    if not isinstance(document, dict):
        raise HealsimConfigError(f'{path}: top level must be a mapping')
    if 'experiments' not in document and isinstance(document.get('config'), dict):
        # a run manifest: rerun its embedded config
        return [ExperimentConfig.from_dict(document['config']).validate()]
    defaults = document.get('defaults') or {}
    entries = document.get('experiments')
    if not isinstance(entries, dict) or not entries:
        raise HealsimConfigError(f"{path}: needs a non-empty 'experiments' mapping")
    configs = []
    for name, entry in entries.items():
        merged = _deep_merge(defaults, entry or {})
        merged['name'] = str(name)
        configs.append(ExperimentConfig.from_dict(merged).validate())
    return configs
