"""Cycle-driven orchestration of one experiment.

A repetition builds its world from a single seed, then runs ``cycles``
learning cycles of: overlay maintenance, fault and churn events, one protocol
cycle, metric sampling.
"""
import csv
import dataclasses
import functools
import json
import math
import multiprocessing
import pathlib
import platform
import time
from typing import Any, Container, Iterable, Optional, Sequence

import networkx as nx
import numpy as np
import yaml

from .config import ExperimentConfig, FaultEvent, FaultKind, ProtocolName, TopologyKind
from .datasets import (Dataset, ReservePool, generate_synthetic, load_csv, normalize, partition_iid,
                       split_train_test)
from .datatypes import JsonDict, NodeId
from .exceptions import HealsimPreconditionError
from .logging import getLogger
from .models import Hyperparams, ModelSpec, evaluate, init_params
from .overlay import (ElevatorOverlay, Overlay, StaticOverlay, gen_chord, gen_complete, gen_kregular,
                      gen_multistar, gen_ring, gen_star, graph_diameter)
from .protocols import (EpidemicProtocol, FedAvgProtocol, GaiaProtocol, GossipProtocol, HealProtocol,
                        LearningProtocol, Message, NodeState)

logger = getLogger(__name__)

METRICS_COLUMNS = ('cycle', 'repetition', 'accuracy', 'live_nodes', 'hub_count', 'msgs_sent',
                   'msgs_dropped', 'diameter')
SUMMARY_THRESHOLDS = (0.85, 0.90, 0.95)

# named streams derived from a repetition seed
_SPLIT, _RESERVE, _PARTITION, _INIT, _TOPOLOGY, _OVERLAY, _FAULTS, _NODE, _TRAIN, _JOIN = range(10)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def repetition_seeds(master_seed: int, repetitions: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(repetitions)
    return [int(child.generate_state(1)[0]) for child in children]


def deliver_messages(outbox: Sequence[Message], live: Container[NodeId]) -> tuple[dict[NodeId, list[Message]], int]:
    """Route ``outbox`` to per-recipient inboxes.

    Messages to dead recipients are dropped and counted. Each inbox is ordered
    by sender id, then emission order.
    """
    inboxes: dict[NodeId, list[Message]] = {}
    dropped = 0
    order = sorted(range(len(outbox)), key=lambda index: (outbox[index].sender, index))
    for index in order:
        message = outbox[index]
        if message.recipient not in live:
            dropped += 1
            continue
        inboxes.setdefault(message.recipient, []).append(message)
    return inboxes, dropped


class MessageBus:
    """Collects messages emitted on one tick and delivers them on the next."""

    def __init__(self, live: Container[NodeId]) -> None:
        self.live = live
        self.tick = 0
        self.sent = 0
        self.dropped = 0
        self._outbox: list[Message] = []

    def send(self, message: Message) -> None:
        self._outbox.append(message)
        self.sent += 1

    def send_all(self, messages: Iterable[Message]) -> None:
        for message in messages:
            self.send(message)

    def deliver(self) -> dict[NodeId, list[Message]]:
        outbox, self._outbox = self._outbox, []
        self.tick += 1
        inboxes, dropped = deliver_messages(outbox, self.live)
        self.dropped += dropped
        return inboxes

    def reset_counters(self) -> None:
        self.sent = 0
        self.dropped = 0


@dataclasses.dataclass(frozen=True)
class MetricsRecord:
    cycle: int
    accuracy: float
    live_nodes: float
    hub_count: float
    msgs_sent: float
    msgs_dropped: float
    diameter: Optional[float] = None


@dataclasses.dataclass
class MetricsSeries:
    repetition: int
    seed: int
    config_hash: str
    records: list[MetricsRecord] = dataclasses.field(default_factory=list)

    @property
    def accuracy(self) -> list[float]:
        return [record.accuracy for record in self.records]


@dataclasses.dataclass
class RunResult:
    config: ExperimentConfig
    series: list[MetricsSeries]
    mean: list[MetricsRecord]
    seeds: list[int]
    wall_time: float = 0.0

    @property
    def final_accuracy(self) -> float:
        return self.mean[-1].accuracy


@dataclasses.dataclass(eq=False)
class World:
    config: ExperimentConfig
    seed: int
    spec: ModelSpec
    hyper: Hyperparams
    nodes: dict[NodeId, NodeState]
    overlay: Overlay
    protocol: LearningProtocol
    bus: MessageBus
    test: Dataset
    rng: np.random.Generator
    reserve: Optional[ReservePool] = None
    shard_size: int = 1
    next_id: int = 0
    crashed: set[NodeId] = dataclasses.field(default_factory=set)
    cycle: int = 0

    def new_node(self, node_id: NodeId, model, shard) -> NodeState:
        return NodeState(node_id=node_id, model=model, shard=shard,
                         rng=np.random.default_rng([self.seed, _NODE, node_id]),
                         train_rng=np.random.default_rng([self.seed, _TRAIN, node_id]))

    def crash(self, victims: Iterable[NodeId]) -> list[NodeId]:
        victims = sorted(node for node in set(victims) if node in self.nodes)
        for node in victims:
            del self.nodes[node]
            self.crashed.add(node)
        self.overlay.crash(victims)
        return victims


@functools.lru_cache(maxsize=8)
def _load_dataset(source: str, path: Optional[str], label_column: int, header: bool, n_samples: int,
                  n_features: int, n_classes: int, separation: float, seed: int) -> Dataset:
    if source == 'csv':
        return load_csv(path, label_column=label_column, header=header)
    return generate_synthetic(n_samples, n_features, n_classes, separation, seed)


def load_task_data(config: ExperimentConfig) -> Dataset:
    dataset = config.dataset
    return _load_dataset(dataset.source, dataset.path, dataset.label_column, dataset.header,
                         dataset.n_samples, dataset.n_features, dataset.n_classes, dataset.separation,
                         dataset.seed)


def build_overlay(config: ExperimentConfig, seed: int) -> Overlay:
    topology = config.topology
    n = config.n_nodes
    kind = topology.kind
    if kind is TopologyKind.ELEVATOR:
        bootstrap = gen_kregular(n, topology.degree, derive_seed(seed, _TOPOLOGY))
        overlay = ElevatorOverlay.bootstrap(bootstrap, config.h, topology.cache_size,
                                            derive_seed(seed, _OVERLAY), config.hub_threshold)
        for _ in range(config.overlay_warmup):
            overlay.step()
        return overlay
    if kind is TopologyKind.STAR:
        graph = gen_star(n)
    elif kind is TopologyKind.MULTISTAR:
        graph = gen_multistar(n, topology.servers)
    elif kind is TopologyKind.RING:
        graph = gen_ring(n)
    elif kind is TopologyKind.KREGULAR:
        graph = gen_kregular(n, topology.degree, derive_seed(seed, _TOPOLOGY))
    elif kind is TopologyKind.CHORD:
        graph = gen_chord(n)
    else:
        graph = gen_complete(n)
    return StaticOverlay(graph, config.hub_threshold)


def make_protocol(config: ExperimentConfig) -> LearningProtocol:
    if config.protocol is ProtocolName.HEAL:
        return HealProtocol(config.number_hub_send, config.weighted_hub_average)
    if config.protocol is ProtocolName.FEDAVG:
        return FedAvgProtocol()
    if config.protocol is ProtocolName.GAIA:
        return GaiaProtocol(config.topology.servers)
    if config.protocol is ProtocolName.GOSSIP:
        return GossipProtocol()
    return EpidemicProtocol()


def build_world(config: ExperimentConfig, seed: int) -> World:
    dataset = load_task_data(config)
    train, test = split_train_test(dataset, config.dataset.test_fraction, derive_seed(seed, _SPLIT))
    if config.dataset.normalize:
        train, normalizer = normalize(train)
        test = normalizer.apply(test)
    reserve = None
    if config.faults.has_churn:
        train, held_back = split_train_test(train, config.dataset.reserve_fraction, derive_seed(seed, _RESERVE))
        reserve = ReservePool(held_back, derive_seed(seed, _RESERVE, 1))
    spec = ModelSpec.for_data(train.n_features, train.num_classes, config.model.kind)
    initial = init_params(spec, derive_seed(seed, _INIT))
    shards = partition_iid(train, config.n_nodes, derive_seed(seed, _PARTITION))
    overlay = build_overlay(config, seed)
    nodes: dict[NodeId, NodeState] = {}
    world = World(config=config, seed=seed, spec=spec, hyper=config.hyper, nodes=nodes, overlay=overlay,
                  protocol=make_protocol(config), bus=MessageBus(nodes), test=test,
                  rng=np.random.default_rng([seed, _FAULTS]), reserve=reserve,
                  shard_size=max(1, train.n_samples // config.n_nodes), next_id=config.n_nodes)
    for shard in shards:
        nodes[shard.owner] = world.new_node(shard.owner, initial, shard)
    world.protocol.setup(nodes, overlay)
    return world


def apply_fault_event(event: FaultEvent, world: World) -> World:
    live = sorted(world.nodes)
    if event.kind is FaultKind.CRASH_FRACTION:
        count = math.ceil(event.fraction * len(live))
        victims = _sample(world.rng, live, count)
    elif event.kind is FaultKind.CRASH_NODES:
        victims = [node for node in event.nodes if node in world.nodes]
        if len(victims) < len(event.nodes):
            logger.warning('Cycle %d: %d of the listed nodes are not live', world.cycle,
                           len(event.nodes) - len(victims))
    elif event.kind is FaultKind.CRASH_ALL_HUBS:
        victims = list(world.overlay.hubs())
    elif event.kind is FaultKind.CRASH_HUBS:
        hubs = list(world.overlay.hubs())
        if event.count > len(hubs):
            logger.warning('Cycle %d: asked to crash %d hubs, only %d exist', world.cycle, event.count, len(hubs))
        victims = hubs[:event.count]
    else:
        return apply_churn(event, world)
    crashed = world.crash(victims)
    logger.info('Cycle %d: %s crashed %d nodes, %d live', world.cycle, event.kind.value, len(crashed),
                len(world.nodes))
    return world


def _sample(rng: np.random.Generator, population: Sequence[NodeId], count: int) -> list[NodeId]:
    if count >= len(population):
        if count > len(population):
            logger.warning('Asked for %d nodes, only %d live', count, len(population))
        return list(population)
    picked = rng.choice(len(population), size=count, replace=False)
    return sorted(population[i] for i in picked)


def _join_peers(world: World, node_id: NodeId, survivors: Sequence[NodeId], degree: int) -> list[NodeId]:
    """Star and multistar joiners attach to one live server, others to random survivors."""
    topology = world.config.topology
    if topology.kind is TopologyKind.STAR:
        servers = [0]
    elif topology.kind is TopologyKind.MULTISTAR:
        servers = list(range(topology.servers))
    else:
        return _sample(world.rng, survivors, min(degree, len(survivors)))
    live = [server for server in servers if server in world.nodes]
    return [live[node_id % len(live)]] if live else []


def apply_churn(event: FaultEvent, world: World) -> World:
    """Replace ``ceil(rate * live)`` random live nodes by fresh ones."""
    if world.reserve is None:
        raise HealsimPreconditionError('churn needs a data reserve; schedule the churn window in the config')
    live = sorted(world.nodes)
    count = math.ceil(event.rate * len(live))
    world.crash(_sample(world.rng, live, count))
    survivors = sorted(world.nodes)
    for _ in range(count):
        node_id = world.next_id
        world.next_id += 1
        peers = _join_peers(world, node_id, survivors, event.new_node_degree)
        model = init_params(world.spec, derive_seed(world.seed, _JOIN, node_id))
        world.nodes[node_id] = world.new_node(node_id, model, world.reserve.take(node_id, world.shard_size))
        world.overlay.join(node_id, peers)
    logger.debug('Cycle %d: churn replaced %d nodes', world.cycle, count)
    return world


def sample_metrics(world: World, with_diameter: bool = False) -> MetricsRecord:
    """Mean test accuracy over live nodes plus topology counters."""
    accuracies = []
    by_model: dict[int, float] = {}
    for node_id in sorted(world.nodes):
        model = world.nodes[node_id].model
        if id(model) not in by_model:
            by_model[id(model)] = evaluate(model, world.test)
        accuracies.append(by_model[id(model)])
    diameter = graph_diameter(world.overlay.graph) if with_diameter else None
    return MetricsRecord(
        cycle=world.cycle,
        accuracy=float(np.mean(accuracies)) if accuracies else 0.0,
        live_nodes=len(world.nodes),
        hub_count=len(world.overlay.hubs()),
        msgs_sent=world.bus.sent,
        msgs_dropped=world.bus.dropped,
        diameter=diameter,
    )


def run_cycle(world: World) -> MetricsRecord:
    config = world.config
    world.bus.reset_counters()
    if world.overlay.dynamic:
        for _ in range(config.overlay_steps_per_cycle):
            world.overlay.step()
    for event in config.faults.at(world.cycle):
        apply_fault_event(event, world)
    for event in config.faults.churn_at(world.cycle):
        apply_churn(event, world)
    world.protocol.run_cycle(world.nodes, world.overlay, world.bus, world.hyper)
    every = config.diameter_every
    record = sample_metrics(world, with_diameter=every > 0 and world.cycle % every == 0)
    logger.debug('Cycle %d: accuracy %.4f, %d live, %d hubs', record.cycle, record.accuracy,
                 record.live_nodes, record.hub_count)
    world.cycle += 1
    return record


def run_repetition(config: ExperimentConfig, repetition: int, seed: int) -> MetricsSeries:
    logger.info("Experiment '%s': repetition %d (seed %d)", config.name, repetition, seed)
    world = build_world(config, seed)
    series = MetricsSeries(repetition=repetition, seed=seed, config_hash=config.config_hash)
    for _ in range(config.cycles):
        series.records.append(run_cycle(world))
    return series


def _repetition_worker(args: tuple[JsonDict, int, int]) -> MetricsSeries:
    config_dict, repetition, seed = args
    return run_repetition(ExperimentConfig.from_dict(config_dict), repetition, seed)


def mean_series(series: Sequence[MetricsSeries]) -> list[MetricsRecord]:
    mean = []
    for records in zip(*(item.records for item in series)):
        diameters = [record.diameter for record in records if record.diameter is not None]
        mean.append(MetricsRecord(
            cycle=records[0].cycle,
            accuracy=float(np.mean([record.accuracy for record in records])),
            live_nodes=float(np.mean([record.live_nodes for record in records])),
            hub_count=float(np.mean([record.hub_count for record in records])),
            msgs_sent=float(np.mean([record.msgs_sent for record in records])),
            msgs_dropped=float(np.mean([record.msgs_dropped for record in records])),
            diameter=float(np.mean(diameters)) if diameters else None,
        ))
    return mean


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> RunResult:
    """Run every repetition of ``config``; ``jobs > 1`` spreads them over a
    process pool with identical results."""
    config.validate()
    started = time.perf_counter()
    seeds = repetition_seeds(config.master_seed, config.repetitions)
    args = [(config.to_dict(), repetition, seed) for repetition, seed in enumerate(seeds)]
    logger.info("Experiment '%s': %s on %s, %d nodes, %d cycles, %d repetitions", config.name,
                config.protocol.value, config.topology.kind.value, config.n_nodes, config.cycles,
                config.repetitions)
    if jobs > 1 and len(args) > 1:
        with multiprocessing.Pool(min(jobs, len(args))) as pool:
            series = pool.map(_repetition_worker, args)
    else:
        series = [_repetition_worker(arg) for arg in args]
    result = RunResult(config=config, series=series, mean=mean_series(series), seeds=seeds,
                       wall_time=time.perf_counter() - started)
    logger.info("Experiment '%s' done in %.1fs, final accuracy %.4f", config.name, result.wall_time,
                result.final_accuracy)
    return result


def cycles_to_accuracy(accuracies: Sequence[float], threshold: float) -> Optional[int]:
    for cycle, accuracy in enumerate(accuracies):
        if accuracy >= threshold:
            return cycle
    return None


def _format(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _record_row(record: MetricsRecord, repetition: Any) -> list[str]:
    return [_format(value) for value in (record.cycle, repetition, record.accuracy, record.live_nodes,
                                         record.hub_count, record.msgs_sent, record.msgs_dropped,
                                         record.diameter)]


def write_metrics_csv(result: RunResult, path: str | pathlib.Path) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        for series in result.series:
            for record in series.records:
                writer.writerow(_record_row(record, series.repetition))


def write_mean_csv(result: RunResult, path: str | pathlib.Path) -> None:
    with open(path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(METRICS_COLUMNS)
        for record in result.mean:
            writer.writerow(_record_row(record, 'mean'))


def summarize(result: RunResult) -> JsonDict:
    mean_accuracy = [record.accuracy for record in result.mean]
    return {
        'final_accuracy': result.final_accuracy,
        'final_accuracy_per_repetition': [series.records[-1].accuracy for series in result.series],
        'cycles_to_accuracy': {f'{threshold:.2f}': cycles_to_accuracy(mean_accuracy, threshold)
                               for threshold in SUMMARY_THRESHOLDS},
    }


def build_manifest(result: RunResult) -> JsonDict:
    from . import __version__
    return {
        'name': result.config.name,
        'config': result.config.to_dict(),
        'config_hash': result.config.config_hash,
        'master_seed': result.config.master_seed,
        'repetition_seeds': result.seeds,
        'wall_time_seconds': round(result.wall_time, 3),
        'versions': {
            'healsim': __version__,
            'python': platform.python_version(),
            'numpy': np.__version__,
            'networkx': nx.__version__,
            'PyYAML': yaml.__version__,
        },
        'summary': summarize(result),
    }


def write_manifest(result: RunResult, path: str | pathlib.Path) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as file:
        json.dump(build_manifest(result), file, indent=2)
        file.write('\n')
