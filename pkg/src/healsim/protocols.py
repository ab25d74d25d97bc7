"""Learning protocols as cycle-driven state machines.

Each protocol advances every live node once per learning cycle. Within a
cycle, nodes talk only through the :class:`~healsim.engine.MessageBus`; a
message emitted on one tick is read on the next.
"""
import abc
import dataclasses
import enum
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

import numpy as np

from .datasets import DataShard
from .datatypes import NodeId
from .logging import getLogger
from .models import Hyperparams, ModelParams, average_models, train_step
from .overlay import DEFAULT_HUB_THRESHOLD, DirectedGraph, Overlay, detect_hubs

if TYPE_CHECKING:
    from .engine import MessageBus

logger = getLogger(__name__)


class Role(str, enum.Enum):
    HUB = 'hub'
    CLIENT = 'client'


class MessageKind(str, enum.Enum):
    CLIENT_MODEL = 'ClientModel'
    HUB_AGGREGATE = 'HubAggregate'
    GLOBAL_MODEL = 'GlobalModel'
    GOSSIP_PUSH = 'GossipPush'


@dataclasses.dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: NodeId
    recipient: NodeId
    payload: ModelParams
    cycle_sent: int
    # number of client models folded into a hub aggregate
    weight: int = 1


@dataclasses.dataclass(eq=False)
class NodeState:
    """Learning state of one peer; its overlay state lives in the overlay."""
    node_id: NodeId
    model: ModelParams
    shard: DataShard
    rng: np.random.Generator
    train_rng: np.random.Generator
    role: Role = Role.CLIENT

    def train(self, hyper: Hyperparams) -> ModelParams:
        self.model = train_step(self.model, self.shard, hyper, self.train_rng)
        return self.model

    def __repr__(self) -> str:
        return f'<NodeState {self.node_id} {self.role.value}>'


class HubPhase(enum.Enum):
    COLLECT = 'collect'
    INTER_HUB = 'inter-hub'
    DISTRIBUTE = 'distribute'


@dataclasses.dataclass
class HubRoundState:
    hub_id: NodeId
    collected_models: list[ModelParams] = dataclasses.field(default_factory=list)
    backwards_list: list[NodeId] = dataclasses.field(default_factory=list)
    # (sender, aggregate, weight) received from other hubs
    hub_aggregates: list[tuple[NodeId, ModelParams, int]] = dataclasses.field(default_factory=list)
    phase: HubPhase = HubPhase.COLLECT
    average_model: Optional[ModelParams] = None
    global_model: Optional[ModelParams] = None


@dataclasses.dataclass
class ClientRoundState:
    chosen_hubs: list[NodeId] = dataclasses.field(default_factory=list)
    received_globals: list[ModelParams] = dataclasses.field(default_factory=list)


def role_assignment(node: NodeId, graph: DirectedGraph,
                    min_indegree_fraction: float = DEFAULT_HUB_THRESHOLD) -> Role:
    return Role.HUB if node in detect_hubs(graph, min_indegree_fraction) else Role.CLIENT


def heal_client_cycle(node: NodeState, hubs_list: Sequence[NodeId], s: int, hyper: Hyperparams,
                      tick: int) -> tuple[ClientRoundState, list[Message]]:
    """Train locally, then push the model to ``s`` distinct hubs chosen at random."""
    node.train(hyper)
    candidates = [hub for hub in dict.fromkeys(hubs_list) if hub != node.node_id]
    if not candidates:
        return ClientRoundState(), []
    picked = node.rng.choice(len(candidates), size=min(s, len(candidates)), replace=False)
    chosen = [candidates[i] for i in picked]
    messages = [Message(MessageKind.CLIENT_MODEL, node.node_id, hub, node.model, tick) for hub in chosen]
    return ClientRoundState(chosen_hubs=chosen), messages


def heal_client_absorb(node: NodeState, state: ClientRoundState, inbox: Iterable[Message]) -> bool:
    """Replace the local model by the mean of the returned global models.

    With nothing returned the node keeps its local model.
    """
    chosen = set(state.chosen_hubs)
    state.received_globals = [message.payload for message in inbox
                              if message.kind is MessageKind.GLOBAL_MODEL and message.sender in chosen]
    if not state.received_globals:
        return False
    node.model = average_models(state.received_globals)
    return True


def heal_hub_cycle(state: HubRoundState, incoming: Iterable[Message], hubs_list: Sequence[NodeId],
                   tick: int, weighted: bool = False) -> list[Message]:
    """Advance a hub by one phase and return the messages it emits.

    Collect: average the client models of this cycle and send the aggregate
    to the other hubs. InterHub: average the own aggregate with whatever
    aggregates arrived and return the global model to the round's clients.
    """
    if state.phase is HubPhase.COLLECT:
        for message in incoming:
            if message.kind is MessageKind.CLIENT_MODEL:
                state.collected_models.append(message.payload)
                state.backwards_list.append(message.sender)
        state.phase = HubPhase.INTER_HUB
        if not state.collected_models:
            return []
        state.average_model = average_models(state.collected_models)
        peers = [hub for hub in dict.fromkeys(hubs_list) if hub != state.hub_id]
        return [Message(MessageKind.HUB_AGGREGATE, state.hub_id, peer, state.average_model, tick,
                        weight=len(state.collected_models)) for peer in peers]

    if state.phase is HubPhase.INTER_HUB:
        for message in incoming:
            if message.kind is MessageKind.HUB_AGGREGATE:
                state.hub_aggregates.append((message.sender, message.payload, message.weight))
        state.phase = HubPhase.DISTRIBUTE
        entries = list(state.hub_aggregates)
        if state.average_model is not None:
            entries.append((state.hub_id, state.average_model, len(state.collected_models)))
        if not entries:
            return []
        entries.sort(key=lambda entry: entry[0])
        weights = [entry[2] for entry in entries] if weighted else None
        state.global_model = average_models([entry[1] for entry in entries], weights)
        return [Message(MessageKind.GLOBAL_MODEL, state.hub_id, client, state.global_model, tick)
                for client in state.backwards_list]

    return []


def fedavg_round(server: NodeState, clients: Sequence[NodeState], bus: 'MessageBus',
                 hyper: Hyperparams) -> Optional[ModelParams]:
    """One Federated Averaging round; returns the global model, or None when no
    client model reached the server."""
    for client in clients:
        client.train(hyper)
        bus.send(Message(MessageKind.CLIENT_MODEL, client.node_id, server.node_id, client.model, bus.tick))
    inbox = bus.deliver().get(server.node_id, [])
    received = [message for message in inbox if message.kind is MessageKind.CLIENT_MODEL]
    if not received:
        return None
    global_model = average_models([message.payload for message in received])
    server.model = global_model
    for message in received:
        bus.send(Message(MessageKind.GLOBAL_MODEL, server.node_id, message.sender, global_model, bus.tick))
    inboxes = bus.deliver()
    for client in clients:
        for message in inboxes.get(client.node_id, []):
            if message.kind is MessageKind.GLOBAL_MODEL and message.sender == server.node_id:
                client.model = message.payload
    return global_model


def _run_hub_rounds(hubs: Sequence[NodeState], hub_views: Mapping[NodeId, Sequence[NodeId]],
                    bus: 'MessageBus', inboxes: Mapping[NodeId, list[Message]],
                    weighted: bool) -> dict[NodeId, HubRoundState]:
    """Drive the collect and inter-hub phases of every hub, then adopt the
    global model at each hub. Returns after the global models are sent."""
    states = {hub.node_id: HubRoundState(hub.node_id) for hub in hubs}
    for hub in hubs:
        bus.send_all(heal_hub_cycle(states[hub.node_id], inboxes.get(hub.node_id, []),
                                    hub_views[hub.node_id], bus.tick, weighted))
    inboxes = bus.deliver()
    for hub in hubs:
        state = states[hub.node_id]
        bus.send_all(heal_hub_cycle(state, inboxes.get(hub.node_id, []), hub_views[hub.node_id],
                                    bus.tick, weighted))
        if state.global_model is not None:
            hub.model = state.global_model
    return states


def gaia_round(servers: Sequence[NodeState], workers: Mapping[NodeId, Sequence[NodeState]],
               bus: 'MessageBus', hyper: Hyperparams,
               orphans: Sequence[NodeState] = ()) -> dict[NodeId, ModelParams]:
    """Two-level averaging over statically assigned servers.

    Workers push to their server, servers exchange aggregates all-to-all and
    return the global model. Orphaned workers only train.
    """
    server_ids = [server.node_id for server in servers]
    rounds: dict[NodeId, ClientRoundState] = {}
    for server_id, attached in workers.items():
        for worker in attached:
            worker.train(hyper)
            bus.send(Message(MessageKind.CLIENT_MODEL, worker.node_id, server_id, worker.model, bus.tick))
            rounds[worker.node_id] = ClientRoundState(chosen_hubs=[server_id])
    for worker in orphans:
        worker.train(hyper)
    inboxes = bus.deliver()
    views = {server_id: server_ids for server_id in server_ids}
    states = _run_hub_rounds(servers, views, bus, inboxes, weighted=False)
    inboxes = bus.deliver()
    for attached in workers.values():
        for worker in attached:
            heal_client_absorb(worker, rounds[worker.node_id], inboxes.get(worker.node_id, []))
    return {server_id: state.global_model for server_id, state in states.items()
            if state.global_model is not None}


def _live_neighbors(node: NodeId, graph: DirectedGraph) -> list[NodeId]:
    return sorted(graph.successors(node)) if node in graph else []


def gossip_step(node: NodeState, graph: DirectedGraph, hyper: Hyperparams, tick: int) -> Optional[Message]:
    """Train, then push the model to one live neighbor chosen uniformly."""
    node.train(hyper)
    neighbors = _live_neighbors(node.node_id, graph)
    if not neighbors:
        return None
    target = neighbors[int(node.rng.integers(len(neighbors)))]
    return Message(MessageKind.GOSSIP_PUSH, node.node_id, target, node.model, tick)


def gossip_merge(node: NodeState, inbox: Iterable[Message]) -> None:
    for message in inbox:
        if message.kind is MessageKind.GOSSIP_PUSH:
            node.model = average_models([node.model, message.payload])


def epidemic_step(node: NodeState, graph: DirectedGraph, hyper: Hyperparams, tick: int) -> list[Message]:
    """Train, then push the model to every live neighbor."""
    node.train(hyper)
    return [Message(MessageKind.GOSSIP_PUSH, node.node_id, neighbor, node.model, tick)
            for neighbor in _live_neighbors(node.node_id, graph)]


def epidemic_merge(node: NodeState, inbox: Iterable[Message]) -> None:
    received = [message.payload for message in inbox if message.kind is MessageKind.GOSSIP_PUSH]
    if received:
        node.model = average_models([node.model, *received])


class LearningProtocol(abc.ABC):
    name: str = ''

    def setup(self, nodes: Mapping[NodeId, NodeState], overlay: Overlay) -> None:
        pass

    @abc.abstractmethod
    def run_cycle(self, nodes: Mapping[NodeId, NodeState], overlay: Overlay, bus: 'MessageBus',
                  hyper: Hyperparams) -> None:
        ...

    def __repr__(self) -> str:
        return f'<{self.__class__.__name__}>'


class HealProtocol(LearningProtocol):
    name = 'heal'

    def __init__(self, s: int, weighted: bool = False) -> None:
        self.s = s
        self.weighted = weighted

    def run_cycle(self, nodes, overlay, bus, hyper) -> None:
        hubs = [hub for hub in overlay.hubs() if hub in nodes]
        hub_set = set(hubs)
        for node_id, node in nodes.items():
            node.role = Role.HUB if node_id in hub_set else Role.CLIENT

        rounds: dict[NodeId, ClientRoundState] = {}
        for node_id in sorted(nodes):
            node = nodes[node_id]
            if node.role is Role.HUB:
                continue
            rounds[node_id], messages = heal_client_cycle(node, overlay.hubs_list(node_id), self.s, hyper,
                                                          bus.tick)
            bus.send_all(messages)
        inboxes = bus.deliver()

        hub_nodes = [nodes[hub] for hub in hubs]
        _run_hub_rounds(hub_nodes, {hub: overlay.hubs_list(hub) for hub in hubs}, bus, inboxes, self.weighted)
        inboxes = bus.deliver()

        for node_id, state in rounds.items():
            heal_client_absorb(nodes[node_id], state, inboxes.get(node_id, []))


class FedAvgProtocol(LearningProtocol):
    name = 'fedavg'

    def __init__(self) -> None:
        self.server: Optional[NodeId] = None
        self._halt_logged = False

    def setup(self, nodes, overlay) -> None:
        hubs = overlay.hubs()
        self.server = hubs[0] if hubs else min(nodes)
        logger.debug('FedAvg server is node %s', self.server)

    def run_cycle(self, nodes, overlay, bus, hyper) -> None:
        if self.server not in nodes:
            if not self._halt_logged:
                logger.info('FedAvg server %s is down, protocol halted', self.server)
                self._halt_logged = True
            return
        clients = [nodes[peer] for peer in overlay.neighbors(self.server) if peer in nodes]
        fedavg_round(nodes[self.server], clients, bus, hyper)


class GaiaProtocol(LearningProtocol):
    name = 'gaia'

    def __init__(self, servers: int) -> None:
        self.n_servers = servers
        self.servers: list[NodeId] = []
        self.assignment: dict[NodeId, NodeId] = {}

    def setup(self, nodes, overlay) -> None:
        self.servers = sorted(nodes)[:self.n_servers]
        server_set = set(self.servers)
        for node_id in sorted(nodes):
            if node_id in server_set:
                continue
            attached = [peer for peer in overlay.neighbors(node_id) if peer in server_set]
            if attached:
                self.assignment[node_id] = attached[0]

    def run_cycle(self, nodes, overlay, bus, hyper) -> None:
        live_servers = [nodes[server] for server in self.servers if server in nodes]
        workers: dict[NodeId, list[NodeState]] = {server.node_id: [] for server in live_servers}
        orphans = []
        for node_id in sorted(nodes):
            if node_id in self.servers:
                continue
            server = self.assignment.get(node_id)
            if server is None:
                # joiners attach to the first server among their neighbors
                attached = [peer for peer in overlay.neighbors(node_id) if peer in self.servers]
                server = self.assignment[node_id] = attached[0] if attached else -1
            if server in workers:
                workers[server].append(nodes[node_id])
            else:
                orphans.append(nodes[node_id])
        gaia_round(live_servers, workers, bus, hyper, orphans)


class GossipProtocol(LearningProtocol):
    name = 'gossip'

    def run_cycle(self, nodes, overlay, bus, hyper) -> None:
        for node_id in sorted(nodes):
            message = gossip_step(nodes[node_id], overlay.graph, hyper, bus.tick)
            if message is not None:
                bus.send(message)
        inboxes = bus.deliver()
        for node_id in sorted(nodes):
            gossip_merge(nodes[node_id], inboxes.get(node_id, []))


class EpidemicProtocol(LearningProtocol):
    name = 'epidemic'

    def run_cycle(self, nodes, overlay, bus, hyper) -> None:
        for node_id in sorted(nodes):
            bus.send_all(epidemic_step(nodes[node_id], overlay.graph, hyper, bus.tick))
        inboxes = bus.deliver()
        for node_id in sorted(nodes):
            epidemic_merge(nodes[node_id], inboxes.get(node_id, []))
