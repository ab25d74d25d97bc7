"""Overlay topologies.

The Elevator peer-sampling protocol grows ``h`` hubs out of an arbitrary
peer-to-peer graph; the static generators build the baselines' topologies.
Graphs are ``networkx.DiGraph`` objects whose edge ``u -> v`` means that ``v``
is in ``u``'s cache. Only live nodes are graph vertices.
"""
import collections
import dataclasses
import json
import pathlib
from typing import Iterable, Mapping, Optional, Sequence

import networkx as nx
import numpy as np

from .datatypes import NodeId
from .exceptions import HealsimConfigError
from .logging import getLogger

logger = getLogger(__name__)

DirectedGraph = nx.DiGraph
# (node, count) pairs sorted by count desc, then id asc
FrequencyMap = list[tuple[NodeId, int]]

DEFAULT_CACHE_SIZE = 20
DEFAULT_HUB_THRESHOLD = 0.9
KREGULAR_RETRIES = 100


@dataclasses.dataclass
class OverlayState:
    node_id: NodeId
    h: int
    c: int
    cache: list[NodeId] = dataclasses.field(default_factory=list)
    backward_list: set[NodeId] = dataclasses.field(default_factory=set)
    # top-h responsive entries of the latest frequency map
    hubs_list: list[NodeId] = dataclasses.field(default_factory=list)

    def __post_init__(self) -> None:
        if self.h > self.c:
            raise HealsimConfigError(f'h ({self.h}) must not exceed c ({self.c})')


@dataclasses.dataclass
class ExchangeResult:
    # preferred peer -> copy of its backward list; crashed peers are absent
    replies: dict[NodeId, list[NodeId]]
    contacted: list[NodeId]


def _as_caches(source: DirectedGraph | Mapping[NodeId, Sequence[NodeId]]) -> Mapping[NodeId, Sequence[NodeId]]:
    if isinstance(source, nx.DiGraph):
        return {u: sorted(source.successors(u)) for u in source.nodes}
    return source


def collect_two_hop(node: NodeId,
                    graph: DirectedGraph | Mapping[NodeId, Sequence[NodeId]]) -> list[list[NodeId]]:
    """Caches of every live out-neighbor of ``node``.

    ``graph`` is either a graph or a mapping of live node to cache. Ids missing
    from it have crashed: such a neighbor contributes nothing and such an entry
    is dropped from the lists.
    """
    caches = _as_caches(graph)
    return [[peer for peer in caches[v] if peer in caches]
            for v in caches.get(node, ()) if v in caches and v != node]


def build_frequency_map(neighbor_lists: Iterable[Iterable[NodeId]], self_id: NodeId) -> FrequencyMap:
    counts = collections.Counter(peer for peers in neighbor_lists for peer in peers if peer != self_id)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def select_preferred(freq: FrequencyMap, c: int) -> list[NodeId]:
    return [peer for peer, _ in freq[:max(c, 0)]]


def exchange_with_preferred(node: NodeId, preferred: Sequence[NodeId],
                            backward_lists: Mapping[NodeId, Iterable[NodeId]]) -> ExchangeResult:
    """Ask each preferred peer for its backward list.

    Replies come from ``backward_lists`` (live nodes only). The insertion of ``node`` into the peers' backward lists is applied by
    :func:`commit_exchange`.
    """
    replies = {peer: sorted(backward_lists[peer]) for peer in preferred
               if peer in backward_lists and peer != node}
    return ExchangeResult(replies=replies, contacted=list(replies))


def commit_exchange(node: NodeId, result: ExchangeResult, states: Mapping[NodeId, OverlayState]) -> None:
    for peer in result.contacted:
        if peer in states:
            states[peer].backward_list.add(node)


def refill_cache(freq: FrequencyMap, backward_union: Iterable[NodeId], h: int, c: int,
                 rng: np.random.Generator, self_id: Optional[NodeId] = None,
                 responsive: Optional[set[NodeId]] = None,
                 live: Optional[Iterable[NodeId]] = None) -> list[NodeId]:
    """Top-``h`` of ``freq`` followed by ``c - h`` peers drawn without
    replacement from the backward lists.

    ``backward_union`` is a multiset: a peer listed by several preferred peers
    is drawn proportionally more often. ``responsive`` restricts the top-h
    slots to peers that answered this cycle; ``live`` drops crashed ids from
    the random pool.
    """
    if h > c:
        raise HealsimConfigError(f'h ({h}) must not exceed c ({c})')
    top = [peer for peer, _ in freq
           if peer != self_id and (responsive is None or peer in responsive)][:h]
    excluded = set(top)
    if self_id is not None:
        excluded.add(self_id)
    live = None if live is None else set(live)
    counts = collections.Counter(peer for peer in backward_union
                                 if peer not in excluded and (live is None or peer in live))
    pool = sorted(counts)
    slots = min(c - h, len(pool))
    if slots <= 0:
        return top
    weights = np.array([counts[peer] for peer in pool], dtype=float)
    picked = rng.choice(len(pool), size=slots, replace=False, p=weights / weights.sum())
    return top + [pool[i] for i in picked]


def node_rng(seed: int, cycle: int, node: NodeId) -> np.random.Generator:
    """Per-node stream for one Elevator cycle, independent of processing order."""
    return np.random.default_rng([seed, cycle, node])


@dataclasses.dataclass
class _NodePlan:
    node: NodeId
    cache: list[NodeId]
    hubs_list: list[NodeId]
    exchange: ExchangeResult


def _plan_node(node: NodeId, caches: Mapping[NodeId, Sequence[NodeId]],
               backward: Mapping[NodeId, Iterable[NodeId]], h: int, c: int,
               rng: np.random.Generator) -> _NodePlan:
    freq = build_frequency_map(collect_two_hop(node, caches), node)
    preferred = select_preferred(freq, c)
    exchange = exchange_with_preferred(node, preferred, backward)
    responsive = set(exchange.replies)
    union = [peer for replies in exchange.replies.values() for peer in replies]
    cache = refill_cache(freq, union, h, c, rng, self_id=node, responsive=responsive, live=caches.keys())
    hubs_list = [peer for peer, _ in freq if peer in responsive][:h]
    return _NodePlan(node, cache, hubs_list, exchange)


def build_graph(states: Mapping[NodeId, OverlayState]) -> DirectedGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(sorted(states))
    graph.add_edges_from((u, v) for u in sorted(states) for v in states[u].cache if v in states and v != u)
    return graph


def elevator_cycle(states: dict[NodeId, OverlayState], seed: int, cycle: int) -> DirectedGraph:
    """Run one Elevator cycle over all live nodes and return the new graph.

    Nodes act one at a time in ascending id order and each one's update is
    applied before the next acts, so a node sees the caches and backward
    lists already rewritten by lower ids in the same cycle.
    """
    caches = {u: state.cache for u, state in states.items()}
    # the sets themselves, so commits show up in later replies
    backward = {u: state.backward_list for u, state in states.items()}
    for u in sorted(states):
        state = states[u]
        plan = _plan_node(u, caches, backward, state.h, state.c, node_rng(seed, cycle, u))
        state.cache = caches[u] = plan.cache
        state.hubs_list = plan.hubs_list
        commit_exchange(u, plan.exchange, states)
    return build_graph(states)


def detect_hubs(graph: DirectedGraph, min_indegree_fraction: float = DEFAULT_HUB_THRESHOLD) -> list[NodeId]:
    """Nodes whose in-degree reaches ``fraction * (n - 1)``, by in-degree desc then id."""
    n = graph.number_of_nodes()
    if n < 2:
        return []
    threshold = min_indegree_fraction * (n - 1)
    hubs = [(node, degree) for node, degree in graph.in_degree() if degree >= threshold]
    return [node for node, _ in sorted(hubs, key=lambda item: (-item[1], item[0]))]


def to_undirected(graph: DirectedGraph) -> DirectedGraph:
    return nx.DiGraph(graph.to_undirected(as_view=False))


def graph_diameter(graph: DirectedGraph) -> Optional[int]:
    """Diameter of the undirected closure; ``None`` when it is disconnected."""
    undirected = graph.to_undirected(as_view=True)
    if undirected.number_of_nodes() <= 1:
        return 0
    if not nx.is_connected(undirected):
        return None
    return nx.diameter(undirected)


def _symmetric(graph: nx.Graph) -> DirectedGraph:
    return nx.DiGraph(graph)


def gen_star(n: int) -> DirectedGraph:
    if n < 2:
        raise HealsimConfigError(f'star needs at least 2 nodes, got {n}')
    return _symmetric(nx.star_graph(n - 1))


def gen_multistar(n: int, s: int) -> DirectedGraph:
    """``s`` fully interconnected servers (ids ``0..s-1``), the other nodes
    attached round-robin."""
    if s < 1 or n <= s:
        raise HealsimConfigError(f'multistar needs 1 <= s < n, got n={n} s={s}')
    graph = nx.complete_graph(s)
    graph.add_edges_from((worker, (worker - s) % s) for worker in range(s, n))
    return _symmetric(graph)


def gen_ring(n: int) -> DirectedGraph:
    if n < 3:
        raise HealsimConfigError(f'ring needs at least 3 nodes, got {n}')
    return _symmetric(nx.cycle_graph(n))


def gen_kregular(n: int, k: int, seed: int) -> DirectedGraph:
    """Connected random ``k``-regular graph; regenerated on disconnection."""
    if not 0 < k < n or (n * k) % 2:
        raise HealsimConfigError(f'no {k}-regular graph on {n} nodes')
    for attempt in range(KREGULAR_RETRIES):
        attempt_seed = int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        graph = nx.random_regular_graph(k, n, seed=attempt_seed)
        if nx.is_connected(graph):
            return _symmetric(graph)
    raise HealsimConfigError(f'no connected {k}-regular graph on {n} nodes after {KREGULAR_RETRIES} tries')


def gen_chord(n: int) -> DirectedGraph:
    """Node ``i`` links to ``(i +/- 2^j) mod n`` for every ``2^j < n``."""
    if n < 2:
        raise HealsimConfigError(f'chord needs at least 2 nodes, got {n}')
    graph = nx.Graph()
    graph.add_nodes_from(range(n))
    step = 1
    while step < n:
        for i in range(n):
            for j in ((i + step) % n, (i - step) % n):
                if j != i:
                    graph.add_edge(i, j)
        step *= 2
    return _symmetric(graph)


def gen_complete(n: int) -> DirectedGraph:
    if n < 2:
        raise HealsimConfigError(f'complete graph needs at least 2 nodes, got {n}')
    return _symmetric(nx.complete_graph(n))


class StaticOverlay:
    """A fixed topology; crashes remove nodes and joiners link symmetrically."""

    dynamic = False

    def __init__(self, graph: DirectedGraph, hub_threshold: float = DEFAULT_HUB_THRESHOLD) -> None:
        self._graph = graph.copy()
        self.hub_threshold = hub_threshold
        self._hubs: Optional[list[NodeId]] = None

    @property
    def graph(self) -> DirectedGraph:
        return self._graph

    @property
    def live_nodes(self) -> list[NodeId]:
        return sorted(self._graph.nodes)

    def step(self) -> DirectedGraph:
        return self._graph

    def hubs(self) -> list[NodeId]:
        if self._hubs is None:
            self._hubs = detect_hubs(self._graph, self.hub_threshold)
        return self._hubs

    def hubs_list(self, node: NodeId) -> list[NodeId]:
        return [hub for hub in self.hubs() if hub != node]

    def neighbors(self, node: NodeId) -> list[NodeId]:
        return sorted(self._graph.successors(node)) if node in self._graph else []

    def crash(self, nodes: Iterable[NodeId]) -> None:
        self._graph.remove_nodes_from(list(nodes))
        self._hubs = None

    def join(self, node: NodeId, peers: Sequence[NodeId]) -> None:
        self._graph.add_node(node)
        for peer in peers:
            self._graph.add_edge(node, peer)
            self._graph.add_edge(peer, node)
        self._hubs = None


class ElevatorOverlay:
    """Live Elevator overlay: per-node state plus the graph of the last cycle."""

    dynamic = True

    def __init__(self, h: int, c: int = DEFAULT_CACHE_SIZE, seed: int = 0,
                 hub_threshold: float = DEFAULT_HUB_THRESHOLD) -> None:
        if not 0 <= h <= c:
            raise HealsimConfigError(f'need 0 <= h <= c, got h={h} c={c}')
        self.h = h
        self.c = c
        self.seed = seed
        self.hub_threshold = hub_threshold
        self.cycle = 0
        self.states: dict[NodeId, OverlayState] = {}
        self._graph: DirectedGraph = nx.DiGraph()
        self._hubs: Optional[list[NodeId]] = None

    @classmethod
    def bootstrap(cls, graph: DirectedGraph, h: int, c: int = DEFAULT_CACHE_SIZE, seed: int = 0,
                  hub_threshold: float = DEFAULT_HUB_THRESHOLD) -> 'ElevatorOverlay':
        """Caches start as the graph's out-neighbors. Backward lists start
        empty and only ever hold nodes that made contact."""
        overlay = cls(h, c, seed, hub_threshold)
        for node in sorted(graph.nodes):
            overlay.states[node] = OverlayState(
                node_id=node, h=h, c=c,
                cache=sorted(graph.successors(node))[:c],
            )
        overlay._refresh()
        return overlay

    def _refresh(self) -> None:
        self._graph = build_graph(self.states)
        self._hubs = None

    @property
    def graph(self) -> DirectedGraph:
        return self._graph

    @property
    def live_nodes(self) -> list[NodeId]:
        return sorted(self.states)

    def step(self) -> DirectedGraph:
        self._graph = elevator_cycle(self.states, self.seed, self.cycle)
        self._hubs = None
        self.cycle += 1
        logger.debug('Elevator cycle %d: hubs %s', self.cycle, self.hubs())
        return self._graph

    def hubs(self) -> list[NodeId]:
        if self._hubs is None:
            self._hubs = detect_hubs(self._graph, self.hub_threshold)
        return self._hubs

    def hubs_list(self, node: NodeId) -> list[NodeId]:
        state = self.states.get(node)
        return list(state.hubs_list) if state else []

    def neighbors(self, node: NodeId) -> list[NodeId]:
        return sorted(self._graph.successors(node)) if node in self._graph else []

    def crash(self, nodes: Iterable[NodeId]) -> None:
        for node in nodes:
            self.states.pop(node, None)
        self._refresh()

    def join(self, node: NodeId, peers: Sequence[NodeId]) -> None:
        self.states[node] = OverlayState(node_id=node, h=self.h, c=self.c, cache=list(peers)[:self.c])
        for peer in peers:
            if peer in self.states:
                self.states[peer].backward_list.add(node)
        self._refresh()


Overlay = StaticOverlay | ElevatorOverlay


def write_snapshot(graph: DirectedGraph, cycle: int, out_dir: str | pathlib.Path,
                   hub_threshold: float = DEFAULT_HUB_THRESHOLD) -> tuple[pathlib.Path, pathlib.Path]:
    """Write ``overlay_<cycle>.edges`` (``u v`` per line) and ``overlay_<cycle>.json``."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    edges_path = out_dir / f'overlay_{cycle:04d}.edges'
    meta_path = out_dir / f'overlay_{cycle:04d}.json'
    with open(edges_path, 'w', encoding='utf-8', newline='\n') as file:
        for u, v in sorted(graph.edges):
            file.write(f'{u} {v}\n')
    meta = {
        'cycle': cycle,
        'hubs': detect_hubs(graph, hub_threshold),
        'diameter': graph_diameter(graph),
        'live_nodes': graph.number_of_nodes(),
    }
    with open(meta_path, 'w', encoding='utf-8', newline='\n') as file:
        json.dump(meta, file, indent=2)
        file.write('\n')
    return edges_path, meta_path


def read_edges(path: str | pathlib.Path, nodes: Iterable[NodeId] = ()) -> DirectedGraph:
    graph = nx.DiGraph()
    graph.add_nodes_from(nodes)
    with open(path, encoding='utf-8') as file:
        for line in file:
            if line.strip():
                u, v = line.split()
                graph.add_edge(int(u), int(v))
    return graph
