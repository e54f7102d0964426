"""Node memory and embeddings of the temporal graph network.

Memory rows start as the templates' semantic vectors. Each edge event sends
one message to each endpoint; a node's messages within a batch are reduced to
one and folded into its row by a GRU. Embeddings are read from memory
directly, through a learned time projection, or through one layer of
temporal attention over the node's most recent incoming neighbors.
"""

import dataclasses
import logging
from collections.abc import Mapping, Sequence
from typing import Optional, Union

import numpy as np

from .ctdg import GraphEvent, edge_arrays
from .errors import ContractViolation
from .nn_core import (
    DEFAULT_HEADS,
    DEFAULT_TIME_DIM,
    GRUCell,
    ParamStore,
    TemporalAttention,
    TimeEncoder,
)
from .os_utils import read_npz, write_npz

logger = logging.getLogger(__name__)

AGGREGATORS = ("most_recent", "mean")
EMBEDDING_MODES = ("identity", "time_projection", "tga")
DEFAULT_NEIGHBORS = 10


@dataclasses.dataclass
class Message:
    node: int
    payload: np.ndarray
    timestamp: float
    seq_index: int = -1
    other: int = -1
    features: Optional[np.ndarray] = None
    # True when ``node`` is the destination of the edge
    incoming: bool = False


class MemoryState:
    """Growable node memory with per-node neighbor ring buffers.

    Ring buffers hold the ``capacity`` most recent incoming neighbors of a
    node, oldest first.
    """

    def __init__(
        self,
        dim: int,
        feature_dim: int,
        capacity: int = DEFAULT_NEIGHBORS,
        semantic_init: bool = True,
    ):
        self.dim = dim
        self.feature_dim = feature_dim
        self.capacity = capacity
        self.semantic_init = semantic_init
        self.states = np.zeros((0, dim))
        self.last_update = np.zeros(0)
        self.nb_ids = np.zeros((0, capacity), dtype=np.int64)
        self.nb_times = np.zeros((0, capacity))
        self.nb_feats = np.zeros((0, capacity, feature_dim))
        self.nb_len = np.zeros(0, dtype=np.int64)
        self.current_time = 0.0

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def __len__(self):
        return self.size

    def check_nodes(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.size):
            bad = nodes[(nodes < 0) | (nodes >= self.size)][0]
            raise ContractViolation(
                f"node {bad} is not in memory of size {self.size}; add it first"
            )
        return nodes

    def add_node(self, vector: np.ndarray) -> int:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ContractViolation(
                f"node vector has shape {vector.shape}, memory dim is {self.dim}"
            )
        row = vector if self.semantic_init else np.zeros(self.dim)
        self.states = np.vstack([self.states, row[None, :]])
        self.last_update = np.append(self.last_update, self.current_time)
        self.nb_ids = np.vstack([self.nb_ids, np.zeros((1, self.capacity), dtype=np.int64)])
        self.nb_times = np.vstack([self.nb_times, np.zeros((1, self.capacity))])
        self.nb_feats = np.concatenate(
            [self.nb_feats, np.zeros((1, self.capacity, self.feature_dim))]
        )
        self.nb_len = np.append(self.nb_len, 0)
        return self.size - 1

    def append_neighbor(self, node: int, other: int, features: np.ndarray, t: float) -> None:
        n = self.nb_len[node]
        if n < self.capacity:
            pos = n
            self.nb_len[node] = n + 1
        else:
            self.nb_ids[node, :-1] = self.nb_ids[node, 1:]
            self.nb_times[node, :-1] = self.nb_times[node, 1:]
            self.nb_feats[node, :-1] = self.nb_feats[node, 1:]
            pos = self.capacity - 1
        self.nb_ids[node, pos] = other
        self.nb_times[node, pos] = t
        self.nb_feats[node, pos] = features

    def neighbors(self, node: int) -> list[tuple[int, np.ndarray, float]]:
        n = self.nb_len[node]
        return [
            (int(self.nb_ids[node, i]), self.nb_feats[node, i].copy(), float(self.nb_times[node, i]))
            for i in range(n)
        ]

    def copy(self) -> "MemoryState":
        other = MemoryState(self.dim, self.feature_dim, self.capacity, self.semantic_init)
        for name in ("states", "last_update", "nb_ids", "nb_times", "nb_feats", "nb_len"):
            setattr(other, name, getattr(self, name).copy())
        other.current_time = self.current_time
        return other

    def save(self, path: str) -> None:
        write_npz(
            path,
            {
                "states": self.states,
                "last_update": self.last_update,
                "nb_ids": self.nb_ids,
                "nb_times": self.nb_times,
                "nb_feats": self.nb_feats,
                "nb_len": self.nb_len,
                "current_time": np.array(self.current_time),
                "semantic_init": np.array(self.semantic_init),
            },
        )

    @classmethod
    def load(cls, path: str) -> "MemoryState":
        data = read_npz(path)
        mem = cls(
            dim=data["states"].shape[1],
            feature_dim=data["nb_feats"].shape[2],
            capacity=data["nb_ids"].shape[1],
            semantic_init=bool(data["semantic_init"]),
        )
        for name in ("states", "last_update", "nb_ids", "nb_times", "nb_feats", "nb_len"):
            setattr(mem, name, data[name])
        mem.current_time = float(data["current_time"])
        return mem


def init_memory(
    templates: Sequence,
    embeddings: Union[np.ndarray, Mapping[int, np.ndarray]],
    feature_dim: int,
    capacity: int = DEFAULT_NEIGHBORS,
    semantic_init: bool = True,
) -> MemoryState:
    """Create memory with one row per template set to its semantic vector.

    Parameters
    ----------
    templates : sequence
        Objects with an ``id``; ids must run 0..n-1 in order.
    embeddings : array or mapping
        Semantic vectors indexed by template id.
    feature_dim : int
        Width of the edge features kept in the neighbor buffers.
    capacity : int, optional
        Neighbor ring buffer size.
    semantic_init : bool, optional
        When False every row, including rows added later, starts at zero.
    """
    dim = None
    rows = []
    for pos, template in enumerate(templates):
        if template.id != pos:
            raise ContractViolation(f"template ids must be contiguous, got {template.id} at {pos}")
        try:
            vec = np.asarray(embeddings[template.id], dtype=np.float64)
        except (KeyError, IndexError):
            raise ContractViolation(
                f"no embedding for template {template.id} ({getattr(template, 'text', '')!r})"
            ) from None
        rows.append(vec)
        dim = vec.shape[0]
    if dim is None:
        if isinstance(embeddings, np.ndarray) and embeddings.ndim == 2:
            dim = embeddings.shape[1]
        else:
            raise ContractViolation("cannot infer memory dim without templates or an array")

    memory = MemoryState(dim, feature_dim, capacity, semantic_init)
    for vec in rows:
        memory.add_node(vec)
    return memory


def add_node(vector: np.ndarray, memory: MemoryState) -> int:
    return memory.add_node(vector)


def aggregate_messages(pending: Sequence[Message], mode: str = "most_recent") -> Message:
    """Reduce one node's pending messages to a single message.

    ``most_recent`` keeps the message with the largest timestamp, then
    largest ``seq_index``, then the latest in ``pending``. ``mean`` averages
    the payloads and keeps the latest timestamp.
    """
    if not pending:
        raise ContractViolation("cannot aggregate an empty message list")
    node = pending[0].node
    if any(m.node != node for m in pending):
        raise ContractViolation("messages for different nodes cannot be aggregated")
    latest = max(
        range(len(pending)), key=lambda i: (pending[i].timestamp, pending[i].seq_index, i)
    )
    if mode == "most_recent":
        return pending[latest]
    if mode == "mean":
        return dataclasses.replace(
            pending[latest],
            payload=np.mean([m.payload for m in pending], axis=0),
        )
    raise ValueError(f"unknown aggregator: {mode!r}")


class TGN:
    """Memory updater and embedding module sharing one ParamStore.

    Parameters
    ----------
    store : ParamStore
        Receives the ``tgn.*`` parameters.
    memory_dim : int
        Width of memory rows and embeddings.
    feature_dim : int
        Width of edge feature vectors.
    rng : np.random.Generator
        Initialization randomness.
    time_dim, heads, neighbors : int, optional
        Time-encoding width, attention heads and ring buffer capacity.
    embedding : str, optional
        One of ``identity``, ``time_projection`` or ``tga``.
    aggregator : str, optional
        ``most_recent`` or ``mean``.
    """

    def __init__(
        self,
        store: ParamStore,
        memory_dim: int,
        feature_dim: int,
        rng: np.random.Generator,
        time_dim: int = DEFAULT_TIME_DIM,
        heads: int = DEFAULT_HEADS,
        neighbors: int = DEFAULT_NEIGHBORS,
        embedding: str = "tga",
        aggregator: str = "most_recent",
    ):
        if embedding not in EMBEDDING_MODES:
            raise ValueError(f"unknown embedding mode: {embedding!r}")
        if aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator: {aggregator!r}")
        self.store = store
        self.memory_dim = memory_dim
        self.feature_dim = feature_dim
        self.neighbors = neighbors
        self.embedding = embedding
        self.aggregator = aggregator
        self.message_dim = 2 * memory_dim + time_dim + feature_dim

        self.time = TimeEncoder(store, "tgn.time", time_dim)
        self.gru = GRUCell(store, "tgn.gru", self.message_dim, memory_dim, rng)
        self.attention = TemporalAttention(
            store, "tgn.attn", memory_dim, feature_dim, self.time, rng, heads=heads
        )
        self.proj = "tgn.time_proj.w"
        store.add(self.proj, np.zeros(memory_dim))
        self.memory: Optional[MemoryState] = None

    # messages and memory updates

    def _payloads(self, node, other, dt, features):
        mem = self.memory
        phi, _ = self.time.forward(np.maximum(dt, 0.0))
        return np.concatenate(
            [mem.states[node], mem.states[other], phi, features], axis=1
        )

    def compute_message(self, event: GraphEvent) -> tuple[Message, Message]:
        """Return ``(message for dst, message for src)`` built from memory at t-."""
        mem = self.memory
        mem.check_nodes([event.src, event.dst])
        feats = np.asarray(event.features, dtype=np.float64)
        node = np.array([event.dst, event.src])
        other = np.array([event.src, event.dst])
        dt = event.timestamp - mem.last_update[node]
        payload = self._payloads(node, other, dt, np.stack([feats, feats]))
        to_dst = Message(
            event.dst, payload[0], event.timestamp, event.seq_index, event.src, feats, True
        )
        to_src = Message(
            event.src, payload[1], event.timestamp, event.seq_index, event.dst, feats, False
        )
        return to_dst, to_src

    def update_memory(self, node: int, aggregated: Message) -> MemoryState:
        """Fold one aggregated message into ``node``'s row."""
        mem = self.memory
        mem.check_nodes([node])
        h_new, _ = self.gru.forward(aggregated.payload[None, :], mem.states[node][None, :])
        mem.states[node] = h_new[0]
        mem.last_update[node] = aggregated.timestamp
        if aggregated.incoming and aggregated.features is not None:
            mem.append_neighbor(node, aggregated.other, aggregated.features, aggregated.timestamp)
        mem.current_time = max(mem.current_time, aggregated.timestamp)
        return mem

    def process_events(self, events: Sequence[GraphEvent], keep_cache: bool = False):
        """Apply the memory updates of one batch.

        All messages are built from the memory as it was before the batch.
        Every incoming edge is appended to its destination's ring buffer in
        stream order.

        Returns
        -------
        tuple or None
            ``(updated node ids, GRU cache)`` when ``keep_cache`` is set, for
            a one-step gradient into the updater on the next batch.
        """
        mem = self.memory
        edges = edge_arrays(events)
        n_edges = len(edges["src"])
        if n_edges == 0:
            return None
        src, dst, t = edges["src"], edges["dst"], edges["t"]
        mem.check_nodes(np.concatenate([src, dst]))

        # message 2i goes to src, 2i+1 to dst
        node = np.empty(2 * n_edges, dtype=np.int64)
        other = np.empty(2 * n_edges, dtype=np.int64)
        node[0::2], node[1::2] = src, dst
        other[0::2], other[1::2] = dst, src
        times = np.repeat(t, 2)
        feats = np.repeat(edges["features"], 2, axis=0)
        payload = self._payloads(node, other, times - mem.last_update[node], feats)

        uniq, first_rev = np.unique(node[::-1], return_index=True)
        last = len(node) - 1 - first_rev
        if self.aggregator == "most_recent":
            x = payload[last]
        else:
            sums = np.zeros((len(uniq), payload.shape[1]))
            pos = np.searchsorted(uniq, node)
            np.add.at(sums, pos, payload)
            x = sums / np.bincount(pos, minlength=len(uniq))[:, None]

        h_new, cache = self.gru.forward(x, mem.states[uniq])
        mem.states[uniq] = h_new
        mem.last_update[uniq] = times[last]
        for i in range(n_edges):
            mem.append_neighbor(int(dst[i]), int(src[i]), edges["features"][i], float(t[i]))
        mem.current_time = max(mem.current_time, float(t.max()))
        return (uniq, cache) if keep_cache else None

    def memory_update_backward(self, dmem: np.ndarray, update, grads: dict) -> None:
        """Backpropagate memory-row gradients through the last GRU update only."""
        nodes, cache = update
        self.gru.backward(dmem[nodes], cache, grads)

    # embeddings

    def embed(self, nodes, times, mode: Optional[str] = None):
        """Embed ``nodes`` at query ``times`` from the current memory.

        Returns
        -------
        z : np.ndarray
            ``(len(nodes), memory_dim)`` embeddings.
        cache : tuple
            For ``embed_backward``.
        """
        mode = mode or self.embedding
        mem = self.memory
        nodes = mem.check_nodes(nodes)
        times = np.asarray(times, dtype=np.float64).reshape(-1)
        s = mem.states[nodes]

        if mode == "identity":
            return s.copy(), (mode, nodes)

        if mode == "time_projection":
            dt = times - mem.last_update[nodes]
            scale = 1.0 + dt[:, None] * self.store[self.proj][None, :]
            return scale * s, (mode, nodes, s, dt, scale)

        if mode == "tga":
            nb_ids = mem.nb_ids[nodes]
            mask = np.arange(mem.capacity)[None, :] < mem.nb_len[nodes][:, None]
            dt_nb = np.where(mask, np.maximum(times[:, None] - mem.nb_times[nodes], 0.0), 0.0)
            z, _, att_cache = self.attention.forward(
                s, mem.states[nb_ids], mem.nb_feats[nodes], dt_nb, mask
            )
            return z, (mode, nodes, nb_ids, att_cache)

        raise ValueError(f"unknown embedding mode: {mode!r}")

    def embed_backward(self, dz: np.ndarray, cache, grads: dict) -> np.ndarray:
        """Accumulate parameter gradients and return d(loss)/d(memory rows)."""
        mode, nodes = cache[0], cache[1]
        dmem = np.zeros_like(self.memory.states)
        if mode == "identity":
            np.add.at(dmem, nodes, dz)
        elif mode == "time_projection":
            _, _, s, dt, scale = cache
            dw = (dz * s * dt[:, None]).sum(axis=0)
            grads[self.proj] = grads.get(self.proj, 0.0) + dw
            np.add.at(dmem, nodes, dz * scale)
        else:
            _, _, nb_ids, att_cache = cache
            ds_q, ds_nb, _ = self.attention.backward(dz, att_cache, grads)
            np.add.at(dmem, nodes, ds_q)
            np.add.at(dmem, nb_ids.reshape(-1), ds_nb.reshape(-1, ds_nb.shape[-1]))
        return dmem

    def embed_node(self, node: int, t: float, mode: Optional[str] = None) -> np.ndarray:
        z, _ = self.embed([node], [t], mode)
        return z[0]
