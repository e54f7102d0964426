"""Multi-scale continuous-time dynamic graph over a template sequence.

Each log event is a destination occurrence. For every hop scale ``H >= 1``
the occurrence ``H`` positions earlier points at it; ``H = 0`` is a
self-loop. Edges carry the destination's timestamp and a fixed-width feature
vector: semantic similarity, co-occurrence frequency, log time interval,
the destination's level one-hot and the hop one-hot.
"""

import dataclasses
import logging
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from typing import Optional

import numpy as np
import pandas as pd

from .errors import ContractViolation
from .template_embed import LEVEL_ORDER, LogLevel, one_hot_level

logger = logging.getLogger(__name__)

EDGE = "edge"
NODE = "node"

SS, CF, TI = 0, 1, 2
LL_START = 3
HOP_START = LL_START + len(LEVEL_ORDER)


def feature_width(hop_set: Iterable[int]) -> int:
    return HOP_START + len(set(hop_set))


@dataclasses.dataclass(frozen=True)
class FeatureSwitches:
    """Which edge features are live; a disabled one is zeroed in place."""

    use_ss: bool = True
    use_cf: bool = True
    use_ti: bool = True
    use_ll: bool = True

    def apply(self, feats: np.ndarray) -> np.ndarray:
        if not self.use_ss:
            feats[..., SS] = 0.0
        if not self.use_cf:
            feats[..., CF] = 0.0
        if not self.use_ti:
            feats[..., TI] = 0.0
        if not self.use_ll:
            feats[..., LL_START:HOP_START] = 0.0
        return feats


@dataclasses.dataclass
class EdgeFeatures:
    ss: float
    cf: float
    ti_norm: float
    ll_dst: np.ndarray
    hop_onehot: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [[self.ss, self.cf, self.ti_norm], self.ll_dst, self.hop_onehot]
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "EdgeFeatures":
        return cls(
            ss=float(arr[SS]),
            cf=float(arr[CF]),
            ti_norm=float(arr[TI]),
            ll_dst=np.array(arr[LL_START:HOP_START]),
            hop_onehot=np.array(arr[HOP_START:]),
        )


@dataclasses.dataclass
class GraphEvent:
    kind: str
    src: int
    dst: int
    timestamp: float
    hop: int
    seq_index: int
    # raw |t_dst - t_src| in seconds, kept so negatives can rescale it
    interval: float = 0.0
    features: Optional[np.ndarray] = None

    @property
    def is_edge(self) -> bool:
        return self.kind == EDGE


class CooccurrenceTable:
    """Directed pair counts per hop scale, built once from training data."""

    def __init__(self):
        self.counts: dict[int, Counter] = {}
        self.totals: dict[int, int] = {}
        self.frozen = False
        self._warned: set[int] = set()

    @classmethod
    def from_sequence(
        cls, template_ids: Sequence[int], hop_set: Iterable[int]
    ) -> "CooccurrenceTable":
        table = cls()
        for hop in sorted(set(hop_set)):
            table.add_scale(template_ids, hop)
        table.freeze()
        return table

    def add_scale(self, template_ids: Sequence[int], hop: int) -> None:
        if self.frozen:
            raise ContractViolation("co-occurrence table is frozen")
        ids = list(template_ids)
        pairs = Counter(zip(ids[: len(ids) - hop], ids[hop:]))
        self.counts[hop] = pairs
        self.totals[hop] = sum(pairs.values())

    def freeze(self) -> None:
        self.frozen = True

    def frequency(self, src: int, dst: int, hop: int) -> float:
        total = self.totals.get(hop, 0)
        if total == 0:
            if hop not in self._warned:
                self._warned.add(hop)
                logger.warning("no training edges at hop %d, co-occurrence is 0", hop)
            return 0.0
        return self.counts[hop].get((src, dst), 0) / total

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (hop, src, dst, count)
            for hop in sorted(self.counts)
            for (src, dst), count in sorted(self.counts[hop].items())
        ]
        return pd.DataFrame(rows, columns=["hop", "src", "dst", "count"])

    @classmethod
    def from_frame(cls, df: pd.DataFrame, hop_set: Iterable[int]) -> "CooccurrenceTable":
        table = cls()
        for hop in sorted(set(hop_set)):
            table.counts[hop] = Counter()
            table.totals[hop] = 0
        for hop, src, dst, count in df.itertuples(index=False, name=None):
            table.counts.setdefault(int(hop), Counter())[(int(src), int(dst))] = int(count)
            table.totals[int(hop)] = table.totals.get(int(hop), 0) + int(count)
        table.freeze()
        return table


def cosine_similarity(v_i: np.ndarray, v_j: np.ndarray) -> float:
    v_i = np.asarray(v_i, dtype=np.float64)
    v_j = np.asarray(v_j, dtype=np.float64)
    if v_i.shape != v_j.shape:
        raise ContractViolation(f"dimension mismatch: {v_i.shape} vs {v_j.shape}")
    n_i, n_j = np.linalg.norm(v_i), np.linalg.norm(v_j)
    if n_i == 0 or n_j == 0:
        raise ContractViolation("cosine similarity of a zero vector")
    return float(np.clip(v_i @ v_j / (n_i * n_j), -1.0, 1.0))


def co_occurrence_frequency(
    pair: tuple[int, int], table: CooccurrenceTable, hop: int
) -> float:
    return table.frequency(pair[0], pair[1], hop)


def time_interval(t_i: float, t_j: float) -> float:
    return abs(t_i - t_j)


def normalize_ti(delta: float) -> float:
    return math.log1p(delta)


class FeatureBuilder:
    """Computes edge features for arbitrary (src, dst) pairs.

    Used both for the observed stream and for corrupted pairs drawn during
    training, so the two are always computed the same way.

    Parameters
    ----------
    embeddings : np.ndarray
        ``(n_templates, d)`` unit-norm semantic vectors indexed by template id.
    levels : sequence of LogLevel
        Level of each template.
    table : CooccurrenceTable
        Frozen training co-occurrence counts.
    hop_set : iterable of int
        Hop scales of the graph, which fixes the hop one-hot layout.
    switches : FeatureSwitches, optional
        Feature ablation switches.
    """

    def __init__(
        self,
        embeddings: np.ndarray,
        levels: Sequence[LogLevel],
        table: CooccurrenceTable,
        hop_set: Iterable[int],
        switches: Optional[FeatureSwitches] = None,
    ):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.levels = np.array([int(lv) for lv in levels], dtype=np.int64)
        if len(self.levels) != len(self.embeddings):
            raise ContractViolation(
                f"{len(self.embeddings)} embeddings but {len(self.levels)} levels"
            )
        self.table = table
        self.hops = sorted(set(hop_set))
        if not self.hops:
            raise ContractViolation("hop_set must not be empty")
        self.hop_pos = {h: i for i, h in enumerate(self.hops)}
        self.switches = switches or FeatureSwitches()

    @property
    def width(self) -> int:
        return HOP_START + len(self.hops)

    def edge_features(self, src: int, dst: int, interval: float, hop: int) -> EdgeFeatures:
        hop_onehot = np.zeros(len(self.hops))
        hop_onehot[self.hop_pos[hop]] = 1.0
        return EdgeFeatures(
            ss=cosine_similarity(self.embeddings[src], self.embeddings[dst]),
            cf=co_occurrence_frequency((src, dst), self.table, hop),
            ti_norm=normalize_ti(interval),
            ll_dst=one_hot_level(LogLevel(int(self.levels[dst]))),
            hop_onehot=hop_onehot,
        )

    def batch(
        self,
        src: np.ndarray,
        dst: np.ndarray,
        interval: np.ndarray,
        hop: np.ndarray,
        dst_levels: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Vectorized ``edge_features(...).as_array()`` over aligned arrays.

        ``dst_levels`` overrides the destination template levels per row.
        """
        n = len(src)
        feats = np.zeros((n, self.width))
        if n == 0:
            return feats
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        # rows are unit norm, so the dot product is the cosine
        feats[:, SS] = np.clip(
            np.einsum("ij,ij->i", self.embeddings[src], self.embeddings[dst]), -1.0, 1.0
        )
        feats[:, CF] = [
            self.table.frequency(int(s), int(d), int(h))
            for s, d, h in zip(src, dst, hop)
        ]
        feats[:, TI] = np.log1p(np.asarray(interval, dtype=np.float64))
        levels = self.levels[dst] if dst_levels is None else np.asarray(dst_levels, dtype=np.int64)
        feats[np.arange(n), LL_START + levels] = 1.0
        feats[np.arange(n), HOP_START + np.array([self.hop_pos[int(h)] for h in hop])] = 1.0
        return self.switches.apply(feats)

    def grow(self, vector: np.ndarray, level: LogLevel) -> int:
        """Register the embedding and level of a template seen only at detection."""
        self.embeddings = np.vstack([self.embeddings, vector[None, :]])
        self.levels = np.append(self.levels, int(level))
        return len(self.levels) - 1


def build_events(
    sequence: Sequence[tuple],
    builder: FeatureBuilder,
    start_index: int = 0,
) -> list[GraphEvent]:
    """Turn a chronological template sequence into a merged event stream.

    Parameters
    ----------
    sequence : sequence of (template_id, timestamp) or (template_id, timestamp, level)
        The log events in order. Without a level, or with ``None``, an
        occurrence takes its template's level from ``builder``.
    builder : FeatureBuilder
        Holds embeddings, levels, the co-occurrence table and the hop set.
    start_index : int, optional
        ``seq_index`` of the first element, so a test stream keeps the
        positions it had in the full log.

    Returns
    -------
    list of GraphEvent
        Node-add events for first occurrences followed, per position, by
        the edges ending there in ascending hop order. The stream is sorted
        by timestamp with ``seq_index`` breaking ties.
    """
    if not sequence:
        return []
    ids = np.array([int(item[0]) for item in sequence], dtype=np.int64)
    times = np.array([float(item[1]) for item in sequence], dtype=np.float64)
    occ_levels = np.array(
        [
            int(item[2]) if len(item) > 2 and item[2] is not None else builder.levels[item[0]]
            for item in sequence
        ],
        dtype=np.int64,
    )
    if np.any(np.diff(times) < 0):
        raise ContractViolation("sequence must be chronological")

    events = []
    seen = set()
    for k, tid in enumerate(ids):
        if int(tid) not in seen:
            seen.add(int(tid))
            events.append(
                GraphEvent(
                    kind=NODE,
                    src=int(tid),
                    dst=int(tid),
                    timestamp=float(times[k]),
                    hop=0,
                    seq_index=start_index + k,
                )
            )

    edge_events = []
    for hop in builder.hops:
        k = np.arange(hop, len(ids))
        if len(k) == 0:
            continue
        src, dst = ids[k - hop], ids[k]
        interval = np.abs(times[k] - times[k - hop])
        feats = builder.batch(
            src, dst, interval, np.full(len(k), hop), dst_levels=occ_levels[k]
        )
        for i, pos in enumerate(k):
            edge_events.append(
                GraphEvent(
                    kind=EDGE,
                    src=int(src[i]),
                    dst=int(dst[i]),
                    timestamp=float(times[pos]),
                    hop=hop,
                    seq_index=start_index + int(pos),
                    interval=float(interval[i]),
                    features=feats[i],
                )
            )
    events.extend(edge_events)
    events.sort(key=lambda e: (e.timestamp, e.seq_index, e.kind != NODE, e.hop))
    return events


def edge_arrays(events: Sequence[GraphEvent]) -> dict[str, np.ndarray]:
    """Columnar view of the edge events of a stream."""
    edges = [e for e in events if e.is_edge]
    width = len(edges[0].features) if edges else 0
    return {
        "src": np.array([e.src for e in edges], dtype=np.int64),
        "dst": np.array([e.dst for e in edges], dtype=np.int64),
        "t": np.array([e.timestamp for e in edges], dtype=np.float64),
        "hop": np.array([e.hop for e in edges], dtype=np.int64),
        "seq": np.array([e.seq_index for e in edges], dtype=np.int64),
        "interval": np.array([e.interval for e in edges], dtype=np.float64),
        "features": (
            np.stack([e.features for e in edges]) if edges else np.zeros((0, width))
        ),
    }


_BASE_COLUMNS = ["kind", "src", "dst", "timestamp", "hop", "seq_index", "interval"]


def write_events(events: Sequence[GraphEvent], path: str) -> int:
    """Write a stream as CSV, one row per event with ``f<i>`` feature columns."""
    width = max((len(e.features) for e in events if e.features is not None), default=0)
    rows = []
    for e in events:
        feats = list(e.features) if e.features is not None else [float("nan")] * width
        rows.append(
            [e.kind, e.src, e.dst, e.timestamp, e.hop, e.seq_index, e.interval, *feats]
        )
    columns = _BASE_COLUMNS + [f"f{i}" for i in range(width)]
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return len(rows)


def read_events(path: str) -> list[GraphEvent]:
    df = pd.read_csv(path, float_precision="round_trip")
    feat_cols = [c for c in df.columns if c not in _BASE_COLUMNS]
    feats = df[feat_cols].to_numpy(dtype=np.float64) if feat_cols else None
    events = []
    for i, row in enumerate(df[_BASE_COLUMNS].itertuples(index=False, name=None)):
        kind, src, dst, ts, hop, seq, interval = row
        events.append(
            GraphEvent(
                kind=kind,
                src=int(src),
                dst=int(dst),
                timestamp=float(ts),
                hop=int(hop),
                seq_index=int(seq),
                interval=float(interval),
                features=(
                    feats[i].copy() if kind == EDGE and feats is not None else None
                ),
            )
        )
    return events
