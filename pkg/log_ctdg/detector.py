"""Self-supervised link prediction over all hop scales and event verdicts.

One parameter set serves every hop scale. Training treats observed edges as
positives and corrupted edges as negatives. At detection time each log event
is scored on every edge that ends at it, and it is anomalous when any of
those edges is predicted unlikely.
"""

import dataclasses
import logging
from collections.abc import Iterator, Sequence
from typing import Optional

import numpy as np
import pandas as pd

from .ctdg import CF, HOP_START, LL_START, SS, TI, FeatureBuilder, GraphEvent, edge_arrays
from .errors import ContractViolation, TrainingDivergedError
from .nn_core import (
    DEFAULT_HEADS,
    DEFAULT_MODEL_DIM,
    DEFAULT_TIME_DIM,
    Linear,
    ParamStore,
    adam_step,
    bce_loss,
    sigmoid,
)
from .template_embed import LogLevel, parse_level
from .tgn import DEFAULT_NEIGHBORS, TGN, init_memory

logger = logging.getLogger(__name__)

NORMAL = "normal"
ANOMALY = "anomaly"

# floor added before taking the log of co-occurrence frequencies
CF_FLOOR = 1e-6
# time negatives stretch the hop's interval by a log-uniform factor in this range
TIME_NEGATIVE_FACTOR = (30.0, 3000.0)
# the link head standardizes these columns, one-hot blocks pass through
SCALED_COLUMNS = (SS, CF, TI)


@dataclasses.dataclass
class ModelConfig:
    memory_dim: int = DEFAULT_MODEL_DIM
    time_dim: int = DEFAULT_TIME_DIM
    heads: int = DEFAULT_HEADS
    neighbors: int = DEFAULT_NEIGHBORS
    head_hidden: int = DEFAULT_MODEL_DIM
    embedding: str = "tga"
    aggregator: str = "most_recent"
    semantic_init: bool = True
    # feed the scored edge's own features to the link head next to [z_i || z_j]
    head_edge_features: bool = True


@dataclasses.dataclass
class TrainConfig:
    hop_set: tuple[int, ...] = (0, 1)
    batch_size: int = 200
    epochs: int = 5
    negatives: int = 1
    time_negatives: int = 1
    level_negatives: int = 1
    # edges into events at or above this level are never trained as positives
    severe_level: Optional[str] = "ERROR"
    positive_weight: float = 4.0
    threshold: float = 0.5
    seed: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.hop_set = tuple(sorted(set(int(h) for h in self.hop_set)))
        if self.severe_level is not None:
            level = parse_level(str(self.severe_level))
            if level is None:
                raise ContractViolation(f"unknown severe_level {self.severe_level!r}")
            self.severe_level = level.name
        if self.level_negatives < 0:
            raise ContractViolation(f"level_negatives must be >= 0, got {self.level_negatives}")
        if self.positive_weight <= 0:
            raise ContractViolation(f"positive_weight must be > 0, got {self.positive_weight}")
        if not self.hop_set or min(self.hop_set) < 0:
            raise ContractViolation(f"hop_set must be non-empty and >= 0, got {self.hop_set}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if self.negatives < 1:
            raise ContractViolation(f"negatives must be >= 1, got {self.negatives}")
        if self.time_negatives < 0:
            raise ContractViolation(f"time_negatives must be >= 0, got {self.time_negatives}")
        if not 0 < self.threshold < 1:
            raise ContractViolation(f"threshold must be in (0, 1), got {self.threshold}")


@dataclasses.dataclass
class Verdict:
    seq_index: int
    timestamp: float
    template_id: int
    probabilities: dict[int, float]
    decision: str = NORMAL
    trigger_hop: Optional[int] = None
    label: Optional[str] = None

    @property
    def is_anomaly(self) -> bool:
        return self.decision == ANOMALY


@dataclasses.dataclass
class EpochMetrics:
    epoch: int
    loss: float
    pos_accuracy: float
    neg_accuracy: float
    pos_mean_prob: float
    neg_mean_prob: float
    batches: int


class LinkPredictor:
    """Two-layer perceptron giving the logit of a directed edge.

    The input is ``[z_i || z_j]``, optionally followed by the standardized
    features of the edge being scored. The output layer starts at zero, so
    every edge scores 0.5 before training.
    """

    def __init__(
        self,
        store: ParamStore,
        emb_dim: int,
        edge_dim: int,
        hidden: int,
        rng: np.random.Generator,
        use_edge_features: bool = True,
    ):
        self.store = store
        self.emb_dim = emb_dim
        self.edge_dim = edge_dim if use_edge_features else 0
        self.hidden = Linear(store, "head.hidden", 2 * emb_dim + self.edge_dim, hidden, rng)
        self.out = Linear(store, "head.out", hidden, 1, rng, zero_init=True)

    def fit_scaler(self, features: np.ndarray) -> None:
        """Record statistics of the continuous columns of training edge features."""
        if not self.edge_dim:
            return
        x = self._transform(features)
        cols = list(SCALED_COLUMNS)
        mean = np.zeros(self.edge_dim)
        std = np.ones(self.edge_dim)
        if len(x):
            mean[cols] = x[:, cols].mean(axis=0)
            std[cols] = x[:, cols].std(axis=0)
        self.store.set_buffer("head.scale.mean", mean)
        self.store.set_buffer("head.scale.std", np.where(std > 1e-8, std, 1.0))

    @staticmethod
    def _transform(features: np.ndarray) -> np.ndarray:
        x = np.array(features, dtype=np.float64)
        x[:, CF] = np.log(x[:, CF] + CF_FLOOR)
        return x

    def _scaled(self, features: np.ndarray) -> np.ndarray:
        x = self._transform(features)
        buffers = self.store.buffers
        if "head.scale.mean" in buffers:
            x = (x - buffers["head.scale.mean"]) / buffers["head.scale.std"]
        return x

    def forward(self, z_i, z_j, features=None):
        parts = [z_i, z_j]
        if self.edge_dim:
            if features is None:
                raise ContractViolation("this link head needs the scored edges' features")
            parts.append(self._scaled(features))
        hid, c_hid = self.hidden.forward(np.concatenate(parts, axis=1))
        act = np.maximum(hid, 0.0)
        logit, c_out = self.out.forward(act)
        return logit[:, 0], (hid, c_hid, c_out)

    def backward(self, dlogit, cache, grads):
        hid, c_hid, c_out = cache
        dact = self.out.backward(dlogit[:, None], c_out, grads)
        dx = self.hidden.backward(dact * (hid > 0), c_hid, grads)
        d = self.emb_dim
        return dx[:, :d], dx[:, d : 2 * d]


def predict_link(z_i, z_j, head: LinkPredictor, features=None) -> np.ndarray:
    """Probability that each ``z_i -> z_j`` edge exists."""
    z_i = np.atleast_2d(z_i)
    z_j = np.atleast_2d(z_j)
    if features is not None:
        features = np.atleast_2d(features)
    logit, _ = head.forward(z_i, z_j, features)
    return sigmoid(logit)


def sample_negatives(
    positives: dict[str, np.ndarray],
    num_nodes: int,
    k: int,
    rng: np.random.Generator,
    builder: Optional[FeatureBuilder] = None,
) -> dict[str, np.ndarray]:
    """Corrupt the destination of every positive edge ``k`` times.

    The replacement destination is uniform over the known nodes other than
    the true one. Source, time, hop and interval are kept. When ``builder``
    is given the features are recomputed for the corrupted pairs.
    """
    n = len(positives["src"])
    empty = {key: val[:0] for key, val in positives.items()}
    if num_nodes < 2:
        logger.warning("only %d known node(s), skipping negative sampling", num_nodes)
        return empty
    if n == 0:
        return empty

    rep = {key: np.repeat(val, k, axis=0) for key, val in positives.items()}
    draw = rng.integers(0, num_nodes - 1, size=n * k)
    rep["dst"] = draw + (draw >= rep["dst"])
    if builder is not None:
        rep["features"] = builder.batch(rep["src"], rep["dst"], rep["interval"], rep["hop"])
    return rep


def iter_batches(events: Sequence[GraphEvent], batch_size: int) -> Iterator[list[GraphEvent]]:
    """Split a stream into batches of about ``batch_size`` edge events.

    A batch only closes at a change of ``seq_index`` so that all edges into
    one log event are scored against the same memory.
    """
    batch, n_edges, last_seq = [], 0, None
    for event in events:
        if n_edges >= batch_size and event.seq_index != last_seq:
            yield batch
            batch, n_edges = [], 0
        batch.append(event)
        if event.is_edge:
            n_edges += 1
            last_seq = event.seq_index
    if batch:
        yield batch


class Detector:
    """Link model, memory and feature builder for one run.

    Parameters
    ----------
    builder : FeatureBuilder
        Embeddings, levels and co-occurrence table of the run.
    known_templates : int
        Number of templates that exist at training time; memory starts with
        this many rows.
    model_config, train_config : optional
        Architecture and training settings.
    """

    def __init__(
        self,
        builder: FeatureBuilder,
        known_templates: int,
        model_config: Optional[ModelConfig] = None,
        train_config: Optional[TrainConfig] = None,
    ):
        self.model_config = model_config or ModelConfig()
        self.train_config = train_config or TrainConfig()
        if tuple(builder.hops) != self.train_config.hop_set:
            raise ContractViolation(
                f"feature builder hops {builder.hops} differ from {self.train_config.hop_set}"
            )
        mc, tc = self.model_config, self.train_config
        if builder.embeddings.shape[1] != mc.memory_dim:
            raise ContractViolation(
                f"embeddings have dim {builder.embeddings.shape[1]}, memory dim is {mc.memory_dim}"
            )
        self.builder = builder
        self.known_templates = known_templates
        rng = np.random.default_rng(tc.seed)
        self.store = ParamStore()
        self.tgn = TGN(
            self.store,
            memory_dim=mc.memory_dim,
            feature_dim=builder.width,
            rng=rng,
            time_dim=mc.time_dim,
            heads=mc.heads,
            neighbors=mc.neighbors,
            embedding=mc.embedding,
            aggregator=mc.aggregator,
        )
        self.head = LinkPredictor(
            self.store,
            mc.memory_dim,
            builder.width,
            mc.head_hidden,
            rng,
            use_edge_features=mc.head_edge_features,
        )
        self.sample_rng = np.random.default_rng([tc.seed, 1])
        self.interval_scale = {h: 1.0 for h in tc.hop_set}
        self._last_update = None
        self.reset_memory()

    @property
    def memory(self):
        return self.tgn.memory

    def reset_memory(self) -> None:
        templates = [_TemplateRef(i) for i in range(self.known_templates)]
        self.tgn.memory = init_memory(
            templates,
            self.builder.embeddings,
            feature_dim=self.builder.width,
            capacity=self.model_config.neighbors,
            semantic_init=self.model_config.semantic_init,
        )
        self._last_update = None

    def _add_unseen(self, events: Sequence[GraphEvent]) -> None:
        mem = self.memory
        for event in events:
            if event.is_edge:
                continue
            while mem.size <= event.dst:
                node = mem.size
                if node >= len(self.builder.embeddings):
                    raise ContractViolation(f"no embedding for unseen template {node}")
                mem.current_time = max(mem.current_time, event.timestamp)
                mem.add_node(self.builder.embeddings[node])
                logger.debug("added unseen template %d at t=%s", node, event.timestamp)

    def _score(self, src, dst, t, features):
        n = len(src)
        z, emb_cache = self.tgn.embed(np.concatenate([src, dst]), np.concatenate([t, t]))
        logit, head_cache = self.head.forward(z[:n], z[n:], features)
        return logit, (emb_cache, head_cache)

    def _time_negatives(self, pos: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        reps = self.train_config.time_negatives
        keep = pos["hop"] >= 1
        if reps == 0 or not keep.any():
            return {key: val[:0] for key, val in pos.items()}
        sel = {key: np.repeat(val[keep], reps, axis=0) for key, val in pos.items()}
        lo, hi = np.log(TIME_NEGATIVE_FACTOR[0]), np.log(TIME_NEGATIVE_FACTOR[1])
        factor = np.exp(self.sample_rng.uniform(lo, hi, size=len(sel["src"])))
        floor = np.array([self.interval_scale[int(h)] for h in sel["hop"]])
        stretched = factor * np.maximum(sel["interval"], floor)
        sel["interval"] = stretched
        sel["features"] = self.builder.batch(
            sel["src"], sel["dst"], stretched, sel["hop"], dst_levels=self._dst_levels(sel)
        )
        return sel

    def _dst_levels(self, edges: dict[str, np.ndarray]) -> np.ndarray:
        """Level of the log event each edge ends at."""
        if self.builder.switches.use_ll and len(edges["src"]):
            return np.argmax(edges["features"][:, LL_START:HOP_START], axis=1)
        return self.builder.levels[edges["dst"]]

    def _trainable(self, pos: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        severe = self.train_config.severe_level
        if severe is None or len(pos["src"]) == 0:
            return pos
        keep = self._dst_levels(pos) < LogLevel[severe]
        if not keep.all():
            logger.debug("left %d edge(s) into severe events out of the loss", int((~keep).sum()))
        return {key: val[keep] for key, val in pos.items()}

    def _level_negatives(self, pos: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Copies of positive edges whose destination level is raised to a severe one."""
        tc = self.train_config
        if tc.level_negatives == 0 or tc.severe_level is None or not self.builder.switches.use_ll:
            return {key: val[:0] for key, val in pos.items()}
        sel = {key: np.repeat(val, tc.level_negatives, axis=0) for key, val in pos.items()}
        severe = [int(lv) for lv in LogLevel if lv >= LogLevel[tc.severe_level]]
        levels = self.sample_rng.choice(severe, size=len(sel["src"]))
        sel["features"] = self.builder.batch(
            sel["src"], sel["dst"], sel["interval"], sel["hop"], dst_levels=levels
        )
        return sel

    def _fit_statistics(self, events: Sequence[GraphEvent]) -> None:
        edges = edge_arrays(events)
        self.head.fit_scaler(edges["features"])
        for h in self.train_config.hop_set:
            iv = edges["interval"][(edges["hop"] == h) & (edges["interval"] > 0)]
            self.interval_scale[h] = float(np.median(iv)) if len(iv) else 1.0

    def train_batch(self, batch: Sequence[GraphEvent]) -> tuple[float, np.ndarray, np.ndarray]:
        """One optimizer step on one batch, then its memory updates.

        Returns
        -------
        tuple
            Summed loss, positive probabilities and negative probabilities.
        """
        tc = self.train_config
        self._add_unseen(batch)
        pos = self._trainable(edge_arrays(batch))
        if len(pos["src"]) == 0:
            self._last_update = self.tgn.process_events(batch, keep_cache=True) or self._last_update
            return 0.0, np.zeros(0), np.zeros(0)

        neg = sample_negatives(pos, self.memory.size, tc.negatives, self.sample_rng, self.builder)
        parts = [pos, neg, self._time_negatives(pos), self._level_negatives(pos)]
        cols = {key: np.concatenate([p[key] for p in parts]) for key in ("src", "dst", "t", "features")}
        n_pos = len(pos["src"])
        labels = np.zeros(len(cols["src"]))
        labels[:n_pos] = 1.0
        weights = np.ones(len(labels))
        weights[:n_pos] = tc.positive_weight

        logit, (emb_cache, head_cache) = self._score(cols["src"], cols["dst"], cols["t"], cols["features"])
        prob = sigmoid(logit)
        loss, dlogit = bce_loss(prob, labels)
        total = float(loss.sum())
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss in batch covering seq_index {pos['seq'].min()}..{pos['seq'].max()}"
            )

        grads: dict[str, np.ndarray] = {}
        dz_i, dz_j = self.head.backward(dlogit * weights / weights.sum(), head_cache, grads)
        dmem = self.tgn.embed_backward(np.concatenate([dz_i, dz_j]), emb_cache, grads)
        if self._last_update is not None:
            self.tgn.memory_update_backward(dmem, self._last_update, grads)
        adam_step(self.store, grads, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)

        self._last_update = self.tgn.process_events(batch, keep_cache=True)
        return total, prob[:n_pos], prob[n_pos:]

    def train_epoch(self, events: Sequence[GraphEvent], epoch: int = 0) -> EpochMetrics:
        self.reset_memory()
        tau = self.train_config.threshold
        loss_sum, n_items, n_batches = 0.0, 0, 0
        pos_probs, neg_probs = [], []
        for batch in iter_batches(events, self.train_config.batch_size):
            loss, p_pos, p_neg = self.train_batch(batch)
            loss_sum += loss
            n_items += len(p_pos) + len(p_neg)
            pos_probs.append(p_pos)
            neg_probs.append(p_neg)
            n_batches += 1
        p_pos = np.concatenate(pos_probs) if pos_probs else np.zeros(0)
        p_neg = np.concatenate(neg_probs) if neg_probs else np.zeros(0)
        return EpochMetrics(
            epoch=epoch,
            loss=loss_sum / n_items if n_items else 0.0,
            pos_accuracy=float(np.mean(p_pos >= tau)) if len(p_pos) else 0.0,
            neg_accuracy=float(np.mean(p_neg < tau)) if len(p_neg) else 0.0,
            pos_mean_prob=float(p_pos.mean()) if len(p_pos) else 0.0,
            neg_mean_prob=float(p_neg.mean()) if len(p_neg) else 0.0,
            batches=n_batches,
        )

    def fit(self, events: Sequence[GraphEvent], epochs: Optional[int] = None) -> list[EpochMetrics]:
        """Train for ``epochs`` passes, restarting memory each pass.

        Memory after the last pass reflects the whole training stream and is
        what detection continues from.
        """
        self._fit_statistics(events)
        history = []
        for epoch in range(epochs if epochs is not None else self.train_config.epochs):
            metrics = train_epoch(events, self, epoch=epoch)
            logger.info(
                "epoch %d: loss=%.4f pos_acc=%.3f neg_acc=%.3f pos_p=%.3f neg_p=%.3f",
                epoch,
                metrics.loss,
                metrics.pos_accuracy,
                metrics.neg_accuracy,
                metrics.pos_mean_prob,
                metrics.neg_mean_prob,
            )
            history.append(metrics)
        return history

    def detect(self, events: Sequence[GraphEvent], threshold: Optional[float] = None) -> list[Verdict]:
        """Score every edge into every log event and decide per event."""
        tau = self.train_config.threshold if threshold is None else threshold
        probs: dict[int, dict[int, float]] = {}
        meta: dict[int, tuple[float, int]] = {}
        for batch in iter_batches(events, self.train_config.batch_size):
            self._add_unseen(batch)
            edges = edge_arrays(batch)
            if len(edges["src"]):
                logit, _ = self._score(edges["src"], edges["dst"], edges["t"], edges["features"])
                p = sigmoid(logit)
                for i, seq in enumerate(edges["seq"]):
                    seq = int(seq)
                    probs.setdefault(seq, {})[int(edges["hop"][i])] = float(p[i])
                    meta[seq] = (float(edges["t"][i]), int(edges["dst"][i]))
            self.tgn.process_events(batch)
        verdicts = [
            decide(seq, meta[seq][0], meta[seq][1], probs[seq], tau) for seq in sorted(probs)
        ]
        n_anom = sum(v.is_anomaly for v in verdicts)
        logger.info("scored %d events, %d anomalous at threshold %s", len(verdicts), n_anom, tau)
        return verdicts

    def save(self, path: str) -> None:
        self.store.save(
            path,
            meta={
                "model": dataclasses.asdict(self.model_config),
                "train": dataclasses.asdict(self.train_config),
                "known_templates": self.known_templates,
                "interval_scale": {str(h): v for h, v in self.interval_scale.items()},
            },
        )

    @classmethod
    def load(cls, path: str, builder: FeatureBuilder) -> "Detector":
        store, meta = ParamStore.load(path)
        model_config = ModelConfig(**meta["model"])
        train_config = TrainConfig(**meta["train"])
        det = cls(builder, meta["known_templates"], model_config, train_config)
        det.store.load_state(store)
        det.interval_scale = {int(h): float(v) for h, v in meta["interval_scale"].items()}
        return det


@dataclasses.dataclass
class _TemplateRef:
    id: int


def decide(
    seq_index: int,
    timestamp: float,
    template_id: int,
    probabilities: dict[int, float],
    threshold: float,
) -> Verdict:
    """Anomaly iff some hop's probability is below ``threshold``."""
    low = [(p, h) for h, p in probabilities.items() if p < threshold]
    trigger = min(low)[1] if low else None
    return Verdict(
        seq_index=seq_index,
        timestamp=timestamp,
        template_id=template_id,
        probabilities=dict(sorted(probabilities.items())),
        decision=ANOMALY if low else NORMAL,
        trigger_hop=trigger,
    )


def train_epoch(events: Sequence[GraphEvent], model: Detector, epoch: int = 0) -> EpochMetrics:
    return model.train_epoch(events, epoch=epoch)


def detect(
    events: Sequence[GraphEvent], model: Detector, threshold: Optional[float] = None
) -> list[Verdict]:
    return model.detect(events, threshold)


def write_verdicts(verdicts: Sequence[Verdict], hop_set: Sequence[int], path: str) -> None:
    rows = []
    for v in verdicts:
        row = {"seq_index": v.seq_index, "timestamp": v.timestamp, "template_id": v.template_id}
        for h in hop_set:
            row[f"p_h{h}"] = v.probabilities.get(h, float("nan"))
        row["decision"] = v.decision
        row["trigger_hop"] = "" if v.trigger_hop is None else v.trigger_hop
        row["label"] = v.label or ""
        rows.append(row)
    columns = (
        ["seq_index", "timestamp", "template_id"]
        + [f"p_h{h}" for h in hop_set]
        + ["decision", "trigger_hop", "label"]
    )
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)


def read_verdicts(path: str) -> list[Verdict]:
    df = pd.read_csv(
        path,
        float_precision="round_trip",
        dtype={"decision": str, "trigger_hop": str, "label": str},
        keep_default_na=False,
    )
    hop_cols = [c for c in df.columns if c.startswith("p_h")]
    out = []
    for row in df.to_dict("records"):
        probs = {
            int(c[3:]): float(row[c]) for c in hop_cols if row[c] != "" and not pd.isna(row[c])
        }
        out.append(
            Verdict(
                seq_index=int(row["seq_index"]),
                timestamp=float(row["timestamp"]),
                template_id=int(row["template_id"]),
                probabilities=probs,
                decision=row["decision"],
                trigger_hop=int(row["trigger_hop"]) if row["trigger_hop"] else None,
                label=row["label"] or None,
            )
        )
    return out
