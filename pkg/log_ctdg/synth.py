"""Labeled synthetic logs from a sparse Markov chain with injected faults.

Normal traffic walks a first-order chain over INFO-style templates with
exponential inter-arrival times. Anomalies are injected as episodes:

``transition``
    one event whose template the chain never produces after the current one.
``gap``
    the chain's normal next event, delayed by ``gap_factor`` times the usual
    interval.
``burst``
    a run of ERROR/FATAL templates, after which the system logs the recovery
    template (template 0) and the chain resumes from there.

Only the injected events are labeled anomalous.
"""

import dataclasses
import logging
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

ANOMALY_KINDS = ("transition", "gap", "burst")
LABEL_TAGS = {"transition": "TRANSITION", "gap": "GAP", "burst": "BURST"}

_PREFIXES = ("node", "disk", "link", "pool", "task", "page", "port", "lock", "file", "user", "job", "queue")
_SUFFIXES = ("mgr", "agent", "ctl", "svc", "proxy")
_VERBS = ("started", "completed", "synced", "updated", "opened", "closed", "received", "sent", "allocated", "released", "scheduled", "resumed")
_OBJECTS = ("request", "block", "segment", "buffer", "channel", "record", "snapshot", "lease", "frame", "batch")
_ERROR_PHRASES = (
    ("ERROR", "error reading block {n}"),
    ("FATAL", "fatal fault at {h}"),
    ("ERROR", "failed to mount volume {n}"),
    ("ERROR", "checksum error in segment {n} at {h}"),
    ("FATAL", "fatal timeout on link {ip}"),
    ("ERROR", "failure while flushing cache {n}"),
)


@dataclasses.dataclass
class SynthSpec:
    n_templates: int = 30
    n_events: int = 50_000
    anomaly_rate: float = 0.01
    mix: dict[str, float] = dataclasses.field(
        default_factory=lambda: {"transition": 1.0, "gap": 1.0, "burst": 1.0}
    )
    mean_interval: float = 1.0
    gap_factor: float = 100.0
    max_burst: int = 3
    successors: int = 4
    error_templates: Optional[int] = None
    start_time: float = 0.0

    def validate(self) -> None:
        if self.n_templates < 5:
            raise ValueError(f"n_templates must be >= 5, got {self.n_templates}")
        if not 0 < self.anomaly_rate <= 0.2:
            raise ValueError(f"anomaly_rate must be in (0, 0.2], got {self.anomaly_rate}")
        unknown = set(self.mix) - set(ANOMALY_KINDS)
        if unknown:
            raise ValueError(f"unknown anomaly kinds: {sorted(unknown)}")
        if any(w < 0 for w in self.mix.values()) or sum(self.mix.values()) <= 0:
            raise ValueError("anomaly mix weights must be non-negative and not all zero")
        if self.max_burst < 1 or self.successors < 1:
            raise ValueError("max_burst and successors must be >= 1")
        if self.mean_interval <= 0 or self.gap_factor <= 1:
            raise ValueError("mean_interval must be > 0 and gap_factor > 1")
        if self.n_error_templates >= self.n_templates - 2:
            raise ValueError("too many error templates for n_templates")

    @property
    def n_error_templates(self) -> int:
        if self.error_templates is not None:
            return self.error_templates
        return max(1, self.n_templates // 6)


@dataclasses.dataclass
class SynthCorpus:
    lines: list[str]
    template_ids: list[int]
    labels: list[str]
    kinds: list[Optional[str]]
    chain: np.ndarray
    templates: list[str]
    levels: list[str]

    @property
    def n_anomalies(self) -> int:
        return sum(label != "-" for label in self.labels)

    def kind_counts(self) -> dict[str, int]:
        return {k: sum(x == k for x in self.kinds) for k in ANOMALY_KINDS}


def _name(i: int) -> str:
    base = _PREFIXES[i % len(_PREFIXES)] + _SUFFIXES[(i // len(_PREFIXES)) % len(_SUFFIXES)]
    extra = i // (len(_PREFIXES) * len(_SUFFIXES))
    while extra:
        extra, r = divmod(extra - 1, 26)
        base += chr(ord("a") + r)
    return base


def _template_texts(n_normal: int, n_error: int) -> tuple[list[str], list[str]]:
    bodies = ("id {n}", "at {h} count {n}", "from {ip}")
    texts, levels = [], []
    for i in range(n_normal):
        verb = _VERBS[i % len(_VERBS)]
        obj = _OBJECTS[(i * 7) % len(_OBJECTS)]
        texts.append(f"{_name(i)} {verb} {obj} {bodies[i % len(bodies)]}")
        levels.append("DEBUG" if i % 8 == 3 else "WARN" if i % 8 == 5 else "INFO")
    for j in range(n_error):
        level, phrase = _ERROR_PHRASES[j % len(_ERROR_PHRASES)]
        texts.append(f"{_name(n_normal + j)} {phrase}")
        levels.append(level)
    return texts, levels


def _markov_chain(n: int, successors: int, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic matrix; row i has ``successors`` non-zeros including i+1 mod n."""
    k = min(successors, n - 1)
    chain = np.zeros((n, n))
    for i in range(n):
        ring = (i + 1) % n
        others = [j for j in range(n) if j not in (i, ring)]
        picked = [ring] + list(rng.choice(others, size=k - 1, replace=False))
        chain[i, picked] = rng.dirichlet(np.full(k, 2.0))
    return chain


def _plan_episodes(spec: SynthSpec, n_anom: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    kinds = [k for k in ANOMALY_KINDS if spec.mix.get(k, 0) > 0]
    weights = np.array([spec.mix[k] for k in kinds], dtype=np.float64)
    weights /= weights.sum()
    episodes, remaining = [], n_anom
    while remaining > 0:
        kind = kinds[rng.choice(len(kinds), p=weights)]
        length = 1
        if kind == "burst":
            length = min(int(rng.integers(2, max(2, spec.max_burst) + 1)), remaining)
        episodes.append((kind, length))
        remaining -= length
    return episodes


def generate(spec: SynthSpec, seed: int = 0) -> SynthCorpus:
    """Build a labeled corpus in memory.

    Raises
    ------
    ValueError
        If ``spec`` is invalid or the anomalies cannot be spread out with at
        least two normal events between episodes.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n_error = spec.n_error_templates
    n_normal = spec.n_templates - n_error
    texts, levels = _template_texts(n_normal, n_error)
    chain = _markov_chain(n_normal, spec.successors, rng)

    n_anom = int(round(spec.anomaly_rate * spec.n_events))
    episodes = _plan_episodes(spec, n_anom, rng)
    n_recovery = sum(kind == "burst" for kind, _ in episodes)
    n_filler = spec.n_events - n_anom - n_recovery
    n_eps = len(episodes)
    slots = n_filler - 2 - 2 * max(n_eps - 1, 0)
    if n_eps and slots < n_eps:
        raise ValueError(
            f"cannot place {n_eps} anomaly episodes among {spec.n_events} events"
        )
    after = {}
    if n_eps:
        picks = np.sort(rng.choice(slots, size=n_eps, replace=False))
        after = {int(p) + 2 * i: episodes[i] for i, p in enumerate(picks)}

    def params() -> dict:
        return {
            "n": int(rng.integers(0, 100_000)),
            "h": f"0x{int(rng.integers(0, 2**32)):08x}",
            "ip": ".".join(str(int(x)) for x in rng.integers(0, 256, size=4)),
        }

    lines, ids, labels, kinds = [], [], [], []
    t = spec.start_time

    def emit(tid: int, dt: float, kind: Optional[str]) -> None:
        nonlocal t
        t += dt
        label = "-" if kind is None else LABEL_TAGS[kind]
        content = texts[tid].format(**params())
        lines.append(f"{label} {t:.6f} {levels[tid]} {content}")
        ids.append(tid)
        labels.append(label)
        kinds.append(kind)

    def interval() -> float:
        return float(rng.exponential(spec.mean_interval))

    def step(state: int) -> int:
        return int(rng.choice(n_normal, p=chain[state]))

    state = int(rng.integers(n_normal))
    emit(state, interval(), None)
    for j in range(n_filler):
        if j > 0:
            state = step(state)
            emit(state, interval(), None)
        if j not in after:
            continue
        kind, length = after[j]
        if kind == "transition":
            forbidden = np.flatnonzero(chain[state] == 0)
            state = int(rng.choice(forbidden))
            emit(state, interval(), kind)
        elif kind == "gap":
            state = step(state)
            emit(state, spec.gap_factor * max(interval(), spec.mean_interval), kind)
        else:
            for _ in range(length):
                emit(n_normal + int(rng.integers(n_error)), interval(), kind)
            state = 0
            emit(state, interval(), None)

    logger.info(
        "generated %d events with %d anomalies in %d episodes", len(lines), n_anom, n_eps
    )
    return SynthCorpus(lines, ids, labels, kinds, chain, texts, levels)


def synth_generate(spec: SynthSpec, seed: int, path: str) -> SynthCorpus:
    """Generate a corpus and write it to ``path`` in the ``synthetic`` format."""
    corpus = generate(spec, seed)
    with open(path, "w", encoding="utf-8", newline="\n") as fp:
        fp.write("\n".join(corpus.lines))
        fp.write("\n")
    return corpus
