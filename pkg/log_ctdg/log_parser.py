"""Template mining with a fixed-depth prefix tree.

Raw lines are split into columns with a ``<Field>`` format string, the
message content is masked and tokenized, and each token list is routed
through a tree keyed by token count and leading tokens to a small group of
candidate templates. A record joins the most similar candidate when the
similarity reaches the threshold, otherwise it starts a new template.
"""

import dataclasses
import logging
import re
from collections.abc import Iterable, Iterator, Sequence
from datetime import datetime
from typing import Optional

import pandas as pd

from .errors import ContractViolation
from .template_embed import WILDCARD, LogLevel, infer_log_level, parse_level

logger = logging.getLogger(__name__)

NORMAL = "normal"
ANOMALY = "anomaly"

FORMAT_PRESETS = {
    "bgl": "<Label> <Timestamp> <Date> <Node> <Time> <NodeRepeat> <Type> <Component> <Level> <Content>",
    "thunderbird": "<Label> <Timestamp> <Date> <User> <Month> <Day> <Time> <Location> <Content>",
    "spirit": "<Label> <Timestamp> <Date> <User> <Month> <Day> <Time> <Location> <Content>",
    "synthetic": "<Label> <Timestamp> <Level> <Content>",
}

# applied in order, each match becomes a wildcard
MASKS = (
    # dotted IPv4 with optional port
    re.compile(r"(?<![\d.])\d{1,3}(?:\.\d{1,3}){3}(?::\d+)?(?![\d.])"),
    # hex literals
    re.compile(r"(?<!\w)0[xX][0-9a-fA-F]+(?!\w)"),
    # paths containing a digit
    re.compile(r"(?<![\w/])/[\w./-]*\d[\w./-]*"),
    # pure integers
    re.compile(r"(?<![\w.])[-+]?\d+(?![\w.])"),
)


class RejectedLine(ValueError):
    """A raw line that cannot become a LogRecord."""


@dataclasses.dataclass
class LogRecord:
    label: str
    timestamp: float
    level: Optional[LogLevel]
    content: list[str]
    line_no: int = -1

    @property
    def is_anomaly(self) -> bool:
        return self.label == ANOMALY


@dataclasses.dataclass
class FormatSpec:
    """Column layout of one dataset.

    ``log_format`` uses the ``<Field>`` convention. Fields named by
    ``label_field``, ``timestamp_field`` and ``content_field`` must be
    present; ``level_field`` is optional.
    """

    log_format: str
    label_field: str = "Label"
    timestamp_field: str = "Timestamp"
    content_field: str = "Content"
    level_field: Optional[str] = "Level"

    def __post_init__(self):
        self.headers, self.regex = generate_logformat_regex(self.log_format)
        for name in (self.label_field, self.timestamp_field, self.content_field):
            if name not in self.headers:
                raise ContractViolation(
                    f"log format {self.log_format!r} has no <{name}> field"
                )
        if self.level_field not in self.headers:
            self.level_field = None

    @classmethod
    def from_name(cls, name_or_format: str) -> "FormatSpec":
        return cls(FORMAT_PRESETS.get(name_or_format, name_or_format))


def generate_logformat_regex(log_format: str) -> tuple[list[str], re.Pattern]:
    """Compile a ``<Field> <Field> ...`` format into a named-group regex."""
    headers = []
    regex = ""
    for k, part in enumerate(re.split(r"(<[^<>]+>)", log_format)):
        if k % 2 == 0:
            regex += re.sub(" +", r"\\s+", re.escape(part).replace("\\ ", " "))
        else:
            header = part.strip("<>")
            regex += f"(?P<{header}>.*?)"
            headers.append(header)
    return headers, re.compile("^" + regex + "$")


def mask_content(content: str) -> str:
    for pattern in MASKS:
        content = pattern.sub(WILDCARD, content)
    return content


def _parse_timestamp(value: str) -> float:
    try:
        ts = float(value)
    except ValueError:
        try:
            ts = datetime.fromisoformat(value).timestamp()
        except ValueError:
            raise RejectedLine(f"malformed timestamp {value!r}") from None
    if not ts >= 0:
        raise RejectedLine(f"negative or NaN timestamp {value!r}")
    return ts


def tokenize(raw_line: str, format_spec: FormatSpec, line_no: int = -1) -> LogRecord:
    """Split one raw line into a LogRecord.

    Parameters
    ----------
    raw_line : str
        One line of the log file, trailing newline allowed.
    format_spec : FormatSpec
        Column layout of the dataset.
    line_no : int, optional
        Position of the line in its file, kept for diagnostics.

    Returns
    -------
    LogRecord
        The label is normal iff the label column is ``-``. Numbers, hex
        literals, IPv4 addresses and paths with digits in the content are
        replaced by ``<*>`` before splitting on whitespace.

    Raises
    ------
    RejectedLine
        If the line does not match the layout, the timestamp is malformed,
        or the content is empty.
    """
    line = raw_line.strip()
    if not line:
        raise RejectedLine("empty line")
    match = format_spec.regex.match(line)
    if match is None:
        raise RejectedLine("line does not match the log format")

    label = NORMAL if match.group(format_spec.label_field) == "-" else ANOMALY
    timestamp = _parse_timestamp(match.group(format_spec.timestamp_field))
    level = None
    if format_spec.level_field is not None:
        level = parse_level(match.group(format_spec.level_field))
    content = mask_content(match.group(format_spec.content_field)).split()
    if not content:
        raise RejectedLine("empty message content")
    return LogRecord(
        label=label, timestamp=timestamp, level=level, content=content, line_no=line_no
    )


@dataclasses.dataclass
class ReadStats:
    accepted: int = 0
    rejected: int = 0


def iter_records(
    lines: Iterable[str], format_spec: FormatSpec, stats: Optional[ReadStats] = None
) -> Iterator[LogRecord]:
    """Tokenize lines, skipping and counting the ones that are rejected."""
    stats = stats if stats is not None else ReadStats()
    for line_no, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = tokenize(line, format_spec, line_no=line_no)
        except RejectedLine as e:
            stats.rejected += 1
            logger.debug("rejected line %d: %s", line_no, e)
            continue
        stats.accepted += 1
        yield record


@dataclasses.dataclass
class Template:
    id: int
    tokens: list[str]
    occurrences: int = 0
    # most severe level carried by the template's records, if any had one
    observed_level: Optional[LogLevel] = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def level(self) -> LogLevel:
        if self.observed_level is not None:
            return self.observed_level
        return infer_log_level(self.text)

    @property
    def wildcard_count(self) -> int:
        return sum(tok == WILDCARD for tok in self.tokens)


def template_similarity(tokens_a: Sequence[str], tokens_b: Sequence[str]) -> float:
    """Fraction of positions whose tokens agree, a wildcard agreeing with anything."""
    if len(tokens_a) != len(tokens_b):
        raise ContractViolation(
            f"token counts differ: {len(tokens_a)} != {len(tokens_b)}"
        )
    if not tokens_a:
        return 1.0
    same = sum(
        a == b or a == WILDCARD or b == WILDCARD for a, b in zip(tokens_a, tokens_b)
    )
    return same / len(tokens_a)


def _has_digits(token: str) -> bool:
    return any(ch.isdigit() for ch in token)


class _Node:
    __slots__ = ("children", "template_ids")

    def __init__(self):
        self.children: dict[str, _Node] = {}
        self.template_ids: list[int] = []


class ParserState:
    """Prefix tree plus template store.

    Parameters
    ----------
    depth : int, optional
        Tree depth counting the root and the token-count layer, so
        ``depth - 2`` leading tokens select the leaf group.
    st : float, optional
        Similarity threshold in (0, 1).
    max_children : int, optional
        Maximum number of children of an internal node. Once reached, new
        tokens share the wildcard child.
    """

    def __init__(self, depth: int = 4, st: float = 0.5, max_children: int = 100):
        if depth < 3:
            raise ContractViolation(f"depth must be >= 3, got {depth}")
        if not 0 < st < 1:
            raise ContractViolation(f"st must be in (0, 1), got {st}")
        if max_children < 1:
            raise ContractViolation(f"max_children must be >= 1, got {max_children}")
        self.depth = depth
        self.st = st
        self.max_children = max_children
        self.templates: list[Template] = []
        self._root: dict[int, _Node] = {}

    def __len__(self):
        return len(self.templates)

    @property
    def _prefix_len(self) -> int:
        return self.depth - 2

    def _find_leaf(self, tokens: Sequence[str]) -> Optional[_Node]:
        node = self._root.get(len(tokens))
        if node is None:
            return None
        for tok in tokens[: self._prefix_len]:
            if tok in node.children:
                node = node.children[tok]
            elif WILDCARD in node.children:
                node = node.children[WILDCARD]
            else:
                return None
        return node

    def _insert(self, template: Template) -> None:
        tokens = template.tokens
        node = self._root.setdefault(len(tokens), _Node())
        for tok in tokens[: self._prefix_len]:
            if tok in node.children:
                node = node.children[tok]
                continue
            if _has_digits(tok) or len(node.children) + 1 >= self.max_children:
                key = WILDCARD
            else:
                key = tok
            node = node.children.setdefault(key, _Node())
        node.template_ids.append(template.id)

    def _best_match(self, leaf: _Node, tokens: Sequence[str]) -> Optional[Template]:
        best, best_key = None, None
        for tid in leaf.template_ids:
            cand = self.templates[tid]
            sim = template_similarity(cand.tokens, tokens)
            # ties go to an exact copy, then to the more specific template
            key = (sim, list(cand.tokens) == list(tokens), -cand.wildcard_count)
            if sim >= self.st and (best_key is None or key > best_key):
                best, best_key = cand, key
        return best

    def match(self, tokens: Sequence[str]) -> Optional[int]:
        """Return the id of the template ``tokens`` would join, without mutating."""
        leaf = self._find_leaf(tokens)
        if leaf is None:
            return None
        best = self._best_match(leaf, tokens)
        return None if best is None else best.id

    def add_template(
        self,
        tokens: Sequence[str],
        occurrences: int = 0,
        observed_level: Optional[LogLevel] = None,
    ) -> Template:
        template = Template(
            id=len(self.templates),
            tokens=list(tokens),
            occurrences=occurrences,
            observed_level=observed_level,
        )
        self.templates.append(template)
        self._insert(template)
        return template


def parse_record(record: LogRecord, state: ParserState) -> tuple[int, list[str]]:
    """Assign a record to a template, creating or generalizing one as needed.

    Returns
    -------
    tuple
        The template id and the record tokens found at the template's
        wildcard positions.
    """
    tokens = record.content
    leaf = state._find_leaf(tokens)
    template = None if leaf is None else state._best_match(leaf, tokens)
    if template is None:
        template = state.add_template(tokens)
    else:
        template.tokens = [
            a if a == b else WILDCARD for a, b in zip(template.tokens, tokens)
        ]

    template.occurrences += 1
    if record.level is not None and (
        template.observed_level is None or record.level > template.observed_level
    ):
        template.observed_level = record.level

    params = [tok for tok, t in zip(tokens, template.tokens) if t == WILDCARD]
    return template.id, params


TEMPLATE_COLUMNS = ["EventId", "EventTemplate", "Occurrences", "LogLevel"]


def export_templates(state: ParserState, path: str) -> int:
    """Write the template store as CSV in id order and return the row count."""
    rows = [
        (t.id, t.text, t.occurrences, t.level.name) for t in state.templates
    ]
    pd.DataFrame(rows, columns=TEMPLATE_COLUMNS).to_csv(path, index=False)
    logger.info("wrote %d templates to %s", len(rows), path)
    return len(rows)


def import_templates(
    path: str, depth: int = 4, st: float = 0.5, max_children: int = 100
) -> ParserState:
    """Rebuild a ParserState from a file written by ``export_templates``."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    state = ParserState(depth=depth, st=st, max_children=max_children)
    for expected_id, row in enumerate(df.itertuples(index=False)):
        if int(row.EventId) != expected_id:
            raise ContractViolation(
                f"{path}: template ids must be contiguous, got {row.EventId} at row {expected_id}"
            )
        state.add_template(
            row.EventTemplate.split(),
            occurrences=int(row.Occurrences),
            observed_level=LogLevel[row.LogLevel],
        )
    return state


@dataclasses.dataclass
class StructuredEvent:
    index: int
    timestamp: float
    template_id: int
    label: str
    # level column of the record itself, when the format has one
    level: Optional[LogLevel] = None


EVENT_COLUMNS = ["index", "timestamp", "template_id", "label", "level"]


def write_structured_events(events: Sequence[StructuredEvent], path: str) -> None:
    rows = [
        (e.index, e.timestamp, e.template_id, e.label, "" if e.level is None else e.level.name)
        for e in events
    ]
    pd.DataFrame(rows, columns=EVENT_COLUMNS).to_csv(path, index=False)


def read_structured_events(path: str) -> list[StructuredEvent]:
    df = pd.read_csv(
        path,
        dtype={"index": "int64", "template_id": "int64", "label": str, "level": str},
        float_precision="round_trip",
        keep_default_na=False,
    )
    if "level" not in df.columns:
        df["level"] = ""
    return [
        StructuredEvent(int(idx), float(ts), int(tid), label, LogLevel[lv] if lv else None)
        for idx, ts, tid, label, lv in df[EVENT_COLUMNS].itertuples(index=False, name=None)
    ]
