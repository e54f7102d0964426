import dataclasses
import itertools
import logging
from collections.abc import Iterator, Sequence
from typing import Optional, TypeVar, Union

from . import json
from .errors import ContractViolation
from .log_parser import ANOMALY, FormatSpec, LogRecord, ReadStats, iter_records
from .os_utils import open_text

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclasses.dataclass
class MetricReport:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    def summary(self) -> str:
        return (
            f"events: {self.tp + self.fp + self.fn + self.tn}\n"
            f"TP={self.tp} FP={self.fp} FN={self.fn} TN={self.tn}\n"
            f"precision: {self.precision:.4f}\n"
            f"recall:    {self.recall:.4f}\n"
            f"f1:        {self.f1:.4f}\n"
        )


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> MetricReport:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return MetricReport(tp, fp, fn, tn, precision, recall, f1)


def _is_anomalous(label: Union[str, bool]) -> bool:
    if isinstance(label, str):
        return label == ANOMALY
    return bool(label)


def evaluate(verdicts: Sequence, labels: Sequence[Union[str, bool]]) -> MetricReport:
    """Event-level confusion counts and precision, recall and F1.

    Parameters
    ----------
    verdicts : sequence of Verdict
        One per scored event.
    labels : sequence
        Ground truth aligned with ``verdicts``, either ``"normal"`` /
        ``"anomaly"`` strings or booleans.

    Returns
    -------
    MetricReport
        Precision and recall are 0 when their denominators are 0, and F1 is
        0 when both are.
    """
    if len(verdicts) != len(labels):
        raise ContractViolation(
            f"{len(verdicts)} verdicts but {len(labels)} labels"
        )
    tp = fp = fn = tn = 0
    for verdict, label in zip(verdicts, labels):
        predicted = verdict.is_anomaly
        actual = _is_anomalous(label)
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(tp, fp, fn, tn)


def chronological_split(records: Sequence[T], ratio: float = 0.5) -> tuple[list[T], list[T]]:
    """First ``floor(ratio * n)`` records by time for training, the rest for test.

    Records are sorted stably by ``timestamp`` first, so records that already
    arrive in order keep it.
    """
    if not 0 < ratio < 1:
        raise ContractViolation(f"split ratio must be in (0, 1), got {ratio}")
    ordered = sorted(records, key=lambda r: r.timestamp)
    n_train = int(ratio * len(ordered))
    return ordered[:n_train], ordered[n_train:]


def ingest_dataset(
    path: str,
    format_spec: Union[str, FormatSpec],
    head_limit: Optional[int] = None,
    stats: Optional[ReadStats] = None,
) -> Iterator[LogRecord]:
    """Stream LogRecords from a plain or gzip log file.

    Parameters
    ----------
    path : str
        The log file. A ``.gz`` suffix selects gzip decoding.
    format_spec : str or FormatSpec
        A preset name (``bgl``, ``thunderbird``, ``spirit``, ``synthetic``),
        a ``<Field>`` format string or a FormatSpec.
    head_limit : int, optional
        Keep only the first ``head_limit`` accepted records.
    stats : ReadStats, optional
        Receives accepted and rejected counts.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist. Raised on the first ``next``.
    """
    if not isinstance(format_spec, FormatSpec):
        format_spec = FormatSpec.from_name(format_spec)
    stats = stats if stats is not None else ReadStats()
    with open_text(path) as fp:
        records = iter_records(fp, format_spec, stats)
        if head_limit is not None:
            records = itertools.islice(records, head_limit)
        yield from records
    if stats.rejected:
        logger.warning(
            "%s: rejected %d of %d lines", path, stats.rejected, stats.rejected + stats.accepted
        )


def write_report(report: MetricReport, json_path: str, text_path: str) -> None:
    json.dump_path(dataclasses.asdict(report), json_path)
    with open(text_path, "w") as fp:
        fp.write(report.summary())


def read_report(json_path: str) -> MetricReport:
    return MetricReport(**json.load_path(json_path))
