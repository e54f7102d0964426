import dataclasses
import logging

import numpy as np
import pytest
from conftest import BGL_SAMPLE

from log_ctdg.detector import ANOMALY, NORMAL, Verdict
from log_ctdg.errors import ContractViolation
from log_ctdg.harness import (
    MetricReport,
    chronological_split,
    evaluate,
    ingest_dataset,
    metrics_from_counts,
    read_report,
    write_report,
)
from log_ctdg.log_parser import ReadStats


def _verdicts(flags):
    return [
        Verdict(i, float(i), 0, {0: 0.1 if f else 0.9}, ANOMALY if f else NORMAL)
        for i, f in enumerate(flags)
    ]


@dataclasses.dataclass
class _Rec:
    timestamp: float
    name: str


def test_metrics_from_counts():
    r = metrics_from_counts(tp=2, fp=1, fn=1, tn=5)
    assert r.precision == pytest.approx(2 / 3)
    assert r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3)

    perfect = metrics_from_counts(4, 0, 0, 10)
    assert (perfect.precision, perfect.recall, perfect.f1) == (1.0, 1.0, 1.0)

    silent = metrics_from_counts(0, 0, 3, 10)
    assert (silent.precision, silent.recall, silent.f1) == (0.0, 0.0, 0.0)

    empty = metrics_from_counts(0, 0, 0, 0)
    assert empty.f1 == 0.0


def test_evaluate_counts():
    verdicts = _verdicts([True, True, False, False, True])
    labels = ["anomaly", "normal", "anomaly", "normal", "anomaly"]
    r = evaluate(verdicts, labels)
    assert (r.tp, r.fp, r.fn, r.tn) == (2, 1, 1, 1)
    assert evaluate(verdicts, [True, False, True, False, True]) == r


@pytest.mark.parametrize("seed", range(10))
def test_evaluate_matches_hand_computation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    predicted = rng.random(n) < rng.random()
    actual = rng.random(n) < rng.random()
    r = evaluate(_verdicts(predicted), ["anomaly" if a else "normal" for a in actual])

    tp = int((predicted & actual).sum())
    fp = int((predicted & ~actual).sum())
    fn = int((~predicted & actual).sum())
    tn = int((~predicted & ~actual).sum())
    p = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * rec / (p + rec) if p + rec else 0.0
    assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn)
    assert (r.precision, r.recall, r.f1) == (p, rec, f1)
    if tp:
        assert r.f1 == pytest.approx(2 / (1 / r.precision + 1 / r.recall))


def test_evaluate_length_mismatch():
    with pytest.raises(ContractViolation):
        evaluate(_verdicts([True]), ["anomaly", "normal"])


def test_chronological_split():
    records = [_Rec(float(t), str(i)) for i, t in enumerate([3, 1, 2, 2, 5, 4, 0])]
    train, test = chronological_split(records, 0.5)
    assert len(train) == 3
    assert len(test) == 4
    assert [r.timestamp for r in train + test] == [0, 1, 2, 2, 3, 4, 5]
    # ties keep their input order
    assert [r.name for r in train + test][2:4] == ["2", "3"]

    train, test = chronological_split(records[:3], 0.9)
    assert (len(train), len(test)) == (2, 1)
    for ratio in (0.0, 1.0, -0.5):
        with pytest.raises(ContractViolation):
            chronological_split(records, ratio)


def test_ingest_dataset(caplog):
    stats = ReadStats()
    with caplog.at_level(logging.WARNING, logger="log_ctdg.harness"):
        records = list(ingest_dataset(BGL_SAMPLE, "bgl", stats=stats))
    assert len(records) == 21
    assert stats.rejected == 2
    assert "rejected 2 of 23 lines" in caplog.text
    assert [r.timestamp for r in records] == sorted(r.timestamp for r in records)


def test_ingest_dataset_head_limit():
    records = list(ingest_dataset(BGL_SAMPLE, "bgl", head_limit=5))
    assert len(records) == 5
    full = list(ingest_dataset(BGL_SAMPLE, "bgl"))
    assert records == full[:5]


def test_ingest_dataset_format_string(tmp_path):
    path = tmp_path / "app.log"
    path.write_text("- 10 INFO job 1 started\nFAIL 12 ERROR job 1 crashed\n")
    records = list(ingest_dataset(str(path), "<Label> <Timestamp> <Level> <Content>"))
    assert [r.is_anomaly for r in records] == [False, True]
    assert records[1].content == ["job", "<*>", "crashed"]


def test_ingest_dataset_missing_file(tmp_path):
    records = ingest_dataset(str(tmp_path / "missing.log"), "bgl")
    with pytest.raises(FileNotFoundError):
        next(records)


def test_write_read_report(tmp_path):
    report = metrics_from_counts(3, 1, 2, 40)
    json_path = str(tmp_path / "report.json")
    text_path = str(tmp_path / "report.txt")
    write_report(report, json_path, text_path)
    assert read_report(json_path) == report
    text = (tmp_path / "report.txt").read_text()
    assert "TP=3 FP=1 FN=2 TN=40" in text
    assert f"f1:        {report.f1:.4f}" in text
    assert isinstance(read_report(json_path), MetricReport)
