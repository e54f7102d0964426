import itertools

import numpy as np
import pytest

from log_ctdg.harness import ingest_dataset
from log_ctdg.log_parser import LogRecord, ParserState, mask_content, parse_record
from log_ctdg.synth import ANOMALY_KINDS, SynthSpec, generate, synth_generate


def _small(**kwargs):
    kwargs.setdefault("n_events", 2_000)
    kwargs.setdefault("anomaly_rate", 0.02)
    return SynthSpec(**kwargs)


def _episodes(corpus):
    """(start, end) index ranges of consecutive anomalous events."""
    out, pos = [], 0
    for is_anom, run in itertools.groupby(label != "-" for label in corpus.labels):
        n = len(list(run))
        if is_anom:
            out.append((pos, pos + n))
        pos += n
    return out


@pytest.mark.parametrize("seed", range(3))
def test_exact_counts(seed):
    spec = _small()
    corpus = generate(spec, seed)
    assert len(corpus.lines) == spec.n_events
    assert corpus.n_anomalies == round(spec.anomaly_rate * spec.n_events) == 40
    assert sum(corpus.kind_counts().values()) == 40
    assert set(corpus.kind_counts()) == set(ANOMALY_KINDS)


def test_same_seed_same_bytes(tmp_path):
    a, b, c = (str(tmp_path / name) for name in ("a.log", "b.log", "c.log"))
    synth_generate(_small(), 7, a)
    synth_generate(_small(), 7, b)
    synth_generate(_small(), 8, c)
    with open(a, "rb") as fa, open(b, "rb") as fb, open(c, "rb") as fc:
        first, second, other = fa.read(), fb.read(), fc.read()
    assert first == second
    assert first != other
    assert first.endswith(b"\n")


def test_file_reads_back_with_labels(tmp_path):
    path = str(tmp_path / "synthetic.log")
    corpus = synth_generate(_small(), 1, path)
    records = list(ingest_dataset(path, "synthetic"))
    assert len(records) == len(corpus.lines)
    assert [r.is_anomaly for r in records] == [label != "-" for label in corpus.labels]
    times = [r.timestamp for r in records]
    assert all(a <= b for a, b in zip(times, times[1:]))
    assert {r.level.name for r in records} <= {"DEBUG", "INFO", "WARN", "ERROR", "FATAL"}


def test_templates_are_recovered_by_the_parser():
    corpus = generate(_small(n_events=3_000), 2)
    state = ParserState()
    mined = {}
    for line, tid in zip(corpus.lines, corpus.template_ids):
        content = line.split(" ", 3)[3]
        record = LogRecord("-", 0.0, None, mask_content(content).split())
        got, _ = parse_record(record, state)
        assert mined.setdefault(tid, got) == got
    # one mined template per generator template
    assert len(set(mined.values())) == len(mined)


def test_anomalies_are_spread_out():
    corpus = generate(_small(n_events=5_000), 3)
    episodes = _episodes(corpus)
    for (_, end), (start, _) in zip(episodes, episodes[1:]):
        assert start - end >= 2
    assert episodes[0][0] >= 1


def test_anomaly_kinds_behave():
    spec = _small(n_events=5_000)
    corpus = generate(spec, 4)
    n_normal = spec.n_templates - spec.n_error_templates
    times = [float(line.split()[1]) for line in corpus.lines]
    for i, kind in enumerate(corpus.kinds):
        prev = corpus.template_ids[i - 1]
        tid = corpus.template_ids[i]
        if kind == "transition":
            assert tid < n_normal
            assert corpus.chain[prev, tid] == 0
        elif kind == "gap":
            assert corpus.chain[prev, tid] > 0
            assert times[i] - times[i - 1] >= spec.gap_factor * spec.mean_interval - 1e-6
        elif kind == "burst":
            assert tid >= n_normal
            assert corpus.levels[tid] in ("ERROR", "FATAL")
    for start, end in _episodes(corpus):
        if corpus.kinds[start] == "burst":
            # the last burst may be cut short by the anomaly budget
            assert 1 <= end - start <= spec.max_burst
            assert corpus.template_ids[end] == 0
            assert corpus.labels[end] == "-"


def test_normal_traffic_follows_the_chain():
    spec = SynthSpec(n_events=100_000)
    corpus = generate(spec, 5)
    n_normal = len(corpus.chain)
    counts = np.zeros((n_normal, n_normal))
    ids, labels = corpus.template_ids, corpus.labels
    for k in range(1, len(ids)):
        if labels[k - 1] == "-" and labels[k] == "-":
            counts[ids[k - 1], ids[k]] += 1

    # nothing outside the chain's support
    assert not counts[corpus.chain == 0].any()
    visits = counts.sum(axis=1)
    for i in np.flatnonzero(visits >= 1_000):
        tv = 0.5 * np.abs(counts[i] / visits[i] - corpus.chain[i]).sum()
        assert tv < 0.06


def test_chain_shape():
    corpus = generate(_small(), 0)
    chain = corpus.chain
    n = len(chain)
    np.testing.assert_allclose(chain.sum(axis=1), 1.0)
    assert not np.diag(chain).any()
    for i in range(n):
        assert chain[i, (i + 1) % n] > 0
        assert (chain[i] > 0).sum() == 4


def test_mix_selects_kinds():
    corpus = generate(_small(mix={"gap": 1.0}), 0)
    assert corpus.kind_counts() == {"transition": 0, "gap": 40, "burst": 0}
    assert {label for label in corpus.labels} == {"-", "GAP"}


@pytest.mark.parametrize(
    "kwargs",
    [
        {"n_templates": 4},
        {"anomaly_rate": 0.0},
        {"anomaly_rate": 0.5},
        {"mix": {"spike": 1.0}},
        {"mix": {"gap": 0.0}},
        {"gap_factor": 1.0},
        {"error_templates": 28},
    ],
)
def test_invalid_synth_spec(kwargs):
    with pytest.raises(ValueError):
        generate(_small(**kwargs), 0)


def test_infeasible_spacing():
    with pytest.raises(ValueError, match="cannot place"):
        generate(SynthSpec(n_events=3, anomaly_rate=0.2, mix={"transition": 1.0}), 0)
