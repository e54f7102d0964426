"""Stage functions and the end-to-end run.

Every stage reads the files written by the stages before it from
``config.out_dir`` and writes its own outputs plus a ``<stage>.done.json``
manifest. A stage whose manifest matches the current configuration and
whose outputs all exist is skipped, so an interrupted run resumes where it
stopped.
"""

import copy
import dataclasses
import logging
import os
from collections.abc import Sequence
from typing import Optional

import numpy as np
import pandas as pd

from . import json
from .config import RunConfig
from .ctdg import CooccurrenceTable, FeatureBuilder, build_events, read_events, write_events
from .detector import Detector, read_verdicts, write_verdicts
from .errors import ContractViolation, StageError
from .harness import chronological_split, evaluate, ingest_dataset, write_report
from .log_parser import (
    FormatSpec,
    ParserState,
    ReadStats,
    StructuredEvent,
    export_templates,
    import_templates,
    parse_record,
    read_structured_events,
    write_structured_events,
)
from .os_utils import ensure_dir
from .synth import synth_generate
from .template_embed import embed_template, load_embeddings, save_embeddings
from .tgn import MemoryState

logger = logging.getLogger(__name__)

TEMPLATES = "templates.csv"
EVENTS = "events.csv"
SPLIT = "split.json"
EMBEDDINGS = "embeddings.bin"
COOCCURRENCE = "cooccurrence.csv"
TRAIN_EVENTS = "train_events.csv"
TEST_EVENTS = "test_events.csv"
CHECKPOINT = "checkpoint.npz"
MEMORY = "memory.npz"
TRAIN_METRICS = "train_metrics.json"
VERDICTS = "verdicts.csv"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
SYNTHETIC_LOG = "synthetic.log"

ARTIFACTS = {
    "parse": (TEMPLATES, EVENTS, SPLIT),
    "embed": (EMBEDDINGS,),
    "build": (COOCCURRENCE, TRAIN_EVENTS, TEST_EVENTS),
    "train": (CHECKPOINT, MEMORY, TRAIN_METRICS),
    "detect": (VERDICTS,),
    "eval": (REPORT_JSON, REPORT_TEXT),
}
STAGES = tuple(ARTIFACTS)

# config keys each stage reads; a stage also depends on everything before it
_STAGE_KEYS = {
    "parse": ("data", "parser", "synth"),
    "embed": ("embedding", "model", "seed"),
    "build": ("graph", "train"),
    "train": (),
    "detect": ("detect",),
    "eval": (),
}


def _out(config: RunConfig, name: str) -> str:
    return os.path.join(config.out_dir, name)


def _stage_digest(config: RunConfig, stage: str) -> str:
    keys = []
    for name in STAGES[: STAGES.index(stage) + 1]:
        keys.extend(_STAGE_KEYS[name])
    return config.digest(*keys)


def _manifest_path(config: RunConfig, stage: str) -> str:
    return _out(config, f"{stage}.done.json")


def stage_is_done(config: RunConfig, stage: str) -> bool:
    path = _manifest_path(config, stage)
    if not os.path.exists(path):
        return False
    manifest = json.load_path(path)
    if manifest.get("digest") != _stage_digest(config, stage):
        return False
    return all(os.path.exists(_out(config, name)) for name in ARTIFACTS[stage])


def _write_manifest(config: RunConfig, stage: str, summary: dict) -> None:
    json.dump_path(
        {
            "stage": stage,
            "digest": _stage_digest(config, stage),
            "outputs": list(ARTIFACTS[stage]),
            "summary": summary,
        },
        _manifest_path(config, stage),
    )


def _require(config: RunConfig, *names: str) -> None:
    for name in names:
        path = _out(config, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing input from an earlier stage: {path}")


def parse_stage(config: RunConfig) -> dict:
    """Ingest the log, split it by time and mine templates."""
    config.validate(need_data=True)
    stats = ReadStats()
    records = list(
        ingest_dataset(
            config.data.path,
            FormatSpec.from_name(config.data.format),
            head_limit=config.data.head_limit,
            stats=stats,
        )
    )
    if not records:
        raise ContractViolation(f"{config.data.path}: no usable log records")
    train, test = chronological_split(records, config.data.split_ratio)

    # train first, so templates first seen in test get the highest ids
    state = ParserState(**dataclasses.asdict(config.parser))
    events = []
    for record in train:
        tid, _ = parse_record(record, state)
        events.append(StructuredEvent(len(events), record.timestamp, tid, record.label, record.level))
    n_train_templates = len(state)
    trained = copy.deepcopy(state.templates)
    for record in test:
        tid, _ = parse_record(record, state)
        events.append(StructuredEvent(len(events), record.timestamp, tid, record.label, record.level))
    # test records still join and count toward training templates, but the
    # stored text and level stay as the training half left them
    for template in trained:
        template.occurrences = state.templates[template.id].occurrences
    state.templates[:n_train_templates] = trained

    export_templates(state, _out(config, TEMPLATES))
    write_structured_events(events, _out(config, EVENTS))
    split = {
        "n_records": len(records),
        "n_train": len(train),
        "n_test": len(test),
        "n_templates": len(state),
        "n_train_templates": n_train_templates,
        "rejected": stats.rejected,
    }
    json.dump_path(split, _out(config, SPLIT))
    logger.info(
        "parsed %d records into %d templates (%d seen in training)",
        len(records),
        len(state),
        n_train_templates,
    )
    return split


def _parser_state(config: RunConfig) -> ParserState:
    return import_templates(_out(config, TEMPLATES), **dataclasses.asdict(config.parser))


def embed_stage(config: RunConfig) -> dict:
    """Embed every mined template and store the vectors by template text."""
    _require(config, TEMPLATES)
    config.validate()
    state = _parser_state(config)
    dim = config.model.memory_dim
    external = None
    if config.embedding.provider == "external":
        external = load_embeddings(config.embedding.path, dim=dim, seed=config.seed)
    vectors = {}
    for template in state.templates:
        vectors[template.text] = embed_template(
            template,
            config.embedding.provider,
            dim=dim,
            seed=config.seed,
            external=external,
        )
    save_embeddings(_out(config, EMBEDDINGS), vectors)
    return {"templates": len(state), "dim": dim, "provider": config.embedding.provider}


def _split(config: RunConfig) -> dict:
    _require(config, SPLIT)
    return json.load_path(_out(config, SPLIT))


def load_builder(config: RunConfig, table: Optional[CooccurrenceTable] = None) -> FeatureBuilder:
    """Feature builder from the saved templates, vectors and co-occurrences."""
    _require(config, TEMPLATES, EMBEDDINGS)
    state = _parser_state(config)
    vectors = load_embeddings(
        _out(config, EMBEDDINGS), dim=config.model.memory_dim, seed=config.seed
    )
    try:
        embeddings = np.stack([vectors[t.text] for t in state.templates])
    except KeyError as e:
        raise ContractViolation(f"no stored vector for template {e.args[0]!r}") from None
    if table is None:
        _require(config, COOCCURRENCE)
        table = CooccurrenceTable.from_frame(
            pd.read_csv(_out(config, COOCCURRENCE)), config.train.hop_set
        )
    return FeatureBuilder(
        embeddings,
        [t.level for t in state.templates],
        table,
        config.train.hop_set,
        config.graph,
    )


def build_stage(config: RunConfig) -> dict:
    """Build the training and test event streams."""
    _require(config, EVENTS)
    split = _split(config)
    events = read_structured_events(_out(config, EVENTS))
    n_train = split["n_train"]
    hops = config.train.hop_set

    table = CooccurrenceTable.from_sequence([e.template_id for e in events[:n_train]], hops)
    table.to_frame().to_csv(_out(config, COOCCURRENCE), index=False)
    builder = load_builder(config, table)

    sequence = [(e.template_id, e.timestamp, e.level) for e in events]
    train_events = build_events(sequence[:n_train], builder)
    # the test stream stands alone, no edge crosses the split
    test_events = build_events(sequence[n_train:], builder, start_index=n_train)
    n_tr = write_events(train_events, _out(config, TRAIN_EVENTS))
    n_te = write_events(test_events, _out(config, TEST_EVENTS))
    logger.info("built %d training and %d test graph events over hops %s", n_tr, n_te, hops)
    return {"train_events": n_tr, "test_events": n_te, "hops": list(hops)}


def train_stage(config: RunConfig) -> dict:
    """Fit the detector and save its checkpoint and memory."""
    _require(config, TRAIN_EVENTS)
    split = _split(config)
    builder = load_builder(config)
    events = read_events(_out(config, TRAIN_EVENTS))
    detector = Detector(builder, split["n_train_templates"], config.model, config.train)
    history = detector.fit(events)
    detector.save(_out(config, CHECKPOINT))
    detector.memory.save(_out(config, MEMORY))
    metrics = [dataclasses.asdict(m) for m in history]
    json.dump_path(metrics, _out(config, TRAIN_METRICS))
    return {"epochs": len(history), "final_loss": metrics[-1]["loss"] if metrics else None}


def detect_stage(config: RunConfig) -> dict:
    """Score the test stream from the trained memory and write verdicts."""
    _require(config, TEST_EVENTS, CHECKPOINT, MEMORY, EVENTS)
    builder = load_builder(config)
    detector = Detector.load(_out(config, CHECKPOINT), builder)
    detector.tgn.memory = MemoryState.load(_out(config, MEMORY))
    known = detector.memory.size

    verdicts = detector.detect(read_events(_out(config, TEST_EVENTS)), config.threshold)
    labels = {e.index: e.label for e in read_structured_events(_out(config, EVENTS))}
    for verdict in verdicts:
        verdict.label = labels.get(verdict.seq_index)
    write_verdicts(verdicts, config.train.hop_set, _out(config, VERDICTS))
    return {
        "verdicts": len(verdicts),
        "anomalies": sum(v.is_anomaly for v in verdicts),
        "unseen_templates": detector.memory.size - known,
    }


def eval_stage(config: RunConfig) -> dict:
    """Compare saved verdicts with their labels."""
    _require(config, VERDICTS)
    verdicts = read_verdicts(_out(config, VERDICTS))
    report = evaluate(verdicts, [v.label or "" for v in verdicts])
    write_report(report, _out(config, REPORT_JSON), _out(config, REPORT_TEXT))
    logger.info(
        "precision=%.4f recall=%.4f f1=%.4f", report.precision, report.recall, report.f1
    )
    return dataclasses.asdict(report)


STAGE_FUNCS = {
    "parse": parse_stage,
    "embed": embed_stage,
    "build": build_stage,
    "train": train_stage,
    "detect": detect_stage,
    "eval": eval_stage,
}


def run_stage(config: RunConfig, stage: str) -> dict:
    """Run one stage unconditionally and record its manifest.

    Raises
    ------
    StageError
        Wrapping whatever the stage raised. Outputs of earlier stages are
        left in place.
    """
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}, expected one of {STAGES}")
    ensure_dir(config.out_dir)
    logger.info("running stage %s in %s", stage, config.out_dir)
    try:
        summary = STAGE_FUNCS[stage](config)
    except Exception as e:
        raise StageError(
            error=f"stage {stage!r} failed: {e}",
            stage=stage,
            out_dir=config.out_dir,
            cause=e,
        ) from e
    _write_manifest(config, stage, summary)
    return summary


def prepare_data(config: RunConfig) -> None:
    """Generate the synthetic corpus when no input log is configured."""
    if config.data.path is not None:
        return
    path = _out(config, SYNTHETIC_LOG)
    manifest = _manifest_path(config, "synth")
    digest = config.digest("synth", "seed")
    current = os.path.exists(manifest) and json.load_path(manifest).get("digest") == digest
    if not (current and os.path.exists(path)):
        logger.info("no data.path given, generating a synthetic corpus at %s", path)
        corpus = synth_generate(config.synth, config.seed, path)
        json.dump_path(
            {
                "stage": "synth",
                "digest": digest,
                "outputs": [SYNTHETIC_LOG],
                "summary": {"events": len(corpus.lines), "anomalies": corpus.n_anomalies},
            },
            manifest,
        )
    config.data.path = path
    config.data.format = "synthetic"


def run_pipeline(
    config: RunConfig, force: bool = False, stages: Sequence[str] = STAGES
) -> dict:
    """Run parse, embed, build, train, detect and eval in order.

    Parameters
    ----------
    config : RunConfig
        The resolved run configuration. It is written to
        ``<out_dir>/config.json``.
    force : bool, optional
        Rerun stages even when their outputs are current.
    stages : sequence of str, optional
        Subset of stages to consider, in pipeline order.

    Returns
    -------
    dict
        Per-stage summaries, with skipped stages taken from their manifests.
    """
    ensure_dir(config.out_dir)
    prepare_data(config)
    config.validate()
    config.write(_out(config, "config.json"))

    summaries = {}
    # once a stage reruns, everything after it is stale
    rerun = force
    for stage in STAGES:
        if stage not in stages:
            continue
        if not rerun and stage_is_done(config, stage):
            logger.info("stage %s is up to date, skipping", stage)
            summaries[stage] = json.load_path(_manifest_path(config, stage))["summary"]
            continue
        summaries[stage] = run_stage(config, stage)
        rerun = True
    return summaries
