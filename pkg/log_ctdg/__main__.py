#!/usr/bin/env python
"""Command line interface for the log anomaly detection pipeline.

Imports of the package modules are kept inside the subcommands so the CLI
starts quickly and ``--help`` never pays for numpy and pandas.

Every command prints a JSON blob with its result (or the error and
traceback) to stdout. Logs go to stderr.
"""

import os
import sys
import traceback
from typing import Optional

import click

log_level_option = click.option(
    "--log-level",
    default="info",
    type=click.Choice(["debug", "info", "warning", "error", "critical"]),
    help="The log level to use.",
)
config_option = click.option(
    "--config",
    "config_path",
    default=None,
    type=click.Path(dir_okay=False),
    help="YAML run configuration. Defaults to <out-dir>/config.json when present.",
)
seed_option = click.option("--seed", default=None, type=int, help="The run seed.")
out_dir_option = click.option(
    "--out-dir", default=None, type=str, help="Directory for all stage outputs."
)


def _parse_hops(ctx, param, value):
    if value is None:
        return None
    try:
        return [int(h) for h in value.split(",") if h.strip()]
    except ValueError:
        raise click.BadParameter("expected comma separated integers, e.g. 0,1") from None


hops_option = click.option(
    "--hops", default=None, callback=_parse_hops, help="Hop scales, e.g. 0,1."
)
threshold_option = click.option(
    "--threshold", default=None, type=float, help="Anomaly threshold on link probability."
)
head_limit_option = click.option(
    "--head-limit", default=None, type=int, help="Only use the first N log messages."
)
data_option = click.option("--data", default=None, type=str, help="Input log file.")
format_option = click.option(
    "--format",
    "log_format",
    default=None,
    type=str,
    help="Log format preset (bgl, thunderbird, spirit, synthetic) or a <Field> format string.",
)


def _stage_options(func):
    for option in (
        log_level_option,
        config_option,
        seed_option,
        out_dir_option,
        hops_option,
        threshold_option,
        head_limit_option,
        data_option,
        format_option,
    ):
        func = option(func)
    return func


def _load_config(
    config_path: Optional[str],
    *,
    seed=None,
    out_dir=None,
    hops=None,
    threshold=None,
    head_limit=None,
    data=None,
    log_format=None,
):
    from log_ctdg.config import load_config

    overrides = {
        "seed": seed,
        "out_dir": out_dir,
        "data": {"path": data, "format": log_format, "head_limit": head_limit},
        "train": {"hop_set": hops},
        "detect": {"threshold": threshold},
    }
    config = load_config(config_path, overrides)
    if config_path is None:
        saved = os.path.join(config.out_dir, "config.json")
        if os.path.exists(saved):
            config = load_config(saved, overrides)
    return config


def _run_task(func, *, log_level, **kwargs):
    from log_ctdg import setup_logging
    from log_ctdg.json import dumps

    setup_logging(log_level)
    ret = {"command": func.__name__.lstrip("_")}
    try:
        ret["data"] = func(**kwargs)
    except Exception as e:
        ret["data"] = None
        ret["error"] = repr(e)
        ret["traceback"] = traceback.format_exc()
        print(dumps(ret))
        raise click.ClickException(str(e)) from e
    print(dumps(ret))
    return ret["data"]


def _stage(stage, config_path, **overrides):
    from log_ctdg.pipeline import prepare_data, run_stage

    config = _load_config(config_path, **overrides)
    if stage == "parse":
        prepare_data(config)
    os.makedirs(config.out_dir, exist_ok=True)
    config.write(os.path.join(config.out_dir, "config.json"))
    return run_stage(config, stage)


def _pipeline(config_path, force, **overrides):
    from log_ctdg.pipeline import run_pipeline

    config = _load_config(config_path, **overrides)
    return run_pipeline(config, force=force)


def _synth(config_path, output, seed, n_events, n_templates, anomaly_rate, mix):
    from log_ctdg.config import load_config
    from log_ctdg.synth import synth_generate

    overrides = {
        "seed": seed,
        "synth": {
            "n_events": n_events,
            "n_templates": n_templates,
            "anomaly_rate": anomaly_rate,
        },
    }
    config = load_config(config_path, overrides)
    if mix is not None:
        # kinds left out of --mix are switched off, not kept at their default
        config.synth.mix = mix
    corpus = synth_generate(config.synth, config.seed, output)
    return {
        "path": output,
        "events": len(corpus.lines),
        "anomalies": corpus.n_anomalies,
        "kinds": corpus.kind_counts(),
    }


@click.group()
def main():
    pass


def _stage_command(stage: str, help_text: str):
    @main.command(name=stage, help=help_text)
    @_stage_options
    def _command(log_level, config_path, **overrides):
        def _run():
            return _stage(stage, config_path, **overrides)

        _run.__name__ = stage
        return _run_task(_run, log_level=log_level)

    _command.__name__ = f"main_{stage}"
    return _command


main_parse = _stage_command("parse", "Ingest, split and mine templates.")
main_embed = _stage_command("embed", "Embed the mined templates.")
main_build = _stage_command("build", "Build the multi-scale event streams.")
main_train = _stage_command("train", "Train the link model and save checkpoint and memory.")
main_detect = _stage_command("detect", "Score the test stream and write verdicts.")
main_eval = _stage_command("eval", "Compute precision, recall and F1 from verdicts.")


@main.command(name="pipeline")
@_stage_options
@click.option("--force", is_flag=True, help="Rerun stages whose outputs are current.")
def main_pipeline(log_level, config_path, force, **overrides):
    """Run every stage, resuming from outputs already in --out-dir."""
    return _run_task(_pipeline, log_level=log_level, config_path=config_path, force=force, **overrides)


def _parse_mix(ctx, param, value):
    if value is None:
        return None
    mix = {}
    for part in value.split(","):
        kind, _, weight = part.partition("=")
        try:
            mix[kind.strip()] = float(weight) if weight else 1.0
        except ValueError:
            raise click.BadParameter(f"bad weight in {part!r}") from None
    return mix


@main.command(name="synth")
@log_level_option
@config_option
@seed_option
@click.option("--output", "-o", required=True, type=str, help="Log file to write.")
@click.option("--n-events", default=None, type=int, help="Number of log lines.")
@click.option("--n-templates", default=None, type=int, help="Number of templates.")
@click.option("--anomaly-rate", default=None, type=float, help="Fraction of anomalous lines.")
@click.option(
    "--mix",
    default=None,
    callback=_parse_mix,
    help="Anomaly kinds and weights, e.g. transition=1,gap=1,burst=1.",
)
def main_synth(log_level, config_path, seed, output, n_events, n_templates, anomaly_rate, mix):
    """Write a labeled synthetic log with injected anomalies."""
    return _run_task(
        _synth,
        log_level=log_level,
        config_path=config_path,
        output=output,
        seed=seed,
        n_events=n_events,
        n_templates=n_templates,
        anomaly_rate=anomaly_rate,
        mix=mix,
    )


if __name__ == "__main__":
    sys.exit(main())
