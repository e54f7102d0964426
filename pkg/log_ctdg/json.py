"""JSON helpers for run artifacts.

Everything the pipeline writes (manifests, configs, reports, checkpoint
metadata) goes through here so keys are sorted and the output is stable
across runs.
"""

import dataclasses
import logging
import os
from typing import IO, Any

import numpy as np
import rapidjson as json

logger = logging.getLogger(__name__)

INDENT = 1


def default(obj: Any) -> Any:
    """Serialize the numpy values and dataclasses that turn up in run summaries."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    raise TypeError(repr(obj) + " is not JSON serializable")


def dumps(obj: Any, **kwargs: Any) -> str:
    """Returns a JSON string from a Python object."""
    return json.dumps(obj, sort_keys=True, default=default, indent=INDENT, **kwargs)


def dump(obj: Any, fp: IO[str], **kwargs: Any) -> None:
    json.dump(obj, fp, sort_keys=True, default=default, indent=INDENT, **kwargs)


def loads(s: str, **kwargs: Any) -> Any:
    return json.loads(s, **kwargs)


def load(fp: IO[str], **kwargs: Any) -> Any:
    return json.load(fp, **kwargs)


def dump_path(obj: Any, path: str) -> None:
    with open(path, "w") as fp:
        dump(obj, fp)
        fp.write("\n")
    logger.debug("wrote %s", path)


def load_path(path: str) -> Any:
    if not os.path.exists(path):
        raise FileNotFoundError(f"JSON file does not exist: {path}")
    with open(path) as fp:
        return load(fp)
