import os

import numpy as np
import pytest

from log_ctdg.ctdg import CooccurrenceTable, FeatureBuilder
from log_ctdg.template_embed import LogLevel

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
BGL_SAMPLE = os.path.join(DATA_DIR, "bgl_sample.log")
CONFIG_SAMPLE = os.path.join(DATA_DIR, "config.yaml")

# full-corpus training runs take minutes on one core
RUN_SLOW = os.environ.get("RUN_SLOW_TESTS", "") not in ("", "0")

skipif_not_slow = pytest.mark.skipif(
    not RUN_SLOW, reason="set RUN_SLOW_TESTS=1 to run end-to-end acceptance runs"
)


def random_unit_rows(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def make_builder(ids, hop_set=(0, 1), n_templates=None, dim=8, seed=0, levels=None, switches=None):
    """Feature builder with random unit embeddings and a table fitted on ``ids``."""
    n = n_templates if n_templates is not None else max(ids) + 1
    embeddings = random_unit_rows(n, dim, seed)
    if levels is None:
        levels = [LogLevel.INFO] * n
    table = CooccurrenceTable.from_sequence(ids, hop_set)
    return FeatureBuilder(embeddings, levels, table, hop_set, switches)


def cyclic_sequence(n, n_templates=4, step=1.0, start=0):
    """``(template_id, timestamp)`` pairs cycling through the templates."""
    return [((start + k) % n_templates, k * step) for k in range(n)]


@pytest.fixture(autouse=True, scope="session")
def clear_log_ctdg_env():
    # run config must not pick up the developer's LOG_CTDG_* settings
    old = {k: v for k, v in os.environ.items() if k.startswith("LOG_CTDG_")}
    for k in old:
        del os.environ[k]

    yield

    for k in [k for k in os.environ if k.startswith("LOG_CTDG_")]:
        del os.environ[k]
    os.environ.update(old)


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "out"
    path.mkdir()
    return str(path)
