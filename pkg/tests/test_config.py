import pytest
from conftest import BGL_SAMPLE, CONFIG_SAMPLE

from log_ctdg.config import (
    RunConfig,
    config_from_dict,
    env_overrides,
    load_config,
)
from log_ctdg.errors import ContractViolation


def test_defaults():
    config = load_config(environ={})
    assert config == RunConfig()
    assert config.train.hop_set == (0, 1)
    assert config.threshold == config.train.threshold == 0.5
    assert config.model.memory_dim == 64
    assert config.parser.depth == 4


def test_load_yaml_sample():
    config = load_config(CONFIG_SAMPLE, environ={})
    assert config.seed == 3
    assert config.train.seed == 3
    assert config.out_dir == "runs/bgl"
    assert config.data.split_ratio == 0.6
    assert config.train.hop_set == (0, 1, 2)
    assert config.train.epochs == 2
    # YAML 1.1 gives the string "1e-3" here
    assert config.train.learning_rate == 0.001
    assert isinstance(config.train.learning_rate, float)
    assert config.graph.use_ti is False
    assert config.graph.use_ss is True
    assert config.model.memory_dim == 16
    assert config.threshold == 0.4


def test_environment_overrides_file():
    environ = {
        "LOG_CTDG_TRAIN__EPOCHS": "7",
        "LOG_CTDG_TRAIN__HOP_SET": "[0, 3]",
        "LOG_CTDG_SEED": "11",
        "LOG_CTDG_DETECT__THRESHOLD": "",
        "OTHER_TRAIN__EPOCHS": "1",
    }
    config = load_config(CONFIG_SAMPLE, environ=environ)
    assert config.train.epochs == 7
    assert config.train.hop_set == (0, 3)
    assert config.seed == config.train.seed == 11
    # an empty value unsets the key
    assert config.detect.threshold is None
    assert config.model.memory_dim == 16


def test_env_overrides_single_key():
    environ = {"LOG_CTDG_MODEL__HEADS": "4", "PATH": "/usr/bin"}
    assert env_overrides(environ) == {"model": {"heads": 4}}
    assert load_config(environ=environ).model.heads == 4
    assert env_overrides({}) == {}


def test_env_overrides_default_to_os_environ(monkeypatch):
    monkeypatch.setenv("LOG_CTDG_MODEL__HEADS", "4")
    assert load_config().model.heads == 4


def test_explicit_overrides_win():
    overrides = {
        "seed": 5,
        "train": {"hop_set": [1], "epochs": None},
        "detect": {"threshold": None},
        "data": {"path": None},
    }
    config = load_config(CONFIG_SAMPLE, overrides, environ={"LOG_CTDG_SEED": "11"})
    assert config.seed == 5
    assert config.train.hop_set == (1,)
    assert config.train.epochs == 2
    assert config.threshold == 0.4
    assert config.data.path == "tests/data/bgl_sample.log"


def test_train_seed_follows_run_seed():
    config = config_from_dict({"seed": 9, "train": {"seed": 1}})
    assert config.train.seed == 9


@pytest.mark.parametrize(
    "values",
    [
        {"trian": {}},
        {"train": {"epoch": 3}},
        {"model": {"dims": 3}},
        {"model": [16]},
        {"train": {"learning_rate": "fast"}},
        {"train": {"hop_set": []}},
    ],
)
def test_bad_config_values(values):
    with pytest.raises(ContractViolation):
        config_from_dict(values)


def test_float_fields_accept_ints_and_strings():
    config = config_from_dict({"data": {"split_ratio": "0.7"}, "train": {"eps": 0}})
    assert config.data.split_ratio == 0.7
    assert config.train.eps == 0.0
    assert isinstance(config.train.eps, float)


def test_validate(tmp_path):
    RunConfig().validate()
    with pytest.raises(ContractViolation):
        config_from_dict({"data": {"split_ratio": 1.0}}).validate()
    with pytest.raises(ContractViolation):
        config_from_dict({"data": {"head_limit": 0}}).validate()
    with pytest.raises(ContractViolation):
        config_from_dict({"embedding": {"provider": "bert"}}).validate()
    with pytest.raises(ContractViolation):
        config_from_dict({"embedding": {"provider": "external"}}).validate()
    with pytest.raises(FileNotFoundError):
        config_from_dict(
            {"embedding": {"provider": "external", "path": str(tmp_path / "nope.bin")}}
        ).validate()
    with pytest.raises(ContractViolation):
        config_from_dict({"detect": {"threshold": 1.5}}).validate()
    with pytest.raises(ContractViolation):
        RunConfig().validate(need_data=True)
    with pytest.raises(FileNotFoundError):
        config_from_dict({"data": {"path": str(tmp_path / "missing.log")}}).validate(
            need_data=True
        )
    config_from_dict({"data": {"path": BGL_SAMPLE}}).validate(need_data=True)


def test_digest():
    a = config_from_dict({"train": {"epochs": 3}})
    b = config_from_dict({"train": {"epochs": 3}})
    c = config_from_dict({"train": {"epochs": 4}})
    assert a.digest() == b.digest()
    assert len(a.digest()) == 16
    assert a.digest() != c.digest()
    assert a.digest("data", "parser") == c.digest("data", "parser")
    assert a.digest("train") != c.digest("train")


def test_write_and_reload_json(tmp_path):
    config = load_config(CONFIG_SAMPLE, environ={})
    path = str(tmp_path / "config.json")
    config.write(path)
    assert load_config(path, environ={}) == config


def test_config_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ContractViolation):
        load_config(str(bad), environ={})
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert load_config(str(empty), environ={}) == RunConfig()
