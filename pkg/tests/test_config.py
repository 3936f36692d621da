import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from defined.cli import PANELS, bundled_config
from defined.config import (
    ConfigError,
    ExperimentConfig,
    ModelConfig,
    SimConfig,
    TrainConfig,
    config_hash,
    load_experiment,
    parse_experiment,
)


def _base():
    return bundled_config("fig4a").model_dump(mode="json")


def test_defaults():
    sim, model, tr = SimConfig(), ModelConfig(), TrainConfig()
    assert (sim.scheme, sim.T, sim.snr_db_min, sim.snr_db_max) == ("QPSK", 31, -3, 3)
    assert (model.d_e, model.n_layers, model.n_heads, model.context_window) == (64, 8, 8, 61)
    assert (tr.batch_size, tr.alpha, tr.feedback) == (512, 0.7, "greedy")


@pytest.mark.parametrize("panel", PANELS)
def test_bundled_panels_parse(panel):
    cfg = bundled_config(panel)
    assert cfg.model.class_count == cfg.sim.class_count
    assert cfg.eval.n_prompts == 80_000 and cfg.train.batch_size == 512
    assert cfg.sim.snr_db_min == cfg.sim.snr_db_max


def test_unknown_key_rejected_with_path():
    data = _base()
    data["train"]["learning_rate"] = 1e-3
    with pytest.raises(ConfigError) as err:
        parse_experiment(data)
    assert err.value.path == "train.learning_rate"
    data = _base()
    data["colour"] = "red"
    with pytest.raises(ConfigError):
        parse_experiment(data)


@given(st.floats(allow_nan=False).filter(lambda a: not 0 <= a <= 1))
def test_alpha_outside_unit_interval(alpha):
    data = _base()
    data["train"]["alpha"] = alpha
    with pytest.raises(ConfigError) as err:
        parse_experiment(data)
    assert "train.alpha" in str(err.value)


@pytest.mark.parametrize(
    "section,key,value",
    [
        ("sim", "scheme", "8PSK"),
        ("sim", "T", 1),
        ("sim", "snr_db_min", 40.0),
        ("model", "class_count", 16),
        ("model", "T_max", 10),
        ("train", "k_pilots", 31),
        ("eval", "k_pilots", 0),
        ("train", "feedback", "beam"),
        ("model", "n_heads", 7),
    ],
)
def test_invalid_values(section, key, value):
    data = _base()
    data[section][key] = value
    with pytest.raises(ConfigError):
        parse_experiment(data)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_experiment(bad)


def test_roundtrip_and_hash(tmp_path):
    cfg = bundled_config("fig4f")
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.model_dump(mode="json")))
    back = load_experiment(p)
    assert back == cfg
    assert config_hash(back.model) == config_hash(cfg.model)
    assert config_hash(cfg.model) != config_hash(cfg.model.model_copy(update={"d_e": 32}))
    assert isinstance(back, ExperimentConfig)


def test_eval_sim_pins_snr():
    cfg = parse_experiment({**_base(), "eval": {"snr_db": 7.0}})
    es = cfg.eval_sim()
    assert es.snr_db_min == es.snr_db_max == 7.0 and es.seed == cfg.eval.seed
