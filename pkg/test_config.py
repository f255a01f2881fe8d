import pytest
import yaml

from app.config.settings import RunConfig, apply_overrides, load_run_config
from app.utils.errors import ConfigError


def test_defaults_without_file():
    config = load_run_config()
    assert config == RunConfig()
    assert config.graph.num_layers == 3
    assert config.graph.reg_weight == 1e-4
    assert config.graph.lr == 1e-3
    assert config.graph.recall_k == 20
    assert config.adapter.num_experts == 8
    assert config.adapter.dropout == 0.2
    assert config.adapter.gate_noise == 0.01
    assert config.lm.hidden == 128 and config.lm.num_layers == 4 and config.lm.max_context == 512
    assert config.decode.max_words == 50
    assert config.split.bins == 5


def test_cli_overrides_beat_the_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "graph": {"lr": 0.5, "dim": 16}}), encoding="utf-8")
    config = load_run_config(path, ["graph.lr=0.01", "decode.mode=sampled", "graph.betas=[0.8, 0.9]"])
    assert config.seed == 3
    assert config.graph.dim == 16
    assert config.graph.lr == 0.01
    assert config.graph.betas == [0.8, 0.9]
    assert config.decode.mode == "sampled"


def test_unknown_keys_are_rejected(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("graph:\n  learning_rate: 0.1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="invalid configuration"):
        load_run_config(path)


def test_out_of_range_values_are_rejected():
    with pytest.raises(ConfigError):
        load_run_config(overrides=["adapter.dropout=1.5"])
    with pytest.raises(ConfigError):
        load_run_config(overrides=["decode.mode=beam"])


def test_missing_or_non_mapping_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "absent.yaml")
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(path)


def test_malformed_override():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["graph.lr"])
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 1}, ["seed.value=2"])


def test_dump_round_trips(tmp_path):
    config = load_run_config(overrides=["seed=9", "ablation.injection=false"])
    path = config.dump(tmp_path / "out" / "run_config.yaml")
    assert load_run_config(path) == config
    assert not config.ablation.injection
