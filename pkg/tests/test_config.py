from pathlib import Path

import pytest

from src.config import build_config, config_hash, dump_config, load_config, override
from src.errors import ConfigError

TOML = """
seed = 5

[dataset]
counts = { train = 2, test = 1 }

[room]
max_order = 2
absorption_model = "sabine"

[provider]
kind = "oracle"
"""


@pytest.fixture
def toml_path(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(TOML, encoding="utf-8")
    return path


def test_defaults():
    config = build_config()
    assert config.seed == 0
    assert config.jobs == 1
    assert config.provider.kind == "none"
    assert config.classifier.temperature == 0.2
    assert config.dataset.counts == {"train": 100000, "valid": 10000, "test": 10000}
    assert config.room.rt60_range == (0.3, 0.6)


def test_load_toml(toml_path):
    config = load_config(toml_path)
    assert config.seed == 5
    assert config.dataset.counts == {"train": 2, "test": 1}
    assert config.room.max_order == 2
    assert config.room.absorption_model == "sabine"
    assert config.provider.kind == "oracle"


def test_environment_beats_toml(toml_path, monkeypatch):
    monkeypatch.setenv("RELCUE_SEED", "9")
    monkeypatch.setenv("RELCUE_PROVIDER__NOISE_SIGMA", "0.25")
    config = load_config(toml_path)
    assert config.seed == 9
    assert config.provider.noise_sigma == 0.25
    assert config.provider.kind == "oracle"


def test_override_dotted_keys(toml_path):
    config = override(load_config(toml_path), seed=None, **{"provider.kind": "file", "prompts.filter_similar": False})
    assert config.seed == 5
    assert config.provider.kind == "file"
    assert config.prompts.filter_similar is False


def test_override_validates():
    with pytest.raises(ConfigError) as excinfo:
        override(build_config(), jobs=0)
    assert excinfo.value.field == "jobs"


@pytest.mark.parametrize("data,field", [
    ({"classifier": {"temperature": 2.0}}, "classifier.temperature"),
    ({"separation": {"leak_db": -1.0}}, "separation.leak_db"),
    ({"dataset": {"counts": {"train": -1}}}, "dataset.counts"),
    ({"bogus": 1}, "bogus"),
])
def test_invalid_values_name_the_field(data, field):
    with pytest.raises(ConfigError) as excinfo:
        build_config(data)
    assert excinfo.value.field == field
    assert field in str(excinfo.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(tmp_path / "missing.toml")
    assert excinfo.value.field == "--config"

    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_dump_and_reload(tmp_path):
    config = build_config({"seed": 3, "separation": {"leak_db": 10.0}, "cues": {"thresholds": {"age": 5.0}}})
    path = dump_config(config, tmp_path / "effective.toml")
    reloaded = load_config(path)
    assert reloaded == config
    assert config_hash(reloaded) == config_hash(config)


def test_config_hash_tracks_changes():
    assert config_hash(build_config({"seed": 1})) != config_hash(build_config({"seed": 2}))
    assert config_hash(build_config()) == config_hash(build_config())


def test_example_config_matches_defaults():
    example = Path(__file__).resolve().parent.parent / "config.example.toml"
    assert load_config(example) == build_config()
