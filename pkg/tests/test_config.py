"""Config files, key mapping, and overrides."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.config import (
    KEY_TO_FIELD,
    TrainConfig,
    config_from_mapping,
    config_to_mapping,
    parse_config_text,
    read_config_file,
    write_config_file,
)
from resflow.errors import ConfigError


class TestParsing:
    def test_basic_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.lr = 0.01\n# comment\nestimator.kind = biased\n\n")
        mapping = read_config_file(path)
        assert mapping == {"train.lr": "0.01", "estimator.kind": "biased"}

    def test_missing_file_names_path(self, tmp_path):
        missing = tmp_path / "nope.cfg"
        with pytest.raises(ConfigError, match="nope.cfg"):
            read_config_file(missing)

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="line"):
            parse_config_text("this is not a key value pair", source="line")

    def test_inline_comment_stripped(self):
        assert parse_config_text("train.steps = 7 # short") == {"train.steps": "7"}


class TestMapping:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr == 1e-3
        assert cfg.weight_decay == 5e-4
        assert cfg.polyak_decay == 0.999
        assert cfg.batch_size == 512
        assert cfg.lipschitz_coeff == 0.98
        assert cfg.q == 0.5
        assert cfg.n_exact == 2
        assert cfg.adam_beta2 == 0.99

    def test_round_trip_through_mapping(self):
        cfg = TrainConfig(lr=0.02, dataset="rings", blocks=3)
        mapping = config_to_mapping(cfg)
        cfg2 = config_from_mapping(mapping)
        assert cfg2 == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(steps=17, q=0.25)
        path = tmp_path / "cfg.txt"
        write_config_file(cfg, path)
        assert config_from_mapping(read_config_file(path)) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            config_from_mapping({"train.velocity": "3"})

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            config_from_mapping({"train.steps": "many"})

    def test_bad_estimator_kind_rejected(self):
        with pytest.raises(ConfigError):
            config_from_mapping({"estimator.kind": "magic"})

    def test_every_field_has_a_key(self):
        import dataclasses

        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        assert set(KEY_TO_FIELD.values()) == fields

    @given(st.floats(1e-6, 1.0), st.integers(1, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_numeric_round_trip(self, lr, steps):
        cfg = config_from_mapping({"train.lr": repr(lr), "train.steps": str(steps)})
        assert cfg.lr == lr
        assert cfg.steps == steps
