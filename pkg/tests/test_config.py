import pytest

from stsens.config import ConfigError, RunConfig, parse_text, parse_values
from stsens.data import SynthConfig


class TestParsing:
    def test_comments_and_blank_lines(self):
        raw = parse_text("# header\nseed = 4  # trailing\n\nmodel.d_model=32\n")
        assert raw == {"seed": "4", "model.d_model": "32"}

    def test_missing_equals(self, tmp_path):
        with pytest.raises(ConfigError, match=":2:"):
            parse_text("seed=1\njunk\n", "f.cfg")

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="model.width"):
            parse_values({"model.width": "3"})

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="seed"):
            parse_values({"seed": "abc"})

    def test_lists(self):
        v = parse_values({"morris.deltas": "0.001, 0.005", "grid.d_model": "16,32", "synth.feature_coeffs": "a:1,b:2"})
        assert v["morris.deltas"] == [0.001, 0.005]
        assert v["grid.d_model"] == [16, 32]
        assert v["synth.feature_coeffs"] == {"a": 1.0, "b": 2.0}


class TestRunConfig:
    def test_from_file_and_override(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("seed=2\ntrain.max_epochs=3\nsynth.counties=5\n")
        cfg = RunConfig.from_file(f)
        assert cfg.seed == 2 and cfg.train_config().max_epochs == 3
        assert cfg.train_config().seed == 2
        cfg.override("seed", "9")
        assert cfg.seed == 9 and cfg.raw["seed"] == "9"
        assert cfg.synth_config().seed == 9 and cfg.synth_config().counties == 5

    def test_synth_seed_explicit(self):
        cfg = RunConfig(parse_values({"seed": "1", "synth.seed": "7"}))
        assert cfg.synth_config().seed == 7

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            RunConfig.from_file(tmp_path / "nope.cfg")

    def test_get_unknown_key(self):
        with pytest.raises(ConfigError):
            RunConfig().get("bogus")

    def test_primary_split(self):
        sp = RunConfig().split_spec([], "primary")
        assert str(sp.test[0]) == "2021-12-15"

    def test_custom_split_needs_all_dates(self):
        cfg = RunConfig(parse_values({"split.train_start": "2020-01-01"}))
        with pytest.raises(ConfigError, match="missing"):
            cfg.split_spec([], "custom")

    def test_fraction_split(self):
        from stsens.data import generate_synthetic

        dates = generate_synthetic(SynthConfig(counties=1, days=100)).dates
        sp = RunConfig(parse_values({"split.train_fraction": "0.6", "split.val_fraction": "0.2"})).split_spec(dates)
        assert sp.train[1] == dates[59] and sp.validation[1] == dates[79]

    def test_bad_split_kind(self):
        with pytest.raises(ConfigError):
            RunConfig().split_spec([], "random")

    def test_model_and_grid_sections(self):
        cfg = RunConfig(parse_values({"model.d_model": "8", "model.checkpoint": "x", "grid.n_heads": "1,2"}))
        assert cfg.model_kwargs() == {"d_model": 8}
        assert cfg.grid() == {"n_heads": [1, 2]}
