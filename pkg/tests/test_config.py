import pytest

from skillrec.config import DEFAULTS, RunConfig
from skillrec.errors import ConfigError
from skillrec.model import ModelConfig


class TestRunConfig:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.from_text("[train]\nlearning_rate = 0.1\n")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            RunConfig.from_text("[optim]\nlr = 0.1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            RunConfig.from_text("[model]\nd = big\n")

    def test_fingerprint_stable_under_reordering(self):
        a = RunConfig.from_text("[model]\nd = 32\nnum_layers = 2\n[train]\nseed = 4\n")
        b = RunConfig.from_text("[train]\nseed = 4\n[model]\nnum_layers = 2\nd = 32\n")
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != RunConfig().fingerprint()

    def test_text_round_trip(self):
        cfg = RunConfig({"recall": {"lambda": "0.35"}, "model": {"d": "64"}})
        assert RunConfig.from_text(cfg.to_text()) == cfg

    def test_overrides_win(self):
        cfg = RunConfig.from_text("[train]\nseed = 4\n", {"train": {"seed": "9"}})
        assert cfg.get("train", "seed") == 9

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.from_file(tmp_path / "nope.ini")


class TestBuilders:
    def test_train_config_stage_epochs(self):
        cfg = RunConfig({"rank": {"max_epochs": "5"}})
        assert cfg.train_config("rank").max_epochs == 5
        assert cfg.train_config("recall").max_epochs == 30

    def test_model_defaults_valid(self):
        ModelConfig(vocab_size=10, num_skills=4, num_position_names=2, **RunConfig().model_overrides())

    def test_every_default_is_typed(self):
        for section, keys in DEFAULTS.items():
            cfg = RunConfig()
            for key, value in keys.items():
                assert type(cfg.get(section, key)) is type(value)
