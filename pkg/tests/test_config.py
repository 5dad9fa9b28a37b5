"""Config loading, overrides, and validation."""

import pytest

from hdrfuse.config import ConfigError, RunConfig, config_from_dict, \
    load_config


class TestDefaults:
    def test_documented_defaults(self):
        cfg = load_config()
        assert cfg.train.lr == 5e-4
        assert (cfg.train.beta1, cfg.train.beta2) == (0.9, 0.999)
        assert cfg.train.eps == 1e-8
        assert cfg.train.batch_size == 4
        assert cfg.train.crop == 128
        assert cfg.train.stride == 64
        assert cfg.mask.patch_size == 8
        assert cfg.mask.ratio == 0.75
        assert cfg.loss.lam == 1e-2
        assert cfg.loss.mu == 5000.0
        assert cfg.apss.beta == 85.0
        assert (cfg.apss.eps_low, cfg.apss.eps_high) == (0.05, 0.95)
        assert cfg.network.window_sizes == (2, 4, 8)
        assert cfg.ssl.loss_on == "all"
        assert cfg.data.gamma == 2.2

    def test_network_config_conversion(self):
        nc = load_config().network_config()
        assert nc.embed_dim == 60
        assert nc.divisor == 8


class TestFileLoading:
    def test_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  lr: 0.001\n  batch_size: 2\nmask:\n  ratio: 0.5\n")
        cfg = load_config(p)
        assert cfg.train.lr == 0.001
        assert cfg.train.batch_size == 2
        assert cfg.mask.ratio == 0.5

    def test_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"loss": {"lambda": 0.02, "taps": 2}}')
        cfg = load_config(p)
        assert cfg.loss.lam == 0.02
        assert cfg.loss.taps == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            config_from_dict({"nope": {"x": 1}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="train.learning_rate"):
            config_from_dict({"train": {"learning_rate": 1e-3}})

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match="train.lr"):
            config_from_dict({"train": {"lr": "fast"}})


class TestOverrides:
    def test_set_values(self):
        cfg = load_config(overrides=["train.lr=0.002",
                                     "loss.lambda=0.5",
                                     "ssl.loss_on=masked_only",
                                     "network.global_skip=false"])
        assert cfg.train.lr == 0.002
        assert cfg.loss.lam == 0.5
        assert cfg.ssl.loss_on == "masked_only"
        assert cfg.network.global_skip is False

    def test_list_value(self):
        cfg = load_config(overrides=["network.window_sizes=[2, 4]"])
        assert cfg.network.window_sizes == (2, 4)

    def test_seed_wins(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("train:\n  seed: 5\n")
        cfg = load_config(p, overrides=["train.seed=6"], seed=7)
        assert cfg.train.seed == 7

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["train.lr"])
        with pytest.raises(ConfigError):
            load_config(overrides=["lr=0.1"])
        with pytest.raises(ConfigError):
            load_config(overrides=["nope.lr=0.1"])


class TestValidation:
    def test_crop_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            load_config(overrides=["train.crop=100"])

    def test_bad_ranges(self):
        for bad in ("train.lr=0", "mask.ratio=1.0", "apss.beta=0",
                    "loss.lambda=-1", "apss.eps_low=0.96",
                    "ssl.loss_on=nothing", "loss.backbone=resnet"):
            with pytest.raises(ConfigError):
                load_config(overrides=[bad])

    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="network"):
            load_config(overrides=["network.embed_dim=50"])


def test_to_dict_round_trip():
    cfg = load_config(overrides=["loss.lambda=0.03", "train.crop=64"])
    d = cfg.to_dict()
    assert d["loss"]["lambda"] == 0.03
    assert "lam" not in d["loss"]
    back = config_from_dict(d)
    assert back.loss.lam == 0.03
    assert back.train.crop == 64
    assert back.network.window_sizes == cfg.network.window_sizes
    assert isinstance(back, RunConfig)
