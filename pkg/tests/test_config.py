import pytest

from cmr.config import ConfigError, TrainConfig, parse_pairs


def test_defaults():
    cfg = TrainConfig()
    assert cfg.train.lr == 3e-4 and cfg.train.batch_size == 16
    assert (cfg.regressor.channels, cfg.regressor.blocks, cfg.regressor.groups) == (64, 5, 8)
    assert cfg.encoder.feature_dim == 128 and cfg.mlp.lambda_beta == 0.1


def test_text_round_trip():
    cfg = TrainConfig().with_overrides([("train.seed", "7"), ("encoder.widths", "8, 16"),
                                        ("train.use_weak", "no"), ("train.lr", "0.001")])
    back = TrainConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.encoder.widths == (8, 16) and back.train.use_weak is False


def test_every_key_addressable():
    for line in TrainConfig().to_text().splitlines():
        key, value = (s.strip() for s in line.split("=", 1))
        TrainConfig().with_overrides([(key, value)])


@pytest.mark.parametrize("key", ["train.sed", "foo.bar", "train", "regressor.depth"])
def test_unknown_keys(key):
    with pytest.raises(ConfigError, match="unknown config key"):
        TrainConfig().with_overrides([(key, "1")])


@pytest.mark.parametrize("key,value", [
    ("train.seed", "x"), ("train.batch_size", "0"), ("train.lr", "-1"), ("train.model", "cnn"),
    ("train.use_weak", "maybe"), ("regressor.channels", "30"), ("encoder.widths", "8,a"),
    ("mlp.lambda_beta", "-0.5"), ("fc.hidden", "-2"),
])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        TrainConfig().with_overrides([(key, value)])


def test_later_pairs_win():
    cfg = TrainConfig().with_overrides([("train.seed", "1"), ("train.seed", "2")])
    assert cfg.train.seed == 2


def test_parse_pairs_comments_and_errors():
    assert parse_pairs("# c\n\n a = 1 \nb=x=y\n") == [("a", "1"), ("b", "x=y")]
    with pytest.raises(ConfigError, match="f.txt:2"):
        parse_pairs("a = 1\nnonsense\n", "f.txt")
