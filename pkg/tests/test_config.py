import pytest

from morewsss.config import ConfigError, RunConfig, dump_config, load_config, parse_config


def test_defaults():
    c = RunConfig()
    assert (c.alpha, c.beta, c.gamma) == (0.2, 0.1, 0.12)
    assert (c.cam_low, c.cam_high, c.bg_threshold) == (0.25, 0.70, 0.45)
    assert c.proportion == 1.2 and c.k == 32 and c.cls_pooling == "max"


def test_dump_parse_round_trip():
    c = RunConfig(seed=5, use_gcr=False, lr=1e-3, out_dir="runs/x")
    assert parse_config(dump_config(c)) == c


def test_parse_comments_and_types():
    c = parse_config("# run\nsteps = 1_000\nhflip = off  # no flips\nlr=0.01\n")
    assert c.steps == 1000 and c.hflip is False and c.lr == 0.01


@pytest.mark.parametrize("text", ["nope = 1", "steps = many", "hflip = maybe", "just words",
                                  "cam_low = 0.8", "num_heads = 5", "cls_pooling = sum", "top_k = 65"])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.txt")
    assert load_config(None) == RunConfig()
