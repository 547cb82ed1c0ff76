import pytest

from gcsmoe import config as cf
from gcsmoe.config import ConfigError

BASIC = """\
[data]
num_classes = 8
feature_dim = 4
head_count = 40
imbalance_ratio = 4
confusable_plan = 0:1:0.8, 2:3:0.5

[pipeline]
M = 2
S = 1
expert_hidden = 32, 16
cgc = off

[head]
epochs = 7
learning_rate = 0.003
"""


def test_parse_basic():
    cfg = cf.parse_config(BASIC)
    assert (cfg.pipeline.M, cfg.pipeline.S) == (2, 1)
    assert cfg.pipeline.expert_hidden == (32, 16)
    assert cfg.pipeline.cgc is False
    assert cfg.pipeline.head.epochs == 7 and cfg.pipeline.head.learning_rate == 0.003
    assert cfg.data.confusable_plan == ((0, 1, 0.8), (2, 3, 0.5))
    # untouched sections keep their defaults
    assert cfg.pipeline.expert == cf.PipelineConfig().expert


def test_round_trip():
    cfg = cf.parse_config(BASIC)
    again = cf.parse_config(cf.dumps_config(cfg))
    assert again.pipeline == cfg.pipeline
    assert again.data == cfg.data
    assert again.lines() == cfg.lines()


@pytest.mark.parametrize("key", ["M", "S"])
def test_missing_required_key(key):
    text = BASIC.replace(f"{key} = ", "# ")
    with pytest.raises(ConfigError, match=f"missing required key '{key}'"):
        cf.parse_config(text)


def test_missing_pipeline_section():
    with pytest.raises(ConfigError, match=r"missing section \[pipeline\]"):
        cf.parse_config("[data]\nnum_classes = 4\n")


def test_unknown_section_and_key():
    with pytest.raises(ConfigError, match=r"unknown section \[optimizer\]"):
        cf.parse_config(BASIC + "[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError, match="unknown key 'momentum_x'"):
        cf.parse_config(BASIC + "momentum_x = 1\n")


@pytest.mark.parametrize(
    "old, new, message",
    [
        ("M = 2", "M = two", "expected an integer"),
        ("cgc = off", "cgc = maybe", "expected on/off"),
        ("0:1:0.8", "0:1", "must be j:k:strength"),
        ("S = 1", "S = 3", "S must satisfy"),
        ("imbalance_ratio = 4", "imbalance_ratio = 0.5", "imbalance"),
    ],
)
def test_bad_values(old, new, message):
    with pytest.raises(ConfigError, match=message):
        cf.parse_config(BASIC.replace(old, new))


def test_paths_need_both():
    text = "[paths]\ntrain = a.txt\n\n[pipeline]\nM = 2\nS = 1\n"
    with pytest.raises(ConfigError, match="needs both"):
        cf.parse_config(text)


def test_overrides():
    cfg = cf.apply_overrides(cf.parse_config(BASIC), seed=9, division="random", M=3, S=2, cgc="on")
    p = cfg.pipeline
    assert (p.seed, p.division, p.M, p.S, p.cgc) == (9, "random", 3, 2, True)
    assert cfg.data.seed == 9
    assert cfg.overrides == {"seed": "9", "division": "random", "M": "3", "S": "2", "cgc": "on"}
    with pytest.raises(ConfigError, match="S must satisfy"):
        cf.apply_overrides(cfg, S=5)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        cf.load_config(tmp_path / "none.ini")
