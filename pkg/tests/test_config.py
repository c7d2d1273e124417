from dataclasses import dataclass

import pytest

from headseg.config import ConfigError, emit_kv, parse_kv
from headseg.pipeline import PipelineConfig, demo_config, load_config
from headseg.ruleseg import RuleConfig


@dataclass
class Sample:
    n: int = 1
    x: float = 0.5
    flag: bool = False
    name: str = "a"
    sizes: tuple[int, ...] = (1, 2)


def test_parse_emit_round_trip():
    s = Sample(4, 2.25, True, "abc", (8, 16, 32))
    assert Sample(**parse_kv(emit_kv(s), Sample)) == s


def test_parse_comments_and_prefix():
    text = "# header\n\nsec.n = 3  # trailing\nother.n=9\nsec.flag=yes\n"
    assert parse_kv(text, Sample, prefix="sec") == {"n": 3, "flag": True}


@pytest.mark.parametrize("text,match", [("n=abc", "bad value for n"), ("flag=maybe", "bad value for flag"),
                                        ("size=3", "unknown key 'size'"), ("n 3", "expected key=value")])
def test_parse_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_kv(text, Sample)


def test_pipeline_config_round_trip(tmp_path):
    cfg = demo_config(grid=64, widths=(4, 8), fusion="weighted", rule=RuleConfig(cleanup=True))
    assert PipelineConfig.from_text(cfg.to_text()) == cfg
    p = tmp_path / "pipe.conf"
    p.write_text(cfg.to_text())
    assert load_config(p) == cfg


def test_pipeline_config_unknown_rule_key():
    with pytest.raises(ConfigError, match="unknown key"):
        PipelineConfig.from_text("grid=48\nrule.bogus=1\n")
