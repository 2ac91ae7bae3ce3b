from pathlib import Path

import pytest

from kgdiff.config import RunConfig, load_config, parse_config, render_config, validate

REPO_ROOT = Path(__file__).resolve().parents[1]


def test_defaults_are_valid():
    cfg = RunConfig()
    assert validate(cfg) == []


def test_example_config_parses_clean():
    cfg, problems = load_config(REPO_ROOT / "example.config")
    assert problems == []
    # the shipped example documents the defaults
    assert cfg == RunConfig()


def test_unknown_keys_and_sections_reported():
    text = "[run]\nseed = 1\nbogus = 2\n[nosuch]\nx = 1\n"
    _, problems = parse_config(text)
    assert any("unknown key 'bogus'" in p for p in problems)
    assert any("unknown section [nosuch]" in p for p in problems)


def test_all_violations_reported_not_just_first():
    text = (
        "[profile]\nlambda = 1.5\n"
        "[schedule]\nbeta_min = -1\n"
        "[net]\nhidden = 7\n"
        "[sample]\nstep_size = 2.0\n"
    )
    _, problems = parse_config(text)
    assert len(problems) >= 4
    joined = "\n".join(problems)
    for frag in ("[profile] lambda", "[schedule] beta_min", "[net] hidden", "[sample] step_size"):
        assert frag in joined


def test_type_errors_collected():
    _, problems = parse_config("[run]\nseed = abc\n[train]\nbatch = x\n")
    assert len(problems) >= 2


def test_lambda_alias_roundtrip():
    cfg, problems = parse_config("[profile]\nlambda = 0.25\n")
    assert problems == []
    assert cfg.profile.lam == 0.25
    rendered = render_config(cfg)
    assert "lambda = 0.25" in rendered
    again, problems2 = parse_config(rendered)
    assert problems2 == []
    assert again == cfg


def test_digest_stable_and_sensitive():
    a = RunConfig()
    b, _ = parse_config("[profile]\nlambda = 0.31\n")
    assert a.digest() == RunConfig().digest()
    assert a.digest() != b.digest()


def test_sweep_lambda_list_parsing():
    cfg, problems = parse_config("[sweep]\nlambdas = 0.4, 0.2\nseeds = 3\n")
    assert problems == []
    assert cfg.sweep.lambdas == (0.4, 0.2)
    assert cfg.sweep.seeds == 3


def test_respect_validity_requires_date():
    _, problems = parse_config("[profile]\nrespect_validity = true\n")
    assert any("reference_date" in p for p in problems)
    _, ok = parse_config("[profile]\nrespect_validity = true\nreference_date = 2020-05-01\n")
    assert ok == []
