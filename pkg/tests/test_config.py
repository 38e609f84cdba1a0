from pathlib import Path

import pytest

from loadshed.config import ConfigError, load_config, parse_config, parse_buses


def test_minimal_config_defaults():
    cfg = parse_config("case = case6\nseed = 5\n")
    assert cfg.case == "case6" and cfg.seed == 5
    assert cfg.samples_per_contingency == 300
    assert cfg.perturb_range == (0.95, 1.05)
    assert cfg.hyper.hidden == (40, 30, 20)


def test_full_config(tmp_path):
    text = """\
# study
case = grid.m
seed = 11
samples_per_contingency = 20   # per id
perturb_range = 0.9, 1.1
hidden = 10, 5
activation = tanh
optimizer = adam
epochs = 40
learning_rate = 0.01
split_seed = 3
buses = 4, 5
out = runs
"""
    cfg = parse_config(text, tmp_path)
    assert cfg.case_path() == str(tmp_path / "grid.m")
    assert cfg.out_dir() == tmp_path / "runs"
    assert cfg.perturb_range == (0.9, 1.1)
    h = cfg.hyper
    assert (h.hidden, h.activation, h.optimizer, h.epochs, h.learning_rate, h.split_seed) == (
        (10, 5), "tanh", "adam", 40, 0.01, 3)
    assert cfg.buses == "4, 5"


def test_explicit_contingencies_take_precedence(case6):
    cfg = parse_config("case = case6\nseed = 1\ncontingencies = top:1\n"
                       "contingency.A = 5\ncontingency.B = 9, 11\n")
    conts = cfg.contingencies(case6)
    assert [(c.id, c.outaged_branches) for c in conts] == [("A", (5,)), ("B", (9, 11))]


def test_top_contingencies(case6):
    conts = parse_config("case = case6\nseed = 1\ncontingencies = top:1,2\n").contingencies(case6)
    assert [len(c.outaged_branches) for c in conts] == [1, 2]


def test_unknown_branch_in_contingency(case6):
    cfg = parse_config("case = case6\nseed = 1\ncontingency.X = 99\n")
    with pytest.raises(ConfigError, match="99"):
        cfg.contingencies(case6)


@pytest.mark.parametrize("text, message", [
    ("seed = 1\n", "case"),
    ("case = case6\n", "seed"),
    ("case = case6\nseed = 1\ncolour = red\n", "unknown key"),
    ("case = case6\nseed = 1\nseed = 2\n", "duplicate"),
    ("case = case6\nseed = one\n", "seed"),
    ("case = case6\nseed = 1\njust words\n", "key = value"),
    ("case = case6\nseed = 1\nperturb_range = 1.1, 1.0\n", "perturb_range"),
    ("case = case6\nseed = 1\nhidden = 4, x\n", "hidden"),
    ("case = case6\nseed = 1\noptimizer = sgd\n", "optimizer"),
    ("case = case6\nseed = 1\nsamples_per_contingency = 0\n", "positive"),
    ("case = case6\nseed = 1\ncontingencies = worst:3\n", None),
])
def test_config_errors(case6, text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text).contingencies(case6)


def test_bus_selection(case6):
    assert parse_buses("all", case6, (4, 5)) == (4, 5)
    assert parse_buses("6,4", case6, ()) == (6, 4)
    with pytest.raises(ConfigError, match="unknown buses"):
        parse_buses("4,77", case6, ())


def test_load_config_resolves_relative_to_file(tmp_path):
    p = tmp_path / "sub" / "study.cfg"
    p.parent.mkdir()
    p.write_text("case = ../grid.m\nseed = 1\n")
    cfg = load_config(p)
    assert Path(cfg.case_path()).resolve() == (tmp_path / "grid.m").resolve()
