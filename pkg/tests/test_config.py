import pytest

from fcbo.config import ConfigError, ExperimentConfig, defaults_for, format_config, parse_config


@pytest.mark.parametrize("scm", ["chain", "health", "prop1_case_i", "prop1_case_ii"])
def test_defaults_roundtrip(scm):
    cfg = defaults_for(scm)
    assert parse_config(format_config(cfg)) == cfg


def test_overrides_and_comments():
    cfg = parse_config("scm = health  # model\ntrials = 3\nhard_range.CI = 0.2,0.4\npgain = Age>65; Age<60\n")
    assert cfg.trials == 3
    assert cfg.hard_range["CI"] == (0.2, 0.4)
    assert cfg.hard_range["Statin"] == (0.1, 1.0)
    assert cfg.pgain == ("Age>65", "Age<60")
    assert cfg.cost_kind == "area"


def test_every_bad_line_reported():
    with pytest.raises(ConfigError) as info:
        parse_config("trials = x\nbogus = 1\nnoequals\n")
    assert len(info.value.errors) == 3
    assert [e.split(":")[0] for e in info.value.errors] == ["line 1", "line 2", "line 3"]


def test_duplicate_key():
    with pytest.raises(ConfigError):
        parse_config("trials = 2\ntrials = 3\n")


@pytest.mark.parametrize(
    "line",
    ["trials = 0", "samples_per_trial = 0", "grid_size = 1", "methods = fcbo,ucb", "cost_kind = volume", "n_seeds = 0"],
)
def test_validation(line):
    with pytest.raises(ConfigError):
        parse_config(line + "\n")


def test_seeds_are_consecutive():
    cfg = parse_config("seed = 7\nn_seeds = 3\n")
    assert cfg.seeds() == [7, 8, 9]


def test_run_config_carries_fields():
    cfg = defaults_for("health")
    rc = cfg.run_config("cbo", 4)
    assert rc.method == "cbo" and rc.rng_seed == 4 and rc.trials == 80 and rc.grid_size == 5
    assert dict(rc.hard_ranges) == cfg.hard_range


def test_unknown_builtin_defaults():
    with pytest.raises(KeyError):
        defaults_for("nope")
    assert isinstance(ExperimentConfig(scm="chain"), ExperimentConfig)
