import pytest

from modules.config import RunConfig, Stage, load_config
from modules.errors import ConfigurationError


def write(tmp_path, text, name="run.env"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults_are_valid():
    config = load_config(environ={})
    assert config == RunConfig()
    assert config.horizon == 25 and config.grid_size == 1000
    assert config.model().params.env(2).mean_sojourn == 131400.0
    assert config.reward()(0.18) == 4.0


def test_env_text_reads_back(tmp_path):
    config = RunConfig(horizon=7, k_ladder=(3, 9), exceedance_years=(1.5, 2.0), reward_beyond=0.25)
    path = write(tmp_path, config.to_env_text())
    assert load_config(path, environ={}) == config


def test_sources_override_each_other_in_order(tmp_path):
    path = write(tmp_path, "HORIZON=5\nSEED=11\n")
    environ = {"OPTISTOP_HORIZON": "6", "OPTISTOP_LOG_LEVEL": "DEBUG"}
    assert load_config(path, environ={}).horizon == 5
    assert load_config(path, environ=environ).horizon == 6
    assert load_config(path, overrides={"horizon": 7, "seed": None}, environ=environ).horizon == 7
    assert load_config(path, overrides={"horizon": 7}, environ=environ).seed == 11


def test_list_values_parse_from_text(tmp_path):
    path = write(tmp_path, "K_LADDER=3, 5,8\nEXCEEDANCE_YEARS=1,2.5\n")
    config = load_config(path, environ={})
    assert config.k_ladder == (3, 5, 8)
    assert config.exceedance_years == (1.0, 2.5)


@pytest.mark.parametrize("text, match", [
    ("HORIZN=5\n", "Unknown configuration key"),
    ("HORIZON=five\n", "Cannot read horizon"),
    ("HORIZON=0\n", "horizon must be at least 1"),
    ("TIME_STEP_RULE=sometimes\n", "time_step_rule"),
    ("TRANSIENT=sometimes\n", "transient must be"),
    ("ALPHA=1.5\n", "alpha"),
    ("RATE_LOW_2=1e-5\n", "rate_low"),
    ("REWARD_KNOTS=0:1;0:2\n", "reward_knots"),
])
def test_bad_files_are_configuration_errors(tmp_path, text, match):
    with pytest.raises(ConfigurationError, match=match):
        load_config(write(tmp_path, text), environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError, match="does not exist"):
        load_config(tmp_path / "absent.env", environ={})


def test_bad_environment_value():
    with pytest.raises(ConfigurationError):
        load_config(environ={"OPTISTOP_GRID_SIZE": "many"})


def test_train_budget():
    config = RunConfig()
    assert config.train_budget(10) == 100_000
    assert config.train_budget(1000) == 1_000_000
    assert RunConfig(train_samples=2000).train_budget(1000) == 2000


def test_schedule_offset_defaults_to_ten_k():
    assert RunConfig().schedule().offset(50) == 500.0
    assert RunConfig(step_b=7.0).schedule().offset(50) == 7.0


def test_hashes_track_what_artifacts_depend_on():
    base = RunConfig()
    assert base.grid_hash(10) != base.grid_hash(50)
    assert base.grid_hash(10) == RunConfig(reward_beyond=1.0).grid_hash(10)
    assert base.grid_hash(10) != RunConfig(seed=1).grid_hash(10)
    assert base.grid_hash(10) != RunConfig(failure_threshold=0.3).grid_hash(10)
    assert base.solve_hash(10) != RunConfig(reward_beyond=1.0).solve_hash(10)
    assert base.solve_hash(10) != RunConfig(time_grid_points=20).solve_hash(10)
    assert base.model_hash() == RunConfig(evaluate_runs=5).model_hash()


def test_stage_streams_are_independent_and_reproducible():
    config = RunConfig(seed=3)
    first = config.rng(Stage.TRAIN, 10).random(4)
    assert config.rng(Stage.TRAIN, 10).random(4).tolist() == first.tolist()
    assert config.rng(Stage.TRAIN, 50).random(4).tolist() != first.tolist()
    assert config.rng(Stage.EVALUATE, 10).random(4).tolist() != first.tolist()
    assert RunConfig(seed=4).rng(Stage.TRAIN, 10).random(4).tolist() != first.tolist()


def test_per_hour_units(tmp_path):
    text = (
        "PARAM_UNITS=per_hour\n"
        f"MEAN_SOJOURN_1={1 / 17520}\nMEAN_SOJOURN_2={1 / 131400}\nMEAN_SOJOURN_3={1 / 8760}\n"
        f"WEIBULL_SCALE={1 / 11800}\n"
    )
    params = load_config(write(tmp_path, text), environ={}).params()
    assert params.env(1).mean_sojourn == pytest.approx(17520.0)
    assert params.env(3).mean_sojourn == pytest.approx(8760.0)
    assert params.weibull_scale == pytest.approx(11800.0)


def test_with_overrides_skips_missing_values():
    config = RunConfig().with_overrides(seed=9, output_dir=None)
    assert config.seed == 9 and config.output_dir == "runs"


def test_transient_reading_changes_the_model(tmp_path):
    restart = load_config(write(tmp_path, "TRANSIENT=restart\n"), environ={})
    assert restart.params().transient == "restart"
    assert RunConfig().params().transient == "continuous"
    assert restart.model_hash() != RunConfig().model_hash()
