from pathlib import Path

import numpy as np
import pytest

from robust_mfsc.config import (
    DualLoopConfig,
    InitConfig,
    IrlConfig,
    RobustConfig,
    SimConfig,
    config_hash,
    load_config,
    population_example_config,
    parse_config,
    parse_matrix,
    serialize_config,
)
from robust_mfsc.errors import ConfigError

SHIPPED_CONFIG = Path(__file__).resolve().parents[1] / "data" / "population_example.ini"


def test_parse_matrix_rows_and_entries():
    np.testing.assert_array_equal(parse_matrix("0.3,0.7; -0.9,0.5"), [[0.3, 0.7], [-0.9, 0.5]])
    np.testing.assert_array_equal(parse_matrix("1.25"), [[1.25]])


@pytest.mark.parametrize("literal", ["", "1,2; 3", "a,b"])
def test_parse_matrix_rejects_bad_literals(literal):
    with pytest.raises(ConfigError):
        parse_matrix(literal)


def test_shipped_config_matches_builtin_example():
    loaded = load_config(SHIPPED_CONFIG)
    assert config_hash(loaded) == config_hash(population_example_config())
    np.testing.assert_array_equal(loaded.model.A, [[0.3, 0.7], [-0.9, 0.5]])
    assert loaded.irl.omega2 == (-300.0, 300.0)
    assert loaded.sim.steps == 14000


def test_serialize_round_trip_preserves_overrides():
    config = population_example_config()
    config.sim = SimConfig(N=50, dt=0.01, horizon=2.0, Ns=20, seed=3)
    config.init = InitConfig(mode="user", K0=np.array([[6.0, -3.0]]))
    restored = parse_config(serialize_config(config))
    assert restored.sim.N == 50
    assert restored.sim.seed == 3
    assert restored.init.mode == "user"
    np.testing.assert_array_equal(restored.init.K0, [[6.0, -3.0]])
    assert config_hash(restored) == config_hash(config)


def test_missing_sections_and_keys():
    with pytest.raises(ConfigError, match=r"\[model\] and \[cost\]"):
        parse_config("[model]\na = 1\n")
    text = SHIPPED_CONFIG.read_text(encoding="utf-8").replace("d = 0.05; 0.05\n", "")
    with pytest.raises(ConfigError, match="model.d"):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.ini")


def test_block_validation():
    with pytest.raises(ConfigError):
        DualLoopConfig(xi=0.0)
    with pytest.raises(ConfigError):
        InitConfig(mode="user")
    with pytest.raises(ConfigError):
        SimConfig(dt=0.003, horizon=1.0)
    with pytest.raises(ConfigError):
        IrlConfig(t1=0.0, tl=0.05, T=0.1)
    with pytest.raises(ConfigError):
        IrlConfig(quadrature="simpson")
    with pytest.raises(ConfigError):
        RobustConfig(grid=[1e-2, 1e-3])
    with pytest.raises(ConfigError):
        RobustConfig(mode="sometimes")


def test_bad_value_in_section_becomes_config_error():
    text = SHIPPED_CONFIG.read_text(encoding="utf-8").replace("n = 500", "n = many")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_init_epsilon_falls_back_to_dualloop():
    config = population_example_config()
    assert config.init_epsilon == 5.0
    config.init = InitConfig(epsilon=2.0)
    assert config.init_epsilon == 2.0


def test_init_seed_is_accepted_and_round_tripped():
    text = SHIPPED_CONFIG.read_text(encoding="utf-8").replace("mode = lmi\n", "mode = lmi\nseed = 17\n", 1)
    config = parse_config(text)
    assert config.init.seed == 17
    assert parse_config(serialize_config(config)).init.seed == 17
    assert population_example_config().init.seed is None


def test_sim_substeps_are_parsed_and_validated():
    assert load_config(SHIPPED_CONFIG).sim.substeps == 10
    assert SimConfig().substeps == 1
    assert SimConfig(dt=0.01, horizon=1.0, substeps=4).substep_dt == pytest.approx(0.0025)
    with pytest.raises(ConfigError, match="substeps"):
        SimConfig(substeps=0)
