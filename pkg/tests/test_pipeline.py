from dataclasses import replace

import numpy as np
import pytest

from robust_mfsc.config import SimConfig, population_example_config
from robust_mfsc.errors import EXIT_RANK, PipelineError, exit_code_for
from robust_mfsc.irl import TABLE_COLUMNS
from robust_mfsc.pipeline import PHASES, phase, run_pipeline


def test_phase_wraps_failures_with_its_name():
    with pytest.raises(PipelineError) as info:
        with phase("identify"):
            raise ValueError("singular")
    assert info.value.phase == "identify"
    assert isinstance(info.value.cause, ValueError)
    assert "identify" in PHASES


def test_noise_free_run_tracks_model_based_iterates(small_learning_config):
    artifact = run_pipeline(small_learning_config, noise=False)
    assert artifact.rank_report.passed
    assert max(artifact.identification_errors.values()) < 1e-2
    assert artifact.error_table, "comparison table is empty"
    final = artifact.error_table[-1]
    for column in ("P", "L_p", "K_p", "Pi", "L_pi", "K_pi"):
        assert final[column] <= 0.05, column
    assert set(TABLE_COLUMNS) <= set(final)
    assert artifact.mean_field.shape == (small_learning_config.sim.steps + 1, 2)
    assert np.all(np.isfinite(artifact.mean_field))
    summary = artifact.summary()
    assert summary["learned_sare"]["iterations"] == artifact.sare.iterations


def test_stochastic_run_on_coarse_grid(tmp_path):
    config = population_example_config()
    config.sim = SimConfig(N=20, dt=1e-3, horizon=2.0, Ns=20, seed=5, substeps=5)
    config.irl = replace(config.irl, tl=2.0, T=0.1, Ts=0.01)
    config.output_dir = tmp_path / "run"
    assert np.any(config.model.C) and np.any(config.model.D)
    artifact = run_pipeline(config)
    assert artifact.rank_report.passed
    assert artifact.sare.Lambda is not None
    for gain in (artifact.gains.K_p, artifact.gains.L_p, artifact.gains.K_pi, artifact.gains.L_pi):
        assert np.all(np.isfinite(gain))
    assert np.all(np.isfinite(artifact.mean_field))
    assert artifact.error_table[-1]["P"] < 0.5


def test_missing_exploration_fails_in_rank_phase(small_learning_config):
    config = small_learning_config
    config.irl = replace(config.irl, exploration=False)
    with pytest.raises(PipelineError) as info:
        run_pipeline(config, noise=False, compare=False)
    assert info.value.phase == "rank"
    assert exit_code_for(info.value) == EXIT_RANK


@pytest.mark.slow
def test_population_example_reproduction():
    config = population_example_config()
    artifact = run_pipeline(config)
    assert artifact.sare.iterations <= 5
    assert artifact.pi.iterations <= 5
    final = artifact.error_table[-1]
    for column in TABLE_COLUMNS:
        assert final[column] <= 0.05, column


@pytest.mark.slow
def test_smaller_sample_count_still_learns():
    config = population_example_config()
    config.sim = SimConfig(N=100, Ns=100, dt=0.001, horizon=14.0, seed=8, substeps=10)
    artifact = run_pipeline(config, compare=True)
    assert artifact.error_table[-1]["P"] <= 0.1
