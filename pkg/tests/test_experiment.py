import hashlib
import json

import numpy as np
import pytest

import config
from error_handler import ConfigError
from experiment import (ExperimentConfig, read_samples_csv, write_samples_csv, write_table, write_manifest,
                        build_manifest, sample_header)
from system import SampleSet


def scalar_config(**overrides):
    data = {
        "name": "scalar",
        "system": {"horizon": 2, "A": 1.0, "B": 1.0, "E": 1.0},
        "samples": {"generator": {"n": 4, "seed": 3, "cov_scale": 1.0}},
        "reference": {"cov_scale": 1.0},
        "true_distribution": {"cov_scale": 1.0},
        "rho_grid": [2.0],
        "eps_grid": [0.5, 0.1],
        "replications": 2,
    }
    data.update(overrides)
    return data


def test_config_defaults_and_grids():
    experiment = ExperimentConfig(scalar_config())
    assert experiment.eps_grid == [0.1, 0.5]
    assert experiment.system.s == 2
    np.testing.assert_array_equal(experiment.cost.D, np.eye(4))

    default = ExperimentConfig(scalar_config(eps_grid=None))
    assert len(default.eps_grid) == 25
    assert default.eps_grid[0] == pytest.approx(1e-4)
    assert default.eps_grid[-1] == pytest.approx(10.0)

    spaced = ExperimentConfig(scalar_config(eps_grid={"logspace": [0.01, 1.0, 3]}))
    np.testing.assert_allclose(spaced.eps_grid, [0.01, 0.1, 1.0])


@pytest.mark.parametrize("overrides", [
    {"rho_grid": []},
    {"rho_grid": [-1.0]},
    {"eps_grid": {"logspace": [0.0, 1.0, 3]}},
    {"tolerances": {"NOT_A_TOLERANCE": 1.0}},
    {"system": {"preset": "pendulum", "horizon": 3}},
    {"system": {"horizon": 2, "A": 1.0}},
    {"cost": {"state_weight": 1.0}},
])
def test_config_errors(overrides):
    with pytest.raises(ConfigError):
        ExperimentConfig(scalar_config(**overrides))


def test_mass_spring_preset_config():
    experiment = ExperimentConfig(scalar_config(
        system={"preset": "mass_spring", "horizon": 3, "sampling_time": 0.5},
        cost={"state_weight": [[1.0, 0.0], [0.0, 0.1]], "input_weight": [[0.01]]},
        samples={"generator": {"n": 2, "cov_scale": 0.1}},
        reference={"cov_scale": 0.1}))
    assert experiment.system.s == 6
    assert experiment.cost.size == 9
    assert experiment.load_samples().trajectories.shape == (2, 6)
    assert experiment.reference().dim == 6


def test_generated_samples_are_seeded():
    experiment = ExperimentConfig(scalar_config())
    first = experiment.load_samples().trajectories
    second = ExperimentConfig(scalar_config()).load_samples().trajectories
    np.testing.assert_array_equal(first, second)
    other = experiment.load_samples(seed=4).trajectories
    assert not np.array_equal(first, other)


def test_sample_csv_header(tmp_path):
    experiment = ExperimentConfig(scalar_config())
    assert sample_header(3, 2, 1) == ["x0_1", "x0_2", "w0_1", "w1_1"]
    samples = SampleSet([[0.1, -0.2], [1.0 / 3.0, 2.5]])
    path = write_samples_csv(str(tmp_path / "samples.csv"), samples, experiment.system, manifest_hash="f" * 64)
    assert open(path).readline().strip() == f"# manifest_sha256={'f' * 64}"
    loaded = read_samples_csv(path, experiment.system)
    np.testing.assert_array_equal(loaded.trajectories, samples.trajectories)

    bad = tmp_path / "bad.csv"
    bad.write_text("w0_1,x0_1\n1,2\n")
    with pytest.raises(ConfigError):
        read_samples_csv(str(bad), experiment.system)


def test_sample_csv_keeps_every_bit(tmp_path):
    experiment = ExperimentConfig(scalar_config())
    rng = np.random.default_rng(11)
    samples = SampleSet(rng.normal(size=(200, 2)))
    path = write_samples_csv(str(tmp_path / "samples.csv"), samples, experiment.system)
    loaded = read_samples_csv(path, experiment.system)
    assert int(np.count_nonzero(loaded.trajectories != samples.trajectories)) == 0


def test_samples_from_path(tmp_path):
    (tmp_path / "samples.csv").write_text("x0_1,w0_1\n1.0,2.0\n3.0,4.0\n")
    config_path = tmp_path / "experiment.json"
    config_path.write_text(json.dumps(scalar_config(samples={"path": "samples.csv"})))
    experiment = ExperimentConfig.from_file(str(config_path))
    np.testing.assert_array_equal(experiment.load_samples().trajectories, [[1.0, 2.0], [3.0, 4.0]])


def test_manifest_hash_and_contents(tmp_path):
    experiment = ExperimentConfig(scalar_config())
    manifest = build_manifest("sweep", experiment, experiment.seed, extra_note="x")
    digest = write_manifest(str(tmp_path), manifest)
    text = (tmp_path / "manifest.json").read_text()
    assert digest == hashlib.sha256(text.encode()).hexdigest()
    stored = json.loads(text)
    assert stored["config_hash"] == experiment.config_hash()
    assert stored["eps_grid"] == [0.1, 0.5]
    assert stored["extra_note"] == "x"
    assert stored["host"]["logical_cpus"] >= 1
    assert "numpy" in stored["versions"]


def test_table_keeps_full_precision(tmp_path):
    path = write_table(str(tmp_path / "t.csv"), [{"a": 1.0 / 3.0, "b": "ok"}], ["a", "b"])
    value = open(path).read().splitlines()[1].split(",")[0]
    assert float(value) == 1.0 / 3.0


def test_tolerance_overrides(monkeypatch):
    monkeypatch.setattr(config, "ACHIEVABILITY_TOL", config.ACHIEVABILITY_TOL)
    experiment = ExperimentConfig(scalar_config(tolerances={"ACHIEVABILITY_TOL": 1e-4}))
    experiment.apply_tolerances()
    assert config.ACHIEVABILITY_TOL == 1e-4
    assert config.tolerance_snapshot()["ACHIEVABILITY_TOL"] == 1e-4


def test_zero_covariance_generator():
    experiment = ExperimentConfig(scalar_config(samples={"generator": {"n": 3, "seed": 7, "cov_scale": 0.0}}))
    np.testing.assert_array_equal(experiment.load_samples().trajectories, np.zeros((3, 2)))


def test_table_one_sample_shape():
    experiment = ExperimentConfig(scalar_config(
        system={"preset": "mass_spring", "horizon": 15},
        samples={"generator": {"n": 4, "seed": 7, "cov_scale": 0.3}},
        reference={"cov_scale": 0.3}))
    assert experiment.load_samples().trajectories.shape == (4, 30)
