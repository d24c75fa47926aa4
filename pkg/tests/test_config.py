from dataclasses import fields

import pytest

from config import ConfigError, RunConfig, deterministic_requested, load_config


@pytest.fixture
def no_env(tmp_path):
    return tmp_path / "absent.env"


def _write(tmp_path, text, name="config.yaml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadConfig:
    def test_empty_file_gives_defaults(self, tmp_path, no_env):
        cfg = load_config(_write(tmp_path, ""), env_path=no_env)
        assert cfg == RunConfig()
        assert (cfg.tau, cfg.t_final, cfg.r, cfg.lambda0, cfg.eps1, cfg.eps2) == (
            0.005, 1.0, 0.3, 1.0, 5e-4, 1e-3)
        assert cfg.snapshot_times == (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
        assert cfg.steps == 200

    def test_shipped_config_matches_defaults(self, no_env):
        assert load_config(env_path=no_env) == RunConfig()

    def test_missing_file(self, tmp_path, no_env):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml", env_path=no_env)

    def test_file_values(self, tmp_path, no_env):
        text = "grid:\n  n: 65\nbasis:\n  indices: [1, 3]\n  initial_controls: [0.5, 1]\n"
        cfg = load_config(_write(tmp_path, text), env_path=no_env)
        assert cfg.n == 65
        assert cfg.indices == (1, 3)
        assert cfg.initial_controls == (0.5, 1.0)

    def test_r_out_of_range(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="optimizer.r"):
            load_config(_write(tmp_path, "optimizer:\n  r: 1.2\n"), env_path=no_env)

    def test_tau_must_divide(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="整除"):
            load_config(_write(tmp_path, "time:\n  tau: 0.003\n"), env_path=no_env)

    def test_unknown_key(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="grid.m"):
            load_config(_write(tmp_path, "grid:\n  m: 33\n"), env_path=no_env)

    def test_unknown_section(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="solver"):
            load_config(_write(tmp_path, "solver:\n  n: 33\n"), env_path=no_env)

    def test_yaml_error_reports_line(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="行"):
            load_config(_write(tmp_path, "grid:\n  n: 33\ntime: {tau: 0.01\n"), env_path=no_env)

    def test_all_violations_listed(self, tmp_path, no_env):
        text = "optimizer:\n  r: 1.2\n  eps1: -1\n  alpha0: 2\n"
        with pytest.raises(ConfigError) as err:
            load_config(_write(tmp_path, text), env_path=no_env)
        msg = str(err.value)
        assert "optimizer.r" in msg and "optimizer.eps1" in msg and "optimizer.alpha0" in msg

    def test_bad_types(self, tmp_path, no_env):
        text = "grid:\n  n: abc\nbasis:\n  scaled: maybe\n"
        with pytest.raises(ConfigError) as err:
            load_config(_write(tmp_path, text), env_path=no_env)
        assert "grid.n" in str(err.value) and "basis.scaled" in str(err.value)

    def test_duplicate_indices(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="basis.indices"):
            load_config(_write(tmp_path, "basis:\n  indices: [2, 2]\n"), env_path=no_env)

    def test_snapshot_off_grid(self, tmp_path, no_env):
        with pytest.raises(ConfigError, match="snapshot_times"):
            load_config(_write(tmp_path, "output:\n  snapshot_times: [0.0, 0.0033]\n"),
                        env_path=no_env)


class TestPrecedence:
    def test_overrides_beat_file(self, tmp_path, no_env):
        path = _write(tmp_path, "grid:\n  n: 33\n")
        cfg = load_config(path, {"grid.n": 17, "optimizer.r": None}, env_path=no_env)
        assert cfg.n == 17
        assert cfg.r == 0.3

    def test_string_lists_from_command_line(self, tmp_path, no_env):
        cfg = load_config(_write(tmp_path, ""), {"basis.indices": "1,3"}, env_path=no_env)
        assert cfg.indices == (1, 3)

    def test_environment_between_file_and_overrides(self, tmp_path, no_env, monkeypatch):
        path = _write(tmp_path, "output:\n  dir: from_file\n")
        monkeypatch.setenv("MIXING_OUTPUT_DIR", "from_env")
        assert load_config(path, env_path=no_env).output_dir == "from_env"
        assert load_config(path, {"output.dir": "from_cli"}, env_path=no_env).output_dir == "from_cli"

    def test_dotenv_file(self, tmp_path):
        env = _write(tmp_path, "MIXING_LOG_LEVEL=debug\n", name=".env")
        cfg = load_config(_write(tmp_path, ""), env_path=env)
        assert cfg.log_level == "DEBUG"

    def test_unknown_override(self, tmp_path, no_env):
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path, ""), {"grid.h": 0.1}, env_path=no_env)

    @pytest.mark.parametrize("value, expected", [("1", True), ("true", True), ("0", False), ("", False)])
    def test_deterministic_flag(self, monkeypatch, value, expected):
        monkeypatch.setenv("MIXING_DETERMINISTIC", value)
        assert deterministic_requested() is expected


class TestManifest:
    def test_every_field_recorded(self):
        manifest = RunConfig().to_manifest()
        recorded = sum(len(section) for section in manifest.values())
        assert recorded == len(fields(RunConfig))

    def test_perturbation_changes_manifest(self, tmp_path, no_env):
        base = load_config(_write(tmp_path, ""), env_path=no_env).to_manifest()
        perturbed = {
            "grid.n": 65, "time.tau": 0.01, "time.t_final": 2.0, "basis.indices": [1, 3],
            "basis.scaled": False, "basis.initial_controls": [1.0, 1.0],
            "initial.theta0": "sine-stripe", "optimizer.r": 0.5, "optimizer.lambda0": 2.0,
            "optimizer.eps1": 1e-3, "optimizer.eps2": 1e-2, "optimizer.alpha0": 1.0,
            "optimizer.max_iter": 10, "optimizer.adjoint_scheme": "explicit",
            "optimizer.adjoint_source": "sum-of-squares", "optimizer.quadrature": "simpson",
            "optimizer.debug": True, "output.dir": "elsewhere", "output.snapshot_times": [0.0],
            "output.controls_file": "c.csv", "logging.level": "DEBUG", "logging.file": "x.log",
        }
        assert len(perturbed) == len(fields(RunConfig))
        for dotted, value in perturbed.items():
            section, key = dotted.split(".")
            manifest = load_config(_write(tmp_path, ""), {dotted: value}, env_path=no_env).to_manifest()
            assert manifest[section][key] != base[section][key], dotted

    def test_optimize_config_carries_solver_fields(self):
        cfg = RunConfig(indices=(1, 3), r=0.4, adjoint_scheme="explicit")
        opt = cfg.to_optimize_config()
        assert (opt.indices, opt.r, opt.adjoint_scheme, opt.tau) == ((1, 3), 0.4, "explicit", 0.005)
