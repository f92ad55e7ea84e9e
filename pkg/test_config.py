"""
Tests for config.py and errors.py
Environment defaults, validation and exit-code mapping
"""

import pytest

import config as settings_module
from config import ENV_CONFIGS, Config, DevelopmentConfig, get_config
from errors import (
    ConfigError,
    DegenerateInputError,
    InputError,
    NumericalError,
    RankDeficiencyError,
    RotationModeError,
    SingularityError,
    exit_code_for,
)


class TestConfiguration:
    """Tests for configuration classes"""

    def test_defaults_validate(self):
        Config.validate()

    def test_environment_selection(self, monkeypatch):
        monkeypatch.setenv("SPFA_ENV", "test")
        assert get_config() is settings_module.TestConfig
        monkeypatch.setenv("SPFA_ENV", "development")
        assert get_config() is DevelopmentConfig

    def test_unknown_environment_falls_back(self, monkeypatch):
        monkeypatch.setenv("SPFA_ENV", "staging")
        assert get_config() is ENV_CONFIGS["production"]

    def test_test_config_is_small(self):
        assert settings_module.TestConfig.THREADS == 1
        assert settings_module.TestConfig.REPLICATIONS < Config.REPLICATIONS

    def test_validation_collects_errors(self, monkeypatch):
        monkeypatch.setattr(Config, "MOMENT", "spearman")
        monkeypatch.setattr(Config, "THREADS", 0)
        with pytest.raises(ConfigError) as excinfo:
            Config.validate()
        assert "SPFA_MOMENT" in str(excinfo.value)
        assert "SPFA_THREADS" in str(excinfo.value)

    def test_to_dict(self):
        settings = Config.to_dict()
        assert settings["FULL_REPLICATIONS"] == 1000
        assert settings["HEYWOOD_BOUND"] == 0.998
        assert "validate" not in settings


class TestErrors:
    """Tests for the exception hierarchy"""

    @pytest.mark.parametrize(
        "error, code",
        [
            (InputError("bad"), 1),
            (ConfigError("bad"), 1),
            (DegenerateInputError("flat", column="x"), 1),
            (RotationModeError("oblique"), 1),
            (NumericalError("diverged"), 2),
            (SingularityError("singular"), 2),
            (RankDeficiencyError("rank"), 2),
            (RuntimeError("other"), 1),
        ],
    )
    def test_exit_codes(self, error, code):
        assert exit_code_for(error) == code

    def test_input_error_is_value_error(self):
        assert issubclass(InputError, ValueError)

    def test_singularity_details(self):
        error = SingularityError("zero uniqueness", eigenvalue=0.0, variable="X3")
        assert error.variable == "X3"
        assert error.eigenvalue == 0.0
