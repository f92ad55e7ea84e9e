"""
SPFA Toolkit Configuration
Environment-driven defaults for extraction, rotation and the Monte Carlo grid
"""

import os
from typing import Dict, Any

from errors import ConfigError


class Config:
    """Base configuration"""

    # Logging Configuration
    LOG_LEVEL = os.getenv("SPFA_LOG_LEVEL", "INFO")
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Reproducibility
    # SPFA_SEED is only a fallback; --seed on the command line always wins.
    SEED = int(os.getenv("SPFA_SEED", "20210514"))
    THREADS = int(os.getenv("SPFA_THREADS", str(os.cpu_count() or 1)))

    # Extraction Configuration
    MOMENT = os.getenv("SPFA_MOMENT", "correlation")
    TOLERANCE = float(os.getenv("SPFA_TOLERANCE", "1e-9"))
    GRADIENT_TOLERANCE = float(os.getenv("SPFA_GRADIENT_TOLERANCE", "1e-6"))
    MAX_ITER = int(os.getenv("SPFA_MAX_ITER", "2000"))
    HEYWOOD_BOUND = 0.998

    # Rotation Configuration
    ROTATION_STARTS = int(os.getenv("SPFA_ROTATION_STARTS", "10"))
    ROTATION_MAX_ITER = int(os.getenv("SPFA_ROTATION_MAX_ITER", "1000"))
    ROTATION_TOLERANCE = float(os.getenv("SPFA_ROTATION_TOLERANCE", "1e-8"))

    # Simulation Configuration
    REPLICATIONS = int(os.getenv("SPFA_REPLICATIONS", "200"))
    FULL_REPLICATIONS = 1000
    CACHE_SIZE = int(os.getenv("SPFA_CACHE_SIZE", "64"))
    METRICS_PATH = os.getenv("SPFA_METRICS_PATH", "")

    # Output Configuration
    SIGNIFICANT_DIGITS = 6

    @classmethod
    def to_dict(cls) -> Dict[str, Any]:
        """Convert configuration to dictionary"""
        return {
            key: getattr(cls, key)
            for key in dir(cls)
            if key.isupper() and not callable(getattr(cls, key))
        }

    @classmethod
    def validate(cls) -> None:
        """Validate configuration"""
        errors = []

        if cls.MOMENT not in ("correlation", "covariance"):
            errors.append("SPFA_MOMENT must be 'correlation' or 'covariance'")

        if cls.TOLERANCE <= 0 or cls.GRADIENT_TOLERANCE <= 0:
            errors.append("tolerances must be positive")

        if cls.ROTATION_TOLERANCE <= 0:
            errors.append("SPFA_ROTATION_TOLERANCE must be positive")

        if cls.MAX_ITER < 1 or cls.ROTATION_MAX_ITER < 1:
            errors.append("iteration limits must be at least 1")

        if cls.THREADS < 1:
            errors.append("SPFA_THREADS must be at least 1")

        if cls.ROTATION_STARTS < 0:
            errors.append("SPFA_ROTATION_STARTS must not be negative")

        if cls.REPLICATIONS < 1:
            errors.append("SPFA_REPLICATIONS must be at least 1")

        if cls.CACHE_SIZE < 1:
            errors.append("SPFA_CACHE_SIZE must be at least 1")

        if errors:
            raise ConfigError(f"Configuration validation failed: {', '.join(errors)}")


class DevelopmentConfig(Config):
    """Development configuration"""

    LOG_LEVEL = "DEBUG"


class ProductionConfig(Config):
    """Production configuration"""

    LOG_LEVEL = os.getenv("SPFA_LOG_LEVEL", "INFO")


class TestConfig(Config):
    """Test configuration"""

    LOG_LEVEL = "DEBUG"
    THREADS = 1
    ROTATION_STARTS = 3
    REPLICATIONS = 20
    METRICS_PATH = ""


# Environment-based configuration selection
ENV_CONFIGS = {
    "development": DevelopmentConfig,
    "production": ProductionConfig,
    "test": TestConfig,
}


def get_config() -> Config:
    """Get configuration based on environment"""
    env = os.getenv("SPFA_ENV", "production")
    config_class = ENV_CONFIGS.get(env, ProductionConfig)
    config_class.validate()
    return config_class


# Export current configuration
config = get_config()
