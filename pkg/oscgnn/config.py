"""
Configuration module using Pydantic Settings.
Environment variables prefixed with OSCGNN_ (or a .env file) override defaults.
"""
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Engine-wide defaults with environment variable support"""

    app_name: str = "Oscillatory GNN engine"
    log_level: str = "INFO"
    output_dir: str = "runs"

    # Simulation defaults
    sim_dt: float = 0.01
    rk45_rtol: float = 1e-10
    rk45_atol: float = 1e-12
    rk45_max_steps: int = 1_000_000
    growth_limit: float = 1e6

    # Training defaults
    train_dt: float = 1.0
    newton_tol: float = 1e-5
    newton_max_iter: int = 50
    beta_min: float = 1e-8
    graph_batch_size: int = 64

    # Parallel trials
    jobs: int = 1

    model_config = SettingsConfigDict(env_prefix="OSCGNN_", env_file=".env", extra="ignore")


@lru_cache()
def get_settings() -> Settings:
    """
    Create settings instance with caching.
    The @lru_cache decorator ensures we create only one instance.
    """
    return Settings()


settings = get_settings()
