from pydantic_settings import BaseSettings
from typing import Optional
from pydantic import field_validator


class Settings(BaseSettings):
    # App settings
    environment: str = "development"
    log_level: str = "INFO"

    # Output locations
    output_dir: str = "runs"
    jobs_dir: str = "logs/jobs"

    # API Security (job API only; unset means open)
    api_key: Optional[str] = None

    # Job execution
    job_timeout_seconds: int = 3600  # 1 hour
    max_concurrent_jobs: int = 2
    max_jobs_in_memory: int = 500  # finished jobs beyond this are served from jobs_dir

    # Ensemble workers (projection + k-means jobs)
    max_workers: int = 1

    @field_validator("log_level")
    @classmethod
    def normalize_log_level(cls, value: str) -> str:
        level = value.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {value}")
        return level

    @field_validator("max_workers", "max_concurrent_jobs", "max_jobs_in_memory")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    class Config:
        env_file = ".env"
        extra = "ignore"  # Ignore extra environment variables


settings = Settings()
