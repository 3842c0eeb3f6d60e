# Shared dependencies for the job API
from functools import lru_cache

from app.services.job_executor import JobExecutor


@lru_cache()
def get_job_executor_instance() -> JobExecutor:
    """Process-wide job executor."""
    return JobExecutor()


def get_job_executor() -> JobExecutor:
    """Dependency to inject the job executor."""
    return get_job_executor_instance()
