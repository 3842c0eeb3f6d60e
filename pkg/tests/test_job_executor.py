import asyncio
import json
import threading
import time
from pathlib import Path

import pytest
from unittest.mock import patch

from app.config import settings
from app.models import JobStatus, JobType, PipelineConfig
from app.services.job_executor import JobExecutor
from app.services.pipeline import run_segmentation


@pytest.fixture
def executor(tmp_path):
    return JobExecutor(jobs_dir=str(tmp_path / "jobs"))


async def test_evaluate_job(executor, synth_fixture, tmp_path):
    _, files = synth_fixture
    job = executor.create_job(JobType.evaluate, {"pred": files["ground_truth"], "gt": files["ground_truth"]})
    assert job.status == JobStatus.pending

    await executor.execute_job(job.id)

    assert job.status == JobStatus.completed
    assert job.results["rows"][0]["report"]["pr"] == 1.0
    persisted = json.loads((tmp_path / "jobs" / f"{job.id}.json").read_text())
    assert persisted["status"] == "completed"


async def test_segment_job(executor, fast_config):
    job = executor.create_job(JobType.segment, fast_config.to_flat())
    await executor.execute_job(job.id)

    assert job.status == JobStatus.completed, job.error_log
    assert job.results["outputs"]["consensus"].endswith("consensus.pgm")
    assert job.results["metrics"]["pr"] >= 0.0


async def test_bad_args_fail_job(executor):
    job = executor.create_job(JobType.segment, {"unknown_key": 1})
    await executor.execute_job(job.id)

    assert job.status == JobStatus.failed
    assert "unknown_key" in job.error_log
    assert job.completed_at is not None


async def test_job_timeout(executor):
    def slow(job_type, args, cancel=None):
        time.sleep(0.5)
        return {}

    job = executor.create_job(JobType.evaluate, {})
    with patch.object(settings, "job_timeout_seconds", 0.05), patch.object(executor, "_run", slow):
        await executor.execute_job(job.id)

    assert job.status == JobStatus.failed
    assert "timed out" in job.error_log


async def test_cancel_running_job(executor):
    seen = {}

    def slow(job_type, args, cancel=None):
        seen["stopped"] = cancel.wait(timeout=2.0)
        return {}

    job = executor.create_job(JobType.evaluate, {})
    with patch.object(executor, "_run", slow):
        await executor.start_job(job.id)
        await asyncio.sleep(0.05)
        task = executor.running_jobs[job.id]
        assert job.id in executor.get_running_jobs()

        assert await executor.cancel_job(job.id) is True
        await asyncio.gather(task, return_exceptions=True)

    assert job.status == JobStatus.cancelled
    assert seen["stopped"] is True
    assert await executor.cancel_job(job.id) is False


async def test_timed_out_job_keeps_its_slot(tmp_path):
    lock = threading.Lock()
    active = {"now": 0, "peak": 0}

    def slow(job_type, args, cancel=None):
        with lock:
            active["now"] += 1
            active["peak"] = max(active["peak"], active["now"])
        time.sleep(0.3)
        with lock:
            active["now"] -= 1
        return {}

    with patch.object(settings, "max_concurrent_jobs", 1), patch.object(settings, "job_timeout_seconds", 0.05):
        executor = JobExecutor(jobs_dir=str(tmp_path / "jobs"))
        first = executor.create_job(JobType.evaluate, {})
        second = executor.create_job(JobType.evaluate, {})
        with patch.object(executor, "_run", slow):
            await asyncio.gather(executor.execute_job(first.id), executor.execute_job(second.id))

    assert first.status == JobStatus.failed
    assert second.status == JobStatus.failed
    assert active["peak"] == 1


async def test_timeout_stops_pipeline_at_next_stage(executor, fast_config):
    started = threading.Event()

    def run_with_cancel(job_type, args, cancel=None):
        started.set()
        time.sleep(0.2)
        return run_segmentation(PipelineConfig.from_flat(args), cancel=cancel)

    job = executor.create_job(JobType.segment, fast_config.to_flat())
    with patch.object(settings, "job_timeout_seconds", 0.05), patch.object(executor, "_run", run_with_cancel):
        await executor.execute_job(job.id)

    assert started.is_set()
    assert job.status == JobStatus.failed
    assert not (Path(fast_config.output_dir) / "consensus.pgm").exists()


def test_list_jobs_filters(executor):
    first = executor.create_job(JobType.evaluate)
    second = executor.create_job(JobType.gen_synth)

    assert {job.id for job in executor.list_jobs()} == {first.id, second.id}
    assert executor.list_jobs(job_type=JobType.gen_synth) == [second]
    assert executor.list_jobs(status=JobStatus.running) == []


async def test_finished_jobs_evicted_but_still_readable(executor):
    with patch.object(settings, "max_jobs_in_memory", 2):
        done = executor.create_job(JobType.evaluate, {})
        await executor.execute_job(done.id)
        assert done.status == JobStatus.failed

        pending = executor.create_job(JobType.evaluate, {})
        newest = executor.create_job(JobType.evaluate, {})

    assert set(executor.jobs) == {pending.id, newest.id}
    restored = executor.get_job(done.id)
    assert restored.status == JobStatus.failed
    assert "pred and gt" in restored.error_log
    assert executor.get_job("missing") is None


def test_pending_jobs_never_evicted(executor):
    with patch.object(settings, "max_jobs_in_memory", 1):
        jobs = [executor.create_job(JobType.evaluate, {}) for _ in range(3)]

    assert set(executor.jobs) == {job.id for job in jobs}
